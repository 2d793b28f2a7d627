//! Python bindings. Matrices cross the boundary as lists of row lists.

use std::path::PathBuf;

use ibit::convattn::{
    attention_apply, build_circular_conv_attention_matrix, build_conv_attention_matrix, conv2d_reference,
    ConvFilter, GridGeometry,
};
use ibit::data::{load_idx, subset_fraction, synth_shapes, synth_train_test, write_idx, LabeledImageSet};
use ibit::explain::{attention_rollout, diagonal_mass_fraction, export_heatmap};
use ibit::linalg::Matrix;
use ibit::lmsa::{lmsa_forward, LmsaParams, MaskSet, Normalization, QkvWeights};
use ibit::mask::{
    compose_mask, gaussian_attention_target, roll_rows, train_mask_weights, unroll_rows, GaussianTargetSpec,
    MaskTrainConfig, SubMaskPair,
};
use ibit::model::{evaluate, train, EpochMetrics, Model, ModelCheckpoint, TrainConfig, Variant};
use ibit::verify::{equivalence_suite, rank_suite};
use ibit::IbitError;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for ibit::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(|e: IbitError| PyValueError::new_err(e.to_string()))
    }
}

fn matrix(rows: &Rows) -> PyResult<Matrix> {
    Matrix::from_rows(rows).py()
}

fn grid(height: usize, width: usize) -> PyResult<GridGeometry> {
    GridGeometry::new(height, width).py()
}

fn to_json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Zero-padded 2D convolution anchored at the top-left filter tap.
#[pyfunction]
fn conv2d(x: Rows, filter: Rows) -> PyResult<Rows> {
    let x = matrix(&x)?;
    let geom = grid(x.rows(), x.cols())?;
    let f = ConvFilter::new(matrix(&filter)?).py()?;
    Ok(conv2d_reference(&x, &f, geom).py()?.to_rows())
}

/// Attention matrix that reproduces `conv2d` on flattened images.
#[pyfunction]
#[pyo3(signature = (filter, height, width, circular = false))]
fn conv_attention_matrix(filter: Rows, height: usize, width: usize, circular: bool) -> PyResult<Rows> {
    let f = ConvFilter::new(matrix(&filter)?).py()?;
    let geom = grid(height, width)?;
    let m = if circular {
        build_circular_conv_attention_matrix(&f, geom)
    } else {
        build_conv_attention_matrix(&f, geom)
    };
    Ok(m.py()?.to_rows())
}

#[pyfunction]
fn apply_attention(attn: Rows, x_flat: Rows) -> PyResult<Rows> {
    Ok(attention_apply(&matrix(&attn)?, &matrix(&x_flat)?).py()?.to_rows())
}

#[pyfunction]
fn roll(m: Rows) -> PyResult<Rows> {
    Ok(roll_rows(&matrix(&m)?).py()?.to_rows())
}

#[pyfunction]
fn unroll(m: Rows) -> PyResult<Rows> {
    Ok(unroll_rows(&matrix(&m)?).py()?.to_rows())
}

/// Row-normalized Gaussian locality target over a `height x width` grid.
#[pyfunction]
fn gaussian_target(height: usize, width: usize, sigma: f64) -> PyResult<Rows> {
    let spec = GaussianTargetSpec {
        geom: grid(height, width)?,
        sigma,
        window: None,
    };
    Ok(gaussian_attention_target(&spec).py()?.to_rows())
}

#[pyfunction]
fn diagonal_mass(m: Rows, height: usize, width: usize, radius: f64) -> PyResult<f64> {
    diagonal_mass_fraction(&matrix(&m)?, grid(height, width)?, radius).py()
}

/// Writes `<path>.csv` and `<path>.pgm`; returns both paths.
#[pyfunction]
fn save_heatmap(m: Rows, path: PathBuf) -> PyResult<(PathBuf, PathBuf)> {
    let files = export_heatmap(&matrix(&m)?, &path).py()?;
    Ok((files.csv, files.pgm))
}

#[pyfunction]
#[pyo3(signature = (max_grid = 8, filters = vec![1, 2, 3], trials = 100, seed = 0))]
fn verify_equivalence<'py>(
    py: Python<'py>,
    max_grid: usize,
    filters: Vec<usize>,
    trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    to_json(py, &equivalence_suite(max_grid, &filters, trials, seed).py()?)
}

#[pyfunction]
#[pyo3(signature = (max_grid = 8, filters = vec![1, 2, 3], seed = 0))]
fn verify_rank<'py>(py: Python<'py>, max_grid: usize, filters: Vec<usize>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_json(py, &rank_suite(max_grid, &filters, seed).py()?)
}

/// Low-rank mask factors `A`, `B`; the mask is `unroll(Aᵀ·B)`.
#[pyclass(name = "SubMaskPair", frozen, from_py_object)]
#[derive(Clone)]
struct PySubMaskPair {
    inner: SubMaskPair,
}

#[pymethods]
impl PySubMaskPair {
    #[new]
    fn new(a: Rows, b: Rows) -> PyResult<Self> {
        let inner = SubMaskPair::new(matrix(&a)?, matrix(&b)?).py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn ones(mask_fidelity: usize, seq_len: usize) -> PyResult<Self> {
        Ok(Self {
            inner: SubMaskPair::ones(mask_fidelity, seq_len).py()?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (mask_fidelity, seq_len, seed = 0))]
    fn random(mask_fidelity: usize, seq_len: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: SubMaskPair::random(mask_fidelity, seq_len, seed).py()?,
        })
    }

    /// Fits a pair to the rolled Gaussian target. Returns `(pair, mse_history)`.
    #[staticmethod]
    #[pyo3(signature = (height, width, sigma, mask_fidelity, epochs = 2000, lr = 0.1, seed = 0, early_stop = None))]
    #[allow(clippy::too_many_arguments)]
    fn pretrain(
        height: usize,
        width: usize,
        sigma: f64,
        mask_fidelity: usize,
        epochs: usize,
        lr: f64,
        seed: u64,
        early_stop: Option<f64>,
    ) -> PyResult<(Self, Vec<f64>)> {
        let spec = GaussianTargetSpec {
            geom: grid(height, width)?,
            sigma,
            window: None,
        };
        let cfg = MaskTrainConfig {
            mask_fidelity,
            epochs,
            lr,
            seed,
            early_stop,
        };
        let fit = train_mask_weights(&spec, &cfg).py()?;
        Ok((Self { inner: fit.pair }, fit.history))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SubMaskPair::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn a(&self) -> Rows {
        self.inner.a().to_rows()
    }

    #[getter]
    fn b(&self) -> Rows {
        self.inner.b().to_rows()
    }

    #[getter]
    fn mask_fidelity(&self) -> usize {
        self.inner.mask_fidelity()
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }

    fn compose(&self) -> Rows {
        compose_mask(&self.inner).to_rows()
    }

    fn __repr__(&self) -> String {
        format!(
            "SubMaskPair(mask_fidelity={}, seq_len={})",
            self.inner.mask_fidelity(),
            self.inner.seq_len()
        )
    }
}

/// Masked self-attention over a batch of token matrices.
///
/// `masks` holds one pair per head, or a single pair shared by all heads.
/// Sequences of `height*width + 1` tokens treat row 0 as the class token.
#[pyfunction]
#[pyo3(signature = (x, w_queries, w_keys, w_values, num_heads, masks, height, width))]
#[allow(clippy::too_many_arguments)]
fn lmsa(
    x: Vec<Rows>,
    w_queries: Rows,
    w_keys: Rows,
    w_values: Rows,
    num_heads: usize,
    masks: Vec<PySubMaskPair>,
    height: usize,
    width: usize,
) -> PyResult<Vec<Rows>> {
    let pairs: Vec<SubMaskPair> = masks.into_iter().map(|p| p.inner).collect();
    let masks = match <[SubMaskPair; 1]>::try_from(pairs) {
        Ok([one]) if num_heads != 1 => MaskSet::Shared(one),
        Ok([one]) => MaskSet::PerHead(vec![one]),
        Err(pairs) => MaskSet::PerHead(pairs),
    };
    let params = LmsaParams {
        qkv: QkvWeights {
            w_keys: matrix(&w_keys)?,
            w_queries: matrix(&w_queries)?,
            w_values: matrix(&w_values)?,
            num_heads,
            normalization: Normalization::RowL1,
        },
        masks,
    };
    let x = x.iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    let out = lmsa_forward(&x, &params, grid(height, width)?).py()?;
    Ok(out.output.iter().map(Matrix::to_rows).collect())
}

/// Labeled grayscale images with pixel values in `[0, 1]`.
#[pyclass(name = "Dataset", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: LabeledImageSet,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(images: Vec<Rows>, labels: Vec<usize>, num_classes: usize) -> PyResult<Self> {
        let images = images.iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: LabeledImageSet::new(images, labels, num_classes).py()?,
        })
    }

    /// Four-class procedural shapes.
    #[staticmethod]
    #[pyo3(signature = (n, size = 28, seed = 0))]
    fn synth(n: usize, size: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: synth_shapes(n, size, seed).py()?,
        })
    }

    /// Synthetic shapes split 80/20 into `(train, test)`.
    #[staticmethod]
    #[pyo3(signature = (n, size = 28, seed = 42))]
    fn synth_split(n: usize, size: usize, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = synth_train_test(n, size, seed).py()?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    #[staticmethod]
    fn load_idx(images_path: PathBuf, labels_path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_idx(&images_path, &labels_path).py()?,
        })
    }

    fn save_idx(&self, images_path: PathBuf, labels_path: PathBuf) -> PyResult<()> {
        write_idx(&self.inner, &images_path, &labels_path).py()
    }

    /// Deterministic subset; smaller fractions are nested in larger ones.
    fn subset(&self, fraction: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: subset_fraction(&self.inner, fraction, seed).py()?,
        })
    }

    fn split_at(&self, n: usize) -> (Self, Self) {
        let (a, b) = self.inner.split_at(n.min(self.inner.len()));
        (Self { inner: a }, Self { inner: b })
    }

    fn image(&self, index: usize) -> PyResult<Rows> {
        self.inner
            .images()
            .get(index)
            .map(Matrix::to_rows)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &EpochMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", m.epoch)?;
    d.set_item("train_loss", m.train_loss)?;
    d.set_item("train_acc", m.train_acc)?;
    d.set_item("test_acc", m.test_acc)?;
    d.set_item("lr", m.lr)?;
    d.set_item("steps", m.steps)?;
    Ok(d)
}

/// Vision transformer with learned-mask attention (`variant="ibit"`) or
/// plain attention (`variant="baseline"`).
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// `config` is a JSON object; missing fields take their defaults.
    #[new]
    #[pyo3(signature = (config = None, variant = "ibit"))]
    fn new(config: Option<&str>, variant: &str) -> PyResult<Self> {
        let cfg = match config {
            Some(text) => TrainConfig::from_json(text).py()?,
            None => TrainConfig::default(),
        };
        let variant: Variant = variant.parse().py()?;
        Ok(Self {
            inner: Model::new(&cfg, variant).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ModelCheckpoint::load(&path).py()?.model,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ModelCheckpoint::capture(&self.inner, 0, &[], None).save(&path).py()
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config().to_json()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().to_string()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Trains in place and returns the metrics of each completed epoch.
    #[pyo3(signature = (train_set, test_set = None))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        train_set: &PyDataset,
        test_set: Option<&PyDataset>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let report = train(&mut self.inner, &train_set.inner, test_set.map(|t| &t.inner), |_| Ok(())).py()?;
        report.history.iter().map(|m| metrics_dict(py, m)).collect()
    }

    fn evaluate(&self, set: &PyDataset) -> PyResult<f64> {
        evaluate(&self.inner, &set.inner).py()
    }

    fn predict(&self, images: Vec<Rows>) -> PyResult<Vec<usize>> {
        let images = images.iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
        let refs: Vec<&Matrix> = images.iter().collect();
        self.inner.predict(&refs).py()
    }

    /// Attention rollout of one image over the patch grid; entries sum to 1.
    fn rollout(&self, image: Rows) -> PyResult<Rows> {
        let image = matrix(&image)?;
        let fwd = self.inner.forward(&[&image]).py()?;
        let map = attention_rollout(&fwd.traces, self.inner.geometry(), 0).py()?;
        Ok(map.values.to_rows())
    }

    /// Composed mask of one head, or `None` for the baseline.
    fn mask(&self, layer: usize, head: usize) -> PyResult<Option<Rows>> {
        let Some(pairs) = self.inner.layer_masks(layer).py()? else {
            return Ok(None);
        };
        let pair = pairs
            .get(head)
            .ok_or_else(|| PyValueError::new_err(format!("head {head} out of range")))?;
        Ok(Some(compose_mask(pair).to_rows()))
    }
}

#[pymodule]
fn ibit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySubMaskPair>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(conv_attention_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(apply_attention, m)?)?;
    m.add_function(wrap_pyfunction!(roll, m)?)?;
    m.add_function(wrap_pyfunction!(unroll, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_target, m)?)?;
    m.add_function(wrap_pyfunction!(diagonal_mass, m)?)?;
    m.add_function(wrap_pyfunction!(save_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(verify_equivalence, m)?)?;
    m.add_function(wrap_pyfunction!(verify_rank, m)?)?;
    m.add_function(wrap_pyfunction!(lmsa, m)?)?;
    Ok(())
}
