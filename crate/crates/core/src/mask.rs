//! Low-rank learnable attention masks.
//!
//! Translation-equivariant attention patterns (convolutions, radial kernels)
//! become low rank once each row `q` is circularly shifted left by `q`. A mask
//! is therefore stored as two `fidelity x seq_len` factors `A`, `B` whose
//! product `Aᵀ·B` lives in that rolled space; [`compose_mask`] unrolls it back
//! to attention space.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convattn::GridGeometry;
use crate::error::{IbitError, Result};
use crate::linalg::tape::{rotate_rows, Rotation};
use crate::linalg::{Matrix, Tape};

/// Learning rate for mask pretraining.
pub const DEFAULT_MASK_LR: f64 = 0.1;
pub const DEFAULT_MASK_EPOCHS: usize = 2000;
pub const DEFAULT_EARLY_STOP_MSE: f64 = 1e-4;
/// Filter side the default masks emulate.
pub const DEFAULT_FILTER_SIZE: usize = 3;

const MASK_MAGIC: &[u8; 4] = b"IBMK";
const MASK_VERSION: u32 = 1;

fn check_square(op: &'static str, m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(IbitError::dim(op, m.shape(), (m.rows(), m.rows())));
    }
    Ok(())
}

/// Row `q` circularly shifted left by `q`: `out[q][c] = m[q][(c + q) mod n]`.
pub fn roll_rows(m: &Matrix) -> Result<Matrix> {
    check_square("roll_rows", m)?;
    Ok(rotate_rows(m, Rotation::Roll))
}

/// Exact inverse of [`roll_rows`].
pub fn unroll_rows(m: &Matrix) -> Result<Matrix> {
    check_square("unroll_rows", m)?;
    Ok(rotate_rows(m, Rotation::Unroll))
}

/// Radial target kernel over a token grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTargetSpec {
    pub geom: GridGeometry,
    /// Standard deviation in grid units.
    pub sigma: f64,
    /// Entries farther than this (Euclidean grid distance) are zeroed.
    pub window: Option<f64>,
}

impl GaussianTargetSpec {
    /// `sigma = f / 2` for a targeted filter size `f`, no truncation.
    pub fn for_filter(geom: GridGeometry, filter_size: usize) -> Self {
        Self {
            geom,
            sigma: filter_size as f64 / 2.0,
            window: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(IbitError::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        if let Some(w) = self.window {
            if !(w >= 0.0) {
                return Err(IbitError::InvalidArgument(format!("window must be non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Gaussian kernel between grid positions before row normalization.
pub fn gaussian_kernel_unnormalized(spec: &GaussianTargetSpec) -> Result<Matrix> {
    spec.validate()?;
    let g = spec.geom;
    let n = g.seq_len();
    let two_var = 2.0 * spec.sigma * spec.sigma;
    Ok(Matrix::from_fn(n, n, |q, r| {
        let (qi, qj) = g.coords(q);
        let (ri, rj) = g.coords(r);
        let di = qi as f64 - ri as f64;
        let dj = qj as f64 - rj as f64;
        let d2 = di * di + dj * dj;
        match spec.window {
            Some(w) if d2.sqrt() > w => 0.0,
            _ => (-d2 / two_var).exp(),
        }
    }))
}

/// Row-normalized Gaussian attention map over the grid.
pub fn gaussian_attention_target(spec: &GaussianTargetSpec) -> Result<Matrix> {
    let mut m = gaussian_kernel_unnormalized(spec)?;
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(m)
}

/// The two learnable factors of an inductive mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubMaskPair {
    a: Matrix,
    b: Matrix,
}

impl SubMaskPair {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.shape() != b.shape() {
            return Err(IbitError::dim("sub-mask pair", a.shape(), b.shape()));
        }
        if a.rows() == 0 || a.rows() > a.cols() {
            return Err(IbitError::InvalidArgument(format!(
                "mask fidelity {} must be in 1..={}",
                a.rows(),
                a.cols()
            )));
        }
        Ok(Self { a, b })
    }

    /// Uniform on `[-s, s]` with `s = seq_len^(-1/2)`.
    pub fn random(mask_fidelity: usize, seq_len: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (1.0 / seq_len as f64).sqrt();
        let a = Matrix::random_uniform(mask_fidelity, seq_len, s, &mut rng);
        let b = Matrix::random_uniform(mask_fidelity, seq_len, s, &mut rng);
        Self::new(a, b)
    }

    /// Pair whose composed mask is all ones.
    pub fn ones(mask_fidelity: usize, seq_len: usize) -> Result<Self> {
        let a = Matrix::from_fn(mask_fidelity, seq_len, |r, _| if r == 0 { 1.0 } else { 0.0 });
        Self::new(a.clone(), a)
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn mask_fidelity(&self) -> usize {
        self.a.rows()
    }

    pub fn seq_len(&self) -> usize {
        self.a.cols()
    }

    pub fn into_parts(self) -> (Matrix, Matrix) {
        (self.a, self.b)
    }

    /// `Aᵀ·B`, the mask in rolled space.
    pub fn rolled_product(&self) -> Matrix {
        self.a.matmul_tn(&self.b).expect("pair shapes validated")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| IbitError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| IbitError::io(path, e))?;
        w.flush().map_err(|e| IbitError::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MASK_MAGIC)?;
        w.write_all(&MASK_VERSION.to_le_bytes())?;
        w.write_all(&(self.mask_fidelity() as u32).to_le_bytes())?;
        w.write_all(&(self.seq_len() as u32).to_le_bytes())?;
        for v in self.a.as_slice().iter().chain(self.b.as_slice()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| IbitError::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| IbitError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = 16;
        if bytes.len() < header {
            return Err(IbitError::Format {
                offset: bytes.len() as u64,
                reason: "truncated mask header".into(),
            });
        }
        if &bytes[0..4] != MASK_MAGIC {
            return Err(IbitError::Format {
                offset: 0,
                reason: "bad mask magic".into(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != MASK_VERSION {
            return Err(IbitError::Format {
                offset: 4,
                reason: format!("unsupported mask version {version}"),
            });
        }
        let fidelity = word(8) as usize;
        let seq_len = word(12) as usize;
        let count = fidelity * seq_len;
        let expected = header + 16 * count;
        if bytes.len() != expected {
            return Err(IbitError::Format {
                offset: bytes.len().min(expected) as u64,
                reason: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        let floats: Vec<f64> = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let a = Matrix::new(fidelity, seq_len, floats[..count].to_vec())?;
        let b = Matrix::new(fidelity, seq_len, floats[count..].to_vec())?;
        Self::new(a, b)
    }
}

/// The inductive mask in attention space: `unroll_rows(Aᵀ·B)`.
pub fn compose_mask(pair: &SubMaskPair) -> Matrix {
    rotate_rows(&pair.rolled_product(), Rotation::Unroll)
}

/// Settings for [`fit_sub_masks`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskTrainConfig {
    pub mask_fidelity: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop once the MSE falls below this value.
    pub early_stop: Option<f64>,
}

impl MaskTrainConfig {
    pub fn new(mask_fidelity: usize) -> Self {
        Self {
            mask_fidelity,
            epochs: DEFAULT_MASK_EPOCHS,
            lr: DEFAULT_MASK_LR,
            seed: 0,
            early_stop: Some(DEFAULT_EARLY_STOP_MSE),
        }
    }
}

/// Outcome of a mask pretraining run.
#[derive(Clone, Debug)]
pub struct MaskTraining {
    pub pair: SubMaskPair,
    /// MSE at each iteration, measured before that iteration's update.
    pub history: Vec<f64>,
    pub initial_mse: f64,
    pub final_mse: f64,
}

/// Full-batch gradient descent on both factors toward `rolled_target`.
///
/// The descended objective is the squared error summed along each row and
/// averaged over rows (`seq_len · MSE`); reported losses are the entry-mean
/// MSE. `rolled_target` must already be in rolled space.
pub fn fit_sub_masks(rolled_target: &Matrix, cfg: &MaskTrainConfig) -> Result<MaskTraining> {
    check_square("fit_sub_masks", rolled_target)?;
    if cfg.epochs == 0 {
        return Err(IbitError::InvalidArgument("epochs must be at least 1".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(IbitError::InvalidArgument(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let seq_len = rolled_target.rows();
    let init = SubMaskPair::random(cfg.mask_fidelity, seq_len, cfg.seed)?;
    let (mut a, mut b) = init.into_parts();
    let mut history = Vec::with_capacity(cfg.epochs);

    for iteration in 0..cfg.epochs {
        let mut tape = Tape::new();
        let va = tape.param(a.clone());
        let vb = tape.param(b.clone());
        let product = tape.matmul_tn(va, vb)?;
        let mse_node = tape.mse(product, rolled_target)?;
        let loss = tape.scale(mse_node, seq_len as f64);
        let mse = tape.value(mse_node).get(0, 0);
        if !mse.is_finite() {
            return Err(IbitError::Training {
                iteration,
                reason: format!("mask MSE became {mse}"),
            });
        }
        history.push(mse);
        if cfg.early_stop.is_some_and(|stop| mse < stop) {
            break;
        }
        let grads = tape.backward(loss)?;
        a.axpy(-cfg.lr, grads.get(va).expect("A gradient"));
        b.axpy(-cfg.lr, grads.get(vb).expect("B gradient"));
    }

    let pair = SubMaskPair::new(a, b)?;
    let final_mse = pair.rolled_product().mse(rolled_target)?;
    if !final_mse.is_finite() {
        return Err(IbitError::Training {
            iteration: history.len(),
            reason: format!("mask MSE became {final_mse}"),
        });
    }
    Ok(MaskTraining {
        initial_mse: history[0],
        final_mse,
        pair,
        history,
    })
}

/// Pretrains a mask pair against the rolled Gaussian target of `spec`.
pub fn train_mask_weights(spec: &GaussianTargetSpec, cfg: &MaskTrainConfig) -> Result<MaskTraining> {
    let target = roll_rows(&gaussian_attention_target(spec)?)?;
    fit_sub_masks(&target, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convattn::{build_circular_conv_attention_matrix, build_conv_attention_matrix, ConvFilter};
    use crate::linalg::numerical_rank;

    fn geom(h: usize, w: usize) -> GridGeometry {
        GridGeometry::new(h, w).unwrap()
    }

    #[test]
    fn roll_hand_example() {
        let m = Matrix::from_fn(3, 3, |r, c| (r * 3 + c) as f64);
        // [[a,b,c],[d,e,f],[g,h,i]] -> [[a,b,c],[e,f,d],[i,g,h]]
        let expected = Matrix::from_rows(&[
            vec![0.0, 1.0, 2.0],
            vec![4.0, 5.0, 3.0],
            vec![8.0, 6.0, 7.0],
        ])
        .unwrap();
        assert_eq!(roll_rows(&m).unwrap(), expected);
        assert_eq!(unroll_rows(&expected).unwrap(), m);
    }

    #[test]
    fn roll_rejects_non_square() {
        assert!(roll_rows(&Matrix::zeros(2, 3)).is_err());
        assert!(unroll_rows(&Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn gaussian_target_properties() {
        let spec = GaussianTargetSpec::for_filter(geom(4, 5), 3);
        let raw = gaussian_kernel_unnormalized(&spec).unwrap();
        assert!(raw.max_abs_diff(&raw.transpose()) == 0.0);
        let t = gaussian_attention_target(&spec).unwrap();
        for r in 0..t.rows() {
            assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let max = t.row(r).iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(t.get(r, r), max);
        }
    }

    #[test]
    fn gaussian_one_by_three() {
        let spec = GaussianTargetSpec {
            geom: geom(1, 3),
            sigma: 1.0,
            window: None,
        };
        let raw = gaussian_kernel_unnormalized(&spec).unwrap();
        let expected = [1.0, (-0.5f64).exp(), (-2.0f64).exp()];
        for (got, want) in raw.row(0).iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn gaussian_window_truncates() {
        let spec = GaussianTargetSpec {
            geom: geom(1, 4),
            sigma: 1.0,
            window: Some(1.0),
        };
        let raw = gaussian_kernel_unnormalized(&spec).unwrap();
        assert_eq!(raw.row(0)[2], 0.0);
        assert!(raw.row(0)[1] > 0.0);
        let bad = GaussianTargetSpec { sigma: 0.0, ..spec };
        assert!(gaussian_attention_target(&bad).is_err());
    }

    #[test]
    fn full_rank_pair_recovers_target() {
        let spec = GaussianTargetSpec::for_filter(geom(3, 3), 3);
        let target = gaussian_attention_target(&spec).unwrap();
        let pair = SubMaskPair::new(Matrix::identity(9), roll_rows(&target).unwrap()).unwrap();
        assert!(compose_mask(&pair).max_abs_diff(&target) < 1e-15);
    }

    #[test]
    fn product_rank_bounded_by_fidelity() {
        for seed in 0..5 {
            let pair = SubMaskPair::random(4, 25, seed).unwrap();
            assert!(numerical_rank(&pair.rolled_product(), 1e-8).unwrap() <= 4);
        }
    }

    #[test]
    fn ones_pair_composes_to_ones() {
        let pair = SubMaskPair::ones(9, 49).unwrap();
        assert_eq!(compose_mask(&pair), Matrix::ones(49, 49));
    }

    #[test]
    fn pair_validation() {
        assert!(SubMaskPair::new(Matrix::zeros(2, 5), Matrix::zeros(3, 5)).is_err());
        assert!(SubMaskPair::new(Matrix::zeros(6, 5), Matrix::zeros(6, 5)).is_err());
        assert!(SubMaskPair::new(Matrix::zeros(0, 5), Matrix::zeros(0, 5)).is_err());
    }

    #[test]
    fn unroll_of_rolled_conv_pattern_recovers_construction() {
        let g = geom(6, 5);
        let f = ConvFilter::new(Matrix::from_fn(3, 3, |r, c| 1.0 + r as f64 - 0.5 * c as f64)).unwrap();
        let m = build_conv_attention_matrix(&f, g).unwrap();
        assert_eq!(unroll_rows(&roll_rows(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn rolled_conv_rank_bounds() {
        let f = ConvFilter::new(Matrix::from_fn(3, 3, |r, c| 0.3 + r as f64 * 0.7 + c as f64 * 0.11)).unwrap();
        let g = geom(7, 7);
        let padded = roll_rows(&build_conv_attention_matrix(&f, g).unwrap()).unwrap();
        assert!(numerical_rank(&padded, 1e-8).unwrap() <= 9);
        let circular = roll_rows(&build_circular_conv_attention_matrix(&f, g).unwrap()).unwrap();
        assert_eq!(numerical_rank(&circular, 1e-8).unwrap(), 1);
    }

    #[test]
    fn fit_rejects_bad_arguments() {
        let t = Matrix::identity(4);
        let mut cfg = MaskTrainConfig::new(2);
        cfg.epochs = 0;
        assert!(fit_sub_masks(&t, &cfg).is_err());
        let mut cfg = MaskTrainConfig::new(2);
        cfg.lr = 0.0;
        assert!(fit_sub_masks(&t, &cfg).is_err());
    }

    #[test]
    fn divergence_reports_iteration() {
        let t = Matrix::filled(4, 4, 1e3);
        let mut cfg = MaskTrainConfig::new(2);
        cfg.lr = 1e6;
        cfg.early_stop = None;
        match fit_sub_masks(&t, &cfg) {
            Err(IbitError::Training { iteration, .. }) => assert!(iteration > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn mask_file_round_trip_and_corruption() {
        let pair = SubMaskPair::random(3, 16, 9).unwrap();
        let mut bytes = Vec::new();
        pair.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"IBMK");
        assert_eq!(bytes.len(), 16 + 2 * 3 * 16 * 8);
        assert_eq!(SubMaskPair::from_bytes(&bytes).unwrap(), pair);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SubMaskPair::from_bytes(&bad), Err(IbitError::Format { offset: 0, .. })));
        assert!(SubMaskPair::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
