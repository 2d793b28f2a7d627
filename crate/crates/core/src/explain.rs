//! Attention rollout maps and mask heatmap exports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::convattn::GridGeometry;
use crate::error::{IbitError, Result};
use crate::linalg::Matrix;
use crate::lmsa::AttentionTrace;
use crate::mask::compose_mask;
use crate::model::ModelCheckpoint;

/// CLS-to-patch attribution over the token grid. Nonnegative, sums to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMap {
    pub geom: GridGeometry,
    /// `height x width`.
    pub values: Matrix,
}

impl RolloutMap {
    /// Grid position with the largest value (first in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let s = self.values.as_slice();
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        self.geom.coords(best)
    }
}

/// Head-averaged `|A|`, plus identity, with rows rescaled to sum 1.
fn augmented_layer(heads: &[Matrix]) -> Matrix {
    let n = heads[0].rows();
    let inv = 1.0 / heads.len() as f64;
    let mut m = Matrix::identity(n);
    for h in heads {
        for (d, s) in m.as_mut_slice().iter_mut().zip(h.as_slice()) {
            *d += s.abs() * inv;
        }
    }
    for r in 0..n {
        let row = m.row_mut(r);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    m
}

/// Rollout of per-layer, per-head attention maps (`layers[l][h]`), CLS at position 0.
pub fn rollout_from_maps(layers: &[&[Matrix]], geom: GridGeometry) -> Result<RolloutMap> {
    let seq = geom.seq_len_with_cls();
    if layers.is_empty() {
        return Err(IbitError::InvalidArgument("rollout needs at least one layer".into()));
    }
    for (l, heads) in layers.iter().enumerate() {
        if heads.is_empty() {
            return Err(IbitError::InvalidArgument(format!("layer {l} has no attention heads")));
        }
        if let Some(bad) = heads.iter().find(|h| h.shape() != (seq, seq)) {
            return Err(IbitError::dim("attention rollout", bad.shape(), (seq, seq)));
        }
    }
    let mut joint = augmented_layer(layers[0]);
    for heads in &layers[1..] {
        joint = augmented_layer(heads).matmul(&joint)?;
    }
    let cls = &joint.row(0)[1..];
    let total: f64 = cls.iter().sum();
    let values = Matrix::new(geom.height(), geom.width(), cls.iter().map(|v| v / total).collect())?;
    Ok(RolloutMap { geom, values })
}

/// Rollout for batch item `item` from a model's per-layer traces.
pub fn attention_rollout(traces: &[AttentionTrace], geom: GridGeometry, item: usize) -> Result<RolloutMap> {
    let layers = traces
        .iter()
        .enumerate()
        .map(|(l, t)| {
            t.masked_attention.get(item).map(Vec::as_slice).ok_or_else(|| {
                IbitError::InvalidArgument(format!(
                    "item {item} out of range for layer {l} with batch {}",
                    t.masked_attention.len()
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rollout_from_maps(&layers, geom)
}

/// Share of `|m|` lying within Euclidean grid distance `radius` of the diagonal.
pub fn diagonal_mass_fraction(m: &Matrix, geom: GridGeometry, radius: f64) -> Result<f64> {
    let n = geom.seq_len();
    if m.shape() != (n, n) {
        return Err(IbitError::dim("diagonal mass", m.shape(), (n, n)));
    }
    let (mut near, mut total) = (0.0, 0.0);
    for q in 0..n {
        let (qi, qj) = geom.coords(q);
        for k in 0..n {
            let (ki, kj) = geom.coords(k);
            let v = m.get(q, k).abs();
            total += v;
            if (qi as f64 - ki as f64).hypot(qj as f64 - kj as f64) <= radius {
                near += v;
            }
        }
    }
    if total == 0.0 {
        return Err(IbitError::InvalidArgument("matrix has no mass".into()));
    }
    Ok(near / total)
}

/// Min-max scaled 8-bit pixels, row-major. A constant matrix maps to 128.
pub fn heatmap_pixels(m: &Matrix) -> Result<Vec<u8>> {
    if !m.is_finite() {
        return Err(IbitError::NonFinite("heatmap input".into()));
    }
    let s = m.as_slice();
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    Ok(s.iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect())
}

/// Binary PGM (P5) encoding of [`heatmap_pixels`].
pub fn encode_pgm(m: &Matrix) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    out.extend(heatmap_pixels(m)?);
    Ok(out)
}

/// One line per row, comma separated, shortest round-trip float formatting.
pub fn encode_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

/// Paths written by [`export_heatmap`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

/// Writes `<path>.csv` and `<path>.pgm`.
pub fn export_heatmap(m: &Matrix, path: &Path) -> Result<HeatmapFiles> {
    let pgm_bytes = encode_pgm(m)?;
    let files = HeatmapFiles {
        csv: with_suffix(path, "csv"),
        pgm: with_suffix(path, "pgm"),
    };
    fs::write(&files.csv, encode_csv(m)).map_err(|e| IbitError::io(&files.csv, e))?;
    fs::write(&files.pgm, pgm_bytes).map_err(|e| IbitError::io(&files.pgm, e))?;
    Ok(files)
}

fn with_suffix(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Heatmap of one head's composed mask for every checkpoint, named
/// `<prefix>_l{layer}_h{head}_epoch{NNNN}`.
pub fn export_mask_evolution(
    checkpoints: &[ModelCheckpoint],
    layer: usize,
    head: usize,
    prefix: &Path,
) -> Result<Vec<HeatmapFiles>> {
    let Some(first) = checkpoints.first() else {
        return Ok(Vec::new());
    };
    let config = first.model.config();
    if checkpoints.iter().any(|c| c.model.config() != config) {
        return Err(IbitError::InvalidArgument("checkpoints do not share a configuration".into()));
    }
    if head >= config.heads {
        return Err(IbitError::InvalidArgument(format!(
            "head {head} out of range for {} heads",
            config.heads
        )));
    }
    let mut out = Vec::with_capacity(checkpoints.len());
    for ck in checkpoints {
        let pairs = ck
            .model
            .layer_masks(layer)?
            .ok_or_else(|| IbitError::InvalidArgument("baseline checkpoints have no masks".into()))?;
        let name = format!(
            "{}_l{layer}_h{head}_epoch{:04}",
            prefix.file_name().map(|s| s.to_string_lossy()).unwrap_or_default(),
            ck.epoch
        );
        let path = prefix.with_file_name(name);
        out.push(export_heatmap(&compose_mask(&pairs[head]), &path)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{gaussian_attention_target, GaussianTargetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom(h: usize, w: usize) -> GridGeometry {
        GridGeometry::new(h, w).unwrap()
    }

    #[test]
    fn uniform_attention_gives_uniform_map() {
        let g = geom(2, 3);
        let n = g.seq_len_with_cls();
        let heads = vec![Matrix::filled(n, n, 1.0 / n as f64); 2];
        let map = rollout_from_maps(&[&heads], g).unwrap();
        for &v in map.values.as_slice() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn delta_attention_peaks_at_its_patch() {
        let g = geom(3, 3);
        let n = g.seq_len_with_cls();
        let mut a = Matrix::identity(n);
        a.set(0, 0, 0.0);
        a.set(0, 1 + 5, 1.0);
        let map = rollout_from_maps(&[&[a]], g).unwrap();
        assert_eq!(map.argmax(), g.coords(5));
        assert!((map.values.get(1, 2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_layers_match_explicit_product() {
        let g = geom(2, 2);
        let n = g.seq_len_with_cls();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l1: Vec<Matrix> = (0..3).map(|_| Matrix::random_uniform(n, n, 1.0, &mut rng)).collect();
        let l2: Vec<Matrix> = (0..3).map(|_| Matrix::random_uniform(n, n, 1.0, &mut rng)).collect();
        let map = rollout_from_maps(&[&l1, &l2], g).unwrap();

        // Independent scalar loops.
        let prep = |hs: &[Matrix]| {
            let mut m = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let avg: f64 = hs.iter().map(|h| h.get(i, j).abs()).sum::<f64>() / 3.0;
                    m[i][j] = avg + if i == j { 1.0 } else { 0.0 };
                }
                let s: f64 = m[i].iter().sum();
                for v in &mut m[i] {
                    *v /= s;
                }
            }
            m
        };
        let (a, b) = (prep(&l1), prep(&l2));
        let cls: Vec<f64> = (0..n).map(|j| (0..n).map(|k| b[0][k] * a[k][j]).sum()).collect();
        let s: f64 = cls[1..].iter().sum();
        for p in 0..4 {
            assert!((map.values.as_slice()[p] - cls[p + 1] / s).abs() <= 1e-10);
        }
        assert!((map.values.sum() - 1.0).abs() < 1e-12);
        assert!(map.values.as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn inconsistent_layers_are_rejected() {
        let g = geom(2, 2);
        let ok = vec![Matrix::identity(5)];
        let bad = vec![Matrix::identity(4)];
        assert!(rollout_from_maps(&[&ok, &bad], g).is_err());
        assert!(rollout_from_maps(&[], g).is_err());
        assert!(rollout_from_maps(&[&[]], g).is_err());
    }

    #[test]
    fn pixel_endpoints() {
        assert_eq!(heatmap_pixels(&Matrix::filled(2, 3, 0.7)).unwrap(), vec![128; 6]);
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(heatmap_pixels(&m).unwrap(), vec![0, 255, 255, 0]);
        assert_eq!(encode_pgm(&m).unwrap(), b"P5\n2 2\n255\n\x00\xff\xff\x00".to_vec());
        assert_eq!(encode_csv(&m), "0,1\n1,0\n");
    }

    #[test]
    fn gaussian_target_diagonal_mass() {
        // Exact value from an independent numpy evaluation of the same kernel.
        let g = geom(7, 7);
        let target = gaussian_attention_target(&GaussianTargetSpec {
            geom: g,
            sigma: 1.5,
            window: None,
        })
        .unwrap();
        let frac = diagonal_mass_fraction(&target, g, 3.0).unwrap();
        assert!((frac - 0.918499987021455).abs() < 1e-12, "{frac}");
    }

    #[test]
    fn exports_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_fn(3, 4, |r, c| (r as f64 - c as f64) / 7.0);
        let a = export_heatmap(&m, &dir.path().join("a")).unwrap();
        let b = export_heatmap(&m, &dir.path().join("b")).unwrap();
        assert_eq!(fs::read(&a.csv).unwrap(), fs::read(&b.csv).unwrap());
        assert_eq!(fs::read(&a.pgm).unwrap(), fs::read(&b.pgm).unwrap());
        assert!(a.pgm.to_string_lossy().ends_with("a.pgm"));
    }
}
