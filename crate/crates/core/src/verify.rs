//! Randomized checks of the convolution/attention equivalence and of the
//! rank of rolled convolution attention matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::convattn::{
    attention_apply, build_circular_conv_attention_matrix, build_conv_attention_matrix, conv2d_reference, flatten,
    unflatten, ConvFilter, GridGeometry,
};
use crate::error::{IbitError, Result};
use crate::linalg::{numerical_rank, Matrix, DEFAULT_RANK_TOL};
use crate::mask::roll_rows;

/// Largest error [`equivalence_suite`] accepts.
pub const EQUIVALENCE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceCase {
    pub trial: usize,
    pub height: usize,
    pub width: usize,
    pub filter_size: usize,
    pub max_error: f64,
}

impl EquivalenceCase {
    pub fn passed(&self) -> bool {
        self.max_error <= EQUIVALENCE_TOL
    }
}

/// `trials` random (image, filter) pairs on grids from 2x2 to
/// `max_grid x max_grid`, cycling through `filters`. Each case compares the
/// attention-matrix path against direct convolution.
pub fn equivalence_suite(max_grid: usize, filters: &[usize], trials: usize, seed: u64) -> Result<Vec<EquivalenceCase>> {
    check_suite_args(max_grid, filters)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(trials);
    for trial in 0..trials {
        let f = filters[trial % filters.len()];
        let lo = f.max(2);
        let geom = GridGeometry::new(rng.random_range(lo..=max_grid), rng.random_range(lo..=max_grid))?;
        let filter = ConvFilter::new(Matrix::random_uniform(f, f, 1.0, &mut rng))?;
        let x = Matrix::random_uniform(geom.height(), geom.width(), 1.0, &mut rng);
        let attn = build_conv_attention_matrix(&filter, geom)?;
        let y = unflatten(&attention_apply(&attn, &flatten(&x, geom)?)?, geom)?;
        let reference = conv2d_reference(&x, &filter, geom)?;
        cases.push(EquivalenceCase {
            trial,
            height: geom.height(),
            width: geom.width(),
            filter_size: f,
            max_error: y.max_abs_diff(&reference),
        });
    }
    Ok(cases)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RankCase {
    pub height: usize,
    pub width: usize,
    pub filter_size: usize,
    /// Rank of the rolled zero-padded construction; at most `filter_size²`.
    pub rolled_rank: usize,
    /// Rank of the rolled circular construction; exactly 1.
    pub circular_rank: usize,
}

impl RankCase {
    pub fn passed(&self) -> bool {
        self.rolled_rank <= self.filter_size * self.filter_size && self.circular_rank == 1
    }
}

/// Every grid from 2x2 to `max_grid x max_grid` and every filter in
/// `filters` that fits, with random filter weights.
pub fn rank_suite(max_grid: usize, filters: &[usize], seed: u64) -> Result<Vec<RankCase>> {
    check_suite_args(max_grid, filters)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for height in 2..=max_grid {
        for width in 2..=max_grid {
            for &f in filters {
                if f > height.min(width) {
                    continue;
                }
                let geom = GridGeometry::new(height, width)?;
                // Weights bounded away from zero so no tap vanishes.
                let w = Matrix::from_fn(f, f, |_, _| rng.random_range(0.5..1.5));
                let filter = ConvFilter::new(w)?;
                let rolled = roll_rows(&build_conv_attention_matrix(&filter, geom)?)?;
                let circular = roll_rows(&build_circular_conv_attention_matrix(&filter, geom)?)?;
                cases.push(RankCase {
                    height,
                    width,
                    filter_size: f,
                    rolled_rank: numerical_rank(&rolled, DEFAULT_RANK_TOL)?,
                    circular_rank: numerical_rank(&circular, DEFAULT_RANK_TOL)?,
                });
            }
        }
    }
    Ok(cases)
}

fn check_suite_args(max_grid: usize, filters: &[usize]) -> Result<()> {
    if max_grid < 2 {
        return Err(IbitError::InvalidArgument(format!("max grid {max_grid} is below 2")));
    }
    if filters.is_empty() {
        return Err(IbitError::InvalidArgument("no filter sizes given".into()));
    }
    if let Some(&f) = filters.iter().find(|&&f| f == 0 || f > max_grid) {
        return Err(IbitError::InvalidArgument(format!(
            "filter size {f} does not fit grids up to {max_grid}"
        )));
    }
    Ok(())
}
