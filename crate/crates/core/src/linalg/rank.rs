use crate::error::{IbitError, Result};
use crate::linalg::matrix::Matrix;

/// Default relative pivot tolerance for [`numerical_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Number of pivots exceeding `tol * largest pivot` under Gaussian elimination
/// with complete pivoting.
pub fn numerical_rank(m: &Matrix, tol: f64) -> Result<usize> {
    if m.is_empty() {
        return Err(IbitError::InvalidArgument("rank of an empty matrix".into()));
    }
    if !(tol > 0.0) {
        return Err(IbitError::InvalidArgument(format!("rank tolerance must be positive, got {tol}")));
    }
    let (rows, cols) = m.shape();
    let mut a = m.as_slice().to_vec();
    let mut rank = 0;
    let mut threshold = None;

    for k in 0..rows.min(cols) {
        let (mut pr, mut pc, mut best) = (k, k, 0.0f64);
        for r in k..rows {
            for c in k..cols {
                let v = a[r * cols + c].abs();
                if v > best {
                    best = v;
                    pr = r;
                    pc = c;
                }
            }
        }
        let limit = *threshold.get_or_insert(best * tol);
        if best == 0.0 || best <= limit {
            break;
        }
        rank += 1;
        if pr != k {
            for c in 0..cols {
                a.swap(pr * cols + c, k * cols + c);
            }
        }
        if pc != k {
            for r in 0..rows {
                a.swap(r * cols + pc, r * cols + k);
            }
        }
        let pivot = a[k * cols + k];
        for r in k + 1..rows {
            let factor = a[r * cols + k] / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in k..cols {
                a[r * cols + c] -= factor * a[k * cols + c];
            }
        }
    }
    Ok(rank)
}
