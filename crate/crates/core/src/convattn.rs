//! Single-channel convolution expressed as a fixed attention matrix.
//!
//! A filter `W` of side `f` applied to an `h x w` image is the same linear map
//! as multiplying the flattened image by a `seq_len x seq_len` matrix whose row
//! `i*w + j` holds `W[k][l]` at column `(i+k)*w + (j+l)`. Windows are anchored
//! at the top-left of each output cell and out-of-grid taps read zero.

use serde::{Deserialize, Serialize};

use crate::error::{IbitError, Result};
use crate::linalg::Matrix;

/// Token grid dimensions; sequences are the grid flattened row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridGeometry {
    height: usize,
    width: usize,
}

impl GridGeometry {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(IbitError::InvalidArgument(format!(
                "grid must be at least 1x1, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seq_len(&self) -> usize {
        self.height * self.width
    }

    /// Sequence length including a leading CLS token.
    pub fn seq_len_with_cls(&self) -> usize {
        self.seq_len() + 1
    }

    /// Grid coordinates of flat index `q`.
    pub fn coords(&self, q: usize) -> (usize, usize) {
        (q / self.width, q % self.width)
    }
}

/// Square convolution filter.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvFilter {
    weights: Matrix,
}

impl ConvFilter {
    pub fn new(weights: Matrix) -> Result<Self> {
        if weights.rows() == 0 || !weights.is_square() {
            return Err(IbitError::InvalidArgument(format!(
                "filter weights must be a non-empty square matrix, got {:?}",
                weights.shape()
            )));
        }
        Ok(Self { weights })
    }

    pub fn size(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }
}

pub fn flatten_index(i: usize, j: usize, geom: GridGeometry) -> Result<usize> {
    if i >= geom.height || j >= geom.width {
        return Err(IbitError::Index {
            row: i,
            col: j,
            rows: geom.height,
            cols: geom.width,
        });
    }
    Ok(i * geom.width + j)
}

pub fn unflatten_index(q: usize, geom: GridGeometry) -> Result<(usize, usize)> {
    if q >= geom.seq_len() {
        return Err(IbitError::Index {
            row: q / geom.width,
            col: q % geom.width,
            rows: geom.height,
            cols: geom.width,
        });
    }
    Ok(geom.coords(q))
}

/// `h x w` image to a `seq_len x 1` column.
pub fn flatten(x: &Matrix, geom: GridGeometry) -> Result<Matrix> {
    check_image(x, geom)?;
    Ok(Matrix::from_vec(geom.seq_len(), 1, x.as_slice().to_vec()))
}

/// `seq_len x 1` column back to an `h x w` image.
pub fn unflatten(v: &Matrix, geom: GridGeometry) -> Result<Matrix> {
    if v.shape() != (geom.seq_len(), 1) {
        return Err(IbitError::dim("unflatten", v.shape(), (geom.seq_len(), 1)));
    }
    Ok(Matrix::from_vec(geom.height, geom.width, v.as_slice().to_vec()))
}

fn check_image(x: &Matrix, geom: GridGeometry) -> Result<()> {
    if x.shape() != (geom.height, geom.width) {
        return Err(IbitError::dim("image", x.shape(), (geom.height, geom.width)));
    }
    Ok(())
}

/// Direct summation `Y[i][j] = Σ_{k,l<f} X[i+k][j+l] · W[k][l]` with zero padding.
pub fn conv2d_reference(x: &Matrix, filter: &ConvFilter, geom: GridGeometry) -> Result<Matrix> {
    check_image(x, geom)?;
    let f = filter.size();
    let w = filter.weights();
    let mut y = Matrix::zeros(geom.height, geom.width);
    for i in 0..geom.height {
        for j in 0..geom.width {
            let mut acc = 0.0;
            for k in 0..f {
                for l in 0..f {
                    if i + k < geom.height && j + l < geom.width {
                        acc += x.get(i + k, j + l) * w.get(k, l);
                    }
                }
            }
            y.set(i, j, acc);
        }
    }
    Ok(y)
}

fn check_fits(filter: &ConvFilter, geom: GridGeometry) -> Result<()> {
    if filter.size() > geom.height.min(geom.width) {
        return Err(IbitError::InvalidArgument(format!(
            "filter of size {} does not fit a {}x{} grid",
            filter.size(),
            geom.height,
            geom.width
        )));
    }
    Ok(())
}

/// Attention matrix whose product with a flattened image equals
/// [`conv2d_reference`] on that image.
pub fn build_conv_attention_matrix(filter: &ConvFilter, geom: GridGeometry) -> Result<Matrix> {
    check_fits(filter, geom)?;
    let n = geom.seq_len();
    let f = filter.size();
    let mut m = Matrix::zeros(n, n);
    for i in 0..geom.height {
        for j in 0..geom.width {
            let q = i * geom.width + j;
            for k in 0..f {
                for l in 0..f {
                    if i + k < geom.height && j + l < geom.width {
                        m.set(q, (i + k) * geom.width + (j + l), filter.weights().get(k, l));
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Variant of [`build_conv_attention_matrix`] whose column index wraps around
/// the flat sequence: row `q` holds `W[k][l]` at `(q + k*w + l) mod seq_len`.
pub fn build_circular_conv_attention_matrix(filter: &ConvFilter, geom: GridGeometry) -> Result<Matrix> {
    check_fits(filter, geom)?;
    let n = geom.seq_len();
    let f = filter.size();
    let mut m = Matrix::zeros(n, n);
    for q in 0..n {
        for k in 0..f {
            for l in 0..f {
                let c = (q + k * geom.width + l) % n;
                m.set(q, c, m.get(q, c) + filter.weights().get(k, l));
            }
        }
    }
    Ok(m)
}

/// Single-head attention application `attn · x_flat`.
pub fn attention_apply(attn: &Matrix, x_flat: &Matrix) -> Result<Matrix> {
    if !attn.is_square() || attn.cols() != x_flat.rows() || x_flat.cols() == 0 {
        return Err(IbitError::dim("attention_apply", attn.shape(), x_flat.shape()));
    }
    attn.matmul(x_flat)
}
