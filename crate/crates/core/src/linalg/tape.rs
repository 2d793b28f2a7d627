//! Matrix-granular reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and records itself on the [`Tape`]. A call
//! to [`Tape::backward`] walks the record in reverse and returns exact
//! gradients for every node that depends on a registered parameter. A tape is
//! single-threaded; build one per forward pass.

use crate::error::{IbitError, Result};
use crate::linalg::matrix::{gemm, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Direction of a per-row circular shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Rotation {
    /// Row `q` shifted left by `q`.
    Roll,
    /// Row `q` shifted right by `q`.
    Unroll,
}

pub(crate) fn rotate_rows(m: &Matrix, rotation: Rotation) -> Matrix {
    let n = m.cols();
    let mut out = Matrix::zeros(m.rows(), n);
    if n == 0 {
        return out;
    }
    for q in 0..m.rows() {
        let src = m.row(q);
        let dst = out.row_mut(q);
        let shift = q % n;
        match rotation {
            Rotation::Roll => {
                dst[..n - shift].copy_from_slice(&src[shift..]);
                dst[n - shift..].copy_from_slice(&src[..shift]);
            }
            Rotation::Unroll => {
                dst[shift..].copy_from_slice(&src[..n - shift]);
                dst[..shift].copy_from_slice(&src[n - shift..]);
            }
        }
    }
    out
}

/// `n x n` matrix embedded at `(1, 1)` of an `(n+1) x (n+1)` matrix of ones.
pub(crate) fn ones_border(m: &Matrix) -> Matrix {
    let mut out = Matrix::ones(m.rows() + 1, m.cols() + 1);
    out.set_block(1, 1, m);
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddTiled { x: Var, tile: Var },
    MulTiled { x: Var, tile: Var },
    RowScale { x: Var, factors: Vec<f64> },
    Rotate(Var, Rotation),
    OnesBorder(Var),
    RowL1Normalize { x: Var, eps: f64 },
    FrobeniusNormalize { x: Var, eps: f64 },
    LayerNorm { x: Var, eps: f64 },
    Gelu(Var),
    Block { x: Var, r0: usize, c0: usize },
    Assemble { parts: Vec<(Var, usize, usize)> },
    GatherRows { x: Var, rows: Vec<usize> },
    Mse { x: Var, target: Matrix },
    Sum(Var),
    Dot { x: Var, weights: Matrix },
    CrossEntropy { logits: Var, labels: Vec<usize>, target_mass: (f64, f64), probs: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss through any parameter path.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recorded sequence of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a differentiable parameter.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an input that gradients are not tracked for.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, x: Var, value: Matrix, op: Op) -> Var {
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, true, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let inner_a = if ta { ar } else { ac };
        let inner_b = if tb { bc } else { br };
        if inner_a != inner_b {
            return Err(IbitError::dim("matmul", (ar, ac), (br, bc)));
        }
        let value = gemm(self.value(a), ta, self.value(b), tb);
        Ok(self.binary(a, b, value, Op::MatMul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).elementwise_mul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        self.unary(x, value, Op::Scale(x, factor))
    }

    fn check_tile(&self, op: &'static str, x: Var, tile: Var) -> Result<()> {
        let (xr, xc) = self.shape(x);
        let (tr, tc) = self.shape(tile);
        if tc != xc || tr == 0 || xr % tr != 0 {
            return Err(IbitError::dim(op, (xr, xc), (tr, tc)));
        }
        Ok(())
    }

    /// `x + tile` where `tile` is repeated vertically to cover `x`
    /// (a `1 x n` tile is a broadcast row, e.g. a bias).
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        self.check_tile("add_tiled", x, tile)?;
        let t = self.value(tile);
        let mut value = self.value(x).clone();
        let tr = t.rows();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(t.row(r % tr)) {
                *v += b;
            }
        }
        Ok(self.binary(x, tile, value, Op::AddTiled { x, tile }))
    }

    /// `x ⊙ tile` with the same tiling rule as [`Tape::add_tiled`].
    pub fn mul_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        self.check_tile("mul_tiled", x, tile)?;
        let t = self.value(tile);
        let mut value = self.value(x).clone();
        let tr = t.rows();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(t.row(r % tr)) {
                *v *= b;
            }
        }
        Ok(self.binary(x, tile, value, Op::MulTiled { x, tile }))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn row_scale(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if factors.len() != xr {
            return Err(IbitError::dim("row_scale", (xr, xc), (factors.len(), 1)));
        }
        let mut value = self.value(x).clone();
        for (r, f) in factors.iter().enumerate() {
            value.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.unary(x, value, Op::RowScale { x, factors }))
    }

    pub(crate) fn rotate(&mut self, x: Var, rotation: Rotation) -> Result<Var> {
        if !self.value(x).is_square() {
            return Err(IbitError::dim("rotate_rows", self.shape(x), self.shape(x)));
        }
        let value = rotate_rows(self.value(x), rotation);
        Ok(self.unary(x, value, Op::Rotate(x, rotation)))
    }

    /// Row `q` circularly shifted left by `q`.
    pub fn roll_rows(&mut self, x: Var) -> Result<Var> {
        self.rotate(x, Rotation::Roll)
    }

    /// Inverse of [`Tape::roll_rows`].
    pub fn unroll_rows(&mut self, x: Var) -> Result<Var> {
        self.rotate(x, Rotation::Unroll)
    }

    /// Embeds `x` below and right of a row and column of ones.
    pub fn ones_border(&mut self, x: Var) -> Var {
        let value = ones_border(self.value(x));
        self.unary(x, value, Op::OnesBorder(x))
    }

    /// Each row divided by `max(Σ|row|, eps)`; signs are preserved.
    pub fn row_l1_normalize(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let denom = row.iter().map(|v| v.abs()).sum::<f64>().max(eps);
            row.iter_mut().for_each(|v| *v /= denom);
        }
        self.unary(x, value, Op::RowL1Normalize { x, eps })
    }

    /// Whole matrix divided by `max(‖x‖_F, eps)`.
    pub fn frobenius_normalize(&mut self, x: Var, eps: f64) -> Var {
        let denom = self.value(x).frobenius_norm().max(eps);
        let value = self.value(x).scale(1.0 / denom);
        self.unary(x, value, Op::FrobeniusNormalize { x, eps })
    }

    /// Per-row standardization (zero mean, unit variance), no affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        self.unary(x, value, Op::LayerNorm { x, eps })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.unary(x, value, Op::Gelu(x))
    }

    pub fn block(&mut self, x: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if r0 + rows > xr || c0 + cols > xc {
            return Err(IbitError::dim("block", (xr, xc), (r0 + rows, c0 + cols)));
        }
        let value = self.value(x).block(r0, c0, rows, cols);
        Ok(self.unary(x, value, Op::Block { x, r0, c0 }))
    }

    /// Places each part at its `(row, col)` offset in a zero matrix of the given shape.
    pub fn assemble(&mut self, rows: usize, cols: usize, parts: Vec<(Var, usize, usize)>) -> Result<Var> {
        let mut value = Matrix::zeros(rows, cols);
        let mut ng = false;
        for &(p, r0, c0) in &parts {
            let (pr, pc) = self.shape(p);
            if r0 + pr > rows || c0 + pc > cols {
                return Err(IbitError::dim("assemble", (rows, cols), (r0 + pr, c0 + pc)));
            }
            value.set_block(r0, c0, self.value(p));
            ng |= self.needs(p);
        }
        Ok(self.push(value, Op::Assemble { parts }, ng))
    }

    /// Output row `i` is input row `rows[i]`.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (xr, xc) = self.shape(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xr) {
            return Err(IbitError::dim("gather_rows", (xr, xc), (bad, xc)));
        }
        let src = self.value(x);
        let mut value = Matrix::zeros(rows.len(), xc);
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).copy_from_slice(src.row(r));
        }
        Ok(self.unary(x, value, Op::GatherRows { x, rows }))
    }

    /// Mean squared error against a constant target, as a `1 x 1` node.
    pub fn mse(&mut self, x: Var, target: &Matrix) -> Result<Var> {
        let loss = self.value(x).mse(target)?;
        let target = target.clone();
        Ok(self.unary(x, Matrix::filled(1, 1, loss), Op::Mse { x, target }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.unary(x, Matrix::filled(1, 1, s), Op::Sum(x))
    }

    /// `Σ x ⊙ weights` for a constant `weights`; used to inject an upstream gradient.
    pub fn dot(&mut self, x: Var, weights: &Matrix) -> Result<Var> {
        let s = self.value(x).elementwise_mul(weights)?.sum();
        let weights = weights.clone();
        Ok(self.unary(x, Matrix::filled(1, 1, s), Op::Dot { x, weights }))
    }

    /// Mean softmax cross-entropy over rows with label smoothing `smoothing`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let (n, k) = self.shape(logits);
        if labels.len() != n || n == 0 {
            return Err(IbitError::dim("cross_entropy", (n, k), (labels.len(), 1)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(IbitError::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let on = 1.0 - smoothing + smoothing / k as f64;
        let off = smoothing / k as f64;
        let z = self.value(logits);
        let mut probs = Matrix::zeros(n, k);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = z.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let prow = probs.row_mut(r);
            for (c, &v) in row.iter().enumerate() {
                let logp = v - lse;
                prow[c] = logp.exp();
                let q = if c == label { on } else { off };
                loss -= q * logp;
            }
        }
        loss /= n as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            target_mass: (on, off),
            probs,
        };
        Ok(self.unary(logits, Matrix::filled(1, 1, loss), op))
    }

    /// Reverse sweep from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(IbitError::dim("backward", self.shape(loss), (1, 1)));
        }
        self.backward_from(loss, Matrix::ones(1, 1))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `output`
    /// (a vector-Jacobian product).
    pub fn backward_from(&self, output: Var, upstream: Matrix) -> Result<Gradients> {
        if self.shape(output) != upstream.shape() {
            return Err(IbitError::dim("backward_from", self.shape(output), upstream.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(upstream);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.needs(a) {
                    // C = op(A)·op(B); dA = g·op(B)ᵀ (transposed back if A was used transposed)
                    let da = if ta { gemm(bv, tb, g, true) } else { gemm(g, false, bv, !tb) };
                    acc(a, da);
                }
                if self.needs(b) {
                    let db = if tb { gemm(g, true, av, ta) } else { gemm(av, !ta, g, false) };
                    acc(b, db);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    acc(a, g.elementwise_mul(self.value(b)).expect("shape"));
                }
                if self.needs(b) {
                    acc(b, g.elementwise_mul(self.value(a)).expect("shape"));
                }
            }
            &Op::Scale(x, f) => acc(x, g.scale(f)),
            &Op::AddTiled { x, tile } => {
                acc(x, g.clone());
                if self.needs(tile) {
                    acc(tile, fold_tiles(g, self.value(tile).rows(), |gv, _| gv, None));
                }
            }
            &Op::MulTiled { x, tile } => {
                let t = self.value(tile);
                if self.needs(x) {
                    let mut dx = g.clone();
                    let tr = t.rows();
                    for r in 0..dx.rows() {
                        for (v, b) in dx.row_mut(r).iter_mut().zip(t.row(r % tr)) {
                            *v *= b;
                        }
                    }
                    acc(x, dx);
                }
                if self.needs(tile) {
                    let xv = self.value(x);
                    acc(tile, fold_tiles(g, t.rows(), |gv, xv| gv * xv, Some(xv)));
                }
            }
            Op::RowScale { x, factors } => {
                let mut dx = g.clone();
                for (r, f) in factors.iter().enumerate() {
                    dx.row_mut(r).iter_mut().for_each(|v| *v *= f);
                }
                acc(*x, dx);
            }
            &Op::Rotate(x, rotation) => {
                let inverse = match rotation {
                    Rotation::Roll => Rotation::Unroll,
                    Rotation::Unroll => Rotation::Roll,
                };
                acc(x, rotate_rows(g, inverse));
            }
            &Op::OnesBorder(x) => {
                let (r, c) = self.shape(x);
                acc(x, g.block(1, 1, r, c));
            }
            &Op::RowL1Normalize { x, eps } => {
                let xv = self.value(x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let s: f64 = xr.iter().map(|v| v.abs()).sum();
                    let out = dx.row_mut(r);
                    if s > eps {
                        let gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let k = gx / (s * s);
                        for ((o, &gi), &xi) in out.iter_mut().zip(gr).zip(xr) {
                            *o = gi / s - sign(xi) * k;
                        }
                    } else {
                        for (o, &gi) in out.iter_mut().zip(gr) {
                            *o = gi / eps;
                        }
                    }
                }
                acc(x, dx);
            }
            &Op::FrobeniusNormalize { x, eps } => {
                let xv = self.value(x);
                let n = xv.frobenius_norm();
                let dx = if n > eps {
                    let gx: f64 = g.as_slice().iter().zip(xv.as_slice()).map(|(a, b)| a * b).sum();
                    let k = gx / (n * n * n);
                    g.zip_map(xv, |gi, xi| gi / n - xi * k).expect("shape")
                } else {
                    g.scale(1.0 / eps)
                };
                acc(x, dx);
            }
            &Op::LayerNorm { x, eps } => {
                let xv = self.value(x);
                let y = &node.value;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let n = xr.len() as f64;
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gymean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &gi), &yi) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv * (gi - gmean - yi * gymean);
                    }
                }
                acc(x, dx);
            }
            &Op::Gelu(x) => {
                let dx = g.zip_map(self.value(x), |gi, xi| gi * gelu_grad(xi)).expect("shape");
                acc(x, dx);
            }
            &Op::Block { x, r0, c0 } => {
                if !self.nodes[x.0].needs_grad {
                    return;
                }
                // Accumulate in place; a full-size delta per block is quadratic in the batch.
                let slot = grads[x.0].get_or_insert_with(|| {
                    let (r, c) = self.shape(x);
                    Matrix::zeros(r, c)
                });
                for i in 0..g.rows() {
                    let dst = &mut slot.row_mut(r0 + i)[c0..c0 + g.cols()];
                    for (d, s) in dst.iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
            }
            Op::Assemble { parts } => {
                for &(p, r0, c0) in parts {
                    if self.needs(p) {
                        let (pr, pc) = self.shape(p);
                        acc(p, g.block(r0, c0, pr, pc));
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let (r, c) = self.shape(*x);
                let mut dx = Matrix::zeros(r, c);
                for (i, &src) in rows.iter().enumerate() {
                    for (d, s) in dx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
                acc(*x, dx);
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let k = 2.0 * g.get(0, 0) / xv.len().max(1) as f64;
                acc(*x, xv.zip_map(target, |a, b| k * (a - b)).expect("shape"));
            }
            &Op::Sum(x) => {
                let (r, c) = self.shape(x);
                acc(x, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Dot { x, weights } => acc(*x, weights.scale(g.get(0, 0))),
            Op::CrossEntropy {
                logits,
                labels,
                target_mass: (on, off),
                probs,
            } => {
                let n = labels.len() as f64;
                let k = g.get(0, 0) / n;
                let mut dx = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    for (c, v) in dx.row_mut(r).iter_mut().enumerate() {
                        let q = if c == label { *on } else { *off };
                        *v = k * (*v - q);
                    }
                }
                acc(*logits, dx);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sums `f(g, x)` over every vertical tile of `g`, producing a `tile_rows x cols` matrix.
fn fold_tiles(g: &Matrix, tile_rows: usize, f: impl Fn(f64, f64) -> f64, x: Option<&Matrix>) -> Matrix {
    let mut out = Matrix::zeros(tile_rows, g.cols());
    for r in 0..g.rows() {
        let gr = g.row(r);
        let dst = out.row_mut(r % tile_rows);
        match x {
            Some(xv) => {
                for ((d, &gi), &xi) in dst.iter_mut().zip(gr).zip(xv.row(r)) {
                    *d += f(gi, xi);
                }
            }
            None => {
                for (d, &gi) in dst.iter_mut().zip(gr) {
                    *d += f(gi, 0.0);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gradcheck::{finite_diff_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks d(loss)/d(param) from the tape against central differences.
    fn check(param: Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let p = tape.param(param.clone());
        let loss = build(&mut tape, p);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(p).cloned().unwrap_or_else(|| Matrix::zeros(param.rows(), param.cols()));
        let numeric = finite_diff_grad(
            |m| {
                let mut t = Tape::new();
                let p = t.param(m.clone());
                let l = build(&mut t, p);
                Ok(t.value(l).get(0, 0))
            },
            &param,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "relative error {err}\nanalytic {analytic:?}\nnumeric {numeric:?}");
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn matmul_variants_gradients() {
        let mut r = rng();
        for _ in 0..5 {
            let a = Matrix::random_normal(3, 4, 1.0, &mut r);
            let b = Matrix::random_normal(4, 2, 1.0, &mut r);
            let w = Matrix::random_normal(3, 2, 1.0, &mut r);
            let bt = b.transpose();
            let at = a.transpose();
            check(a.clone(), |t, p| {
                let b = t.constant(b.clone());
                let c = t.matmul(p, b).unwrap();
                t.dot(c, &w).unwrap()
            });
            check(b.clone(), |t, p| {
                let a = t.constant(a.clone());
                let c = t.matmul(a, p).unwrap();
                t.dot(c, &w).unwrap()
            });
            check(at.clone(), |t, p| {
                let b = t.constant(b.clone());
                let c = t.matmul_tn(p, b).unwrap();
                t.dot(c, &w).unwrap()
            });
            check(bt.clone(), |t, p| {
                let a = t.constant(a.clone());
                let c = t.matmul_nt(a, p).unwrap();
                t.dot(c, &w).unwrap()
            });
            check(bt.clone(), |t, p| {
                let c = t.matmul_tn(p, p).unwrap();
                t.dot(c, &Matrix::ones(4, 4)).unwrap()
            });
        }
    }

    #[test]
    fn normalization_gradients() {
        let mut r = rng();
        for _ in 0..5 {
            let x = Matrix::random_normal(4, 5, 1.0, &mut r);
            let w = Matrix::random_normal(4, 5, 1.0, &mut r);
            check(x.clone(), |t, p| {
                let y = t.row_l1_normalize(p, 1e-9);
                t.dot(y, &w).unwrap()
            });
            check(x.clone(), |t, p| {
                let y = t.frobenius_normalize(p, 1e-9);
                t.dot(y, &w).unwrap()
            });
            check(x.clone(), |t, p| {
                let y = t.layer_norm(p, 1e-6);
                t.dot(y, &w).unwrap()
            });
            check(x.clone(), |t, p| {
                let y = t.gelu(p);
                t.dot(y, &w).unwrap()
            });
        }
    }

    #[test]
    fn structural_gradients() {
        let mut r = rng();
        let x = Matrix::random_normal(5, 5, 1.0, &mut r);
        let w6 = Matrix::random_normal(6, 6, 1.0, &mut r);
        let w5 = Matrix::random_normal(5, 5, 1.0, &mut r);
        check(x.clone(), |t, p| {
            let y = t.roll_rows(p).unwrap();
            t.dot(y, &w5).unwrap()
        });
        check(x.clone(), |t, p| {
            let y = t.unroll_rows(p).unwrap();
            t.dot(y, &w5).unwrap()
        });
        check(x.clone(), |t, p| {
            let y = t.ones_border(p);
            t.dot(y, &w6).unwrap()
        });
        let w23 = Matrix::random_normal(2, 3, 1.0, &mut r);
        check(x.clone(), |t, p| {
            let y = t.block(p, 1, 2, 2, 3).unwrap();
            t.dot(y, &w23).unwrap()
        });
        let w37 = Matrix::random_normal(3, 5, 1.0, &mut r);
        check(x.clone(), |t, p| {
            let y = t.gather_rows(p, vec![4, 0, 4]).unwrap();
            t.dot(y, &w37).unwrap()
        });
        let big = Matrix::random_normal(10, 5, 1.0, &mut r);
        let row = Matrix::random_normal(1, 5, 1.0, &mut r);
        check(row.clone(), |t, p| {
            let a = t.assemble(11, 5, vec![(p, 0, 0), (p, 10, 0)]).unwrap();
            t.dot(a, &Matrix::random_normal(11, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(3))).unwrap()
        });
        let wb = Matrix::random_normal(10, 5, 1.0, &mut r);
        check(x.clone(), |t, p| {
            let b = t.constant(big.clone());
            let y = t.add_tiled(b, p).unwrap();
            let z = t.mul_tiled(y, p).unwrap();
            t.dot(z, &wb).unwrap()
        });
        check(row.clone(), |t, p| {
            let b = t.constant(big.clone());
            let y = t.mul_tiled(b, p).unwrap();
            let y = t.add_tiled(y, p).unwrap();
            t.dot(y, &wb).unwrap()
        });
        check(x.clone(), |t, p| {
            let y = t.row_scale(p, vec![0.0, 2.0, 1.0, -1.0, 0.5]).unwrap();
            let y = t.scale(y, 3.0);
            let z = t.mul(y, p).unwrap();
            let z = t.sub(z, p).unwrap();
            let z = t.add(z, p).unwrap();
            t.sum(z)
        });
    }

    #[test]
    fn loss_gradients() {
        let mut r = rng();
        let x = Matrix::random_normal(4, 3, 1.0, &mut r);
        let target = Matrix::random_normal(4, 3, 1.0, &mut r);
        check(x.clone(), |t, p| t.mse(p, &target).unwrap());
        check(x.clone(), |t, p| t.cross_entropy(p, &[0, 2, 1, 2], 0.1).unwrap());
        check(x.clone(), |t, p| t.cross_entropy(p, &[1, 1, 0, 2], 0.0).unwrap());
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let l = t.cross_entropy(z, &[1], 0.0).unwrap();
        assert!((t.value(l).get(0, 0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::ones(2, 2));
        let p = t.param(Matrix::ones(2, 2));
        let y = t.mul(c, p).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &Matrix::ones(2, 2));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let p = t.param(Matrix::ones(2, 2));
        assert!(t.backward(p).is_err());
    }

    #[test]
    fn zero_rows_normalize_to_finite() {
        let mut t = Tape::new();
        let p = t.param(Matrix::zeros(2, 3));
        let y = t.row_l1_normalize(p, 1e-9);
        assert!(t.value(y).is_finite());
        let l = t.sum(y);
        assert!(t.backward(l).unwrap().get(p).unwrap().is_finite());
    }
}
