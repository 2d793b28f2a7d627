//! Learned-mask self-attention.
//!
//! Per head, the raw score map `Q·Kᵀ` is multiplied element-wise by a
//! content-independent inductive mask `unroll_rows(Aᵀ·B)`, each row is divided
//! by its L1 norm, and the result weights the values. No softmax and no
//! `1/sqrt(d)` factor are applied. When a CLS token sits at position 0 the mask
//! gains an all-ones first row and column so CLS is never masked.

use serde::{Deserialize, Serialize};

use crate::convattn::GridGeometry;
use crate::error::{IbitError, Result};
use crate::linalg::{Matrix, Tape, Var};
use crate::mask::{compose_mask, SubMaskPair};

/// Floor on the normalization denominator.
pub const NORM_EPS: f64 = 1e-9;

/// How the masked score map is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Each row divided by `max(Σ|row|, NORM_EPS)`.
    #[default]
    RowL1,
    /// Each head's map divided by `max(‖map‖_F, NORM_EPS)`.
    Frobenius,
}

/// Key, query and value projections shared by masked and plain attention.
#[derive(Clone, Debug, PartialEq)]
pub struct QkvWeights {
    pub w_keys: Matrix,
    pub w_queries: Matrix,
    pub w_values: Matrix,
    pub num_heads: usize,
    pub normalization: Normalization,
}

impl QkvWeights {
    pub fn d_model(&self) -> usize {
        self.w_keys.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_keys.rows();
        for w in [&self.w_keys, &self.w_queries, &self.w_values] {
            if w.shape() != (d, d) {
                return Err(IbitError::dim("qkv projection", w.shape(), (d, d)));
            }
        }
        if self.num_heads == 0 || d % self.num_heads != 0 {
            return Err(IbitError::Config(format!(
                "d_model {d} is not divisible by {} heads",
                self.num_heads
            )));
        }
        Ok(())
    }
}

/// Inductive masks of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSet {
    PerHead(Vec<SubMaskPair>),
    Shared(SubMaskPair),
}

impl MaskSet {
    pub fn pairs(&self) -> &[SubMaskPair] {
        match self {
            MaskSet::PerHead(p) => p,
            MaskSet::Shared(p) => std::slice::from_ref(p),
        }
    }

    /// Index into [`MaskSet::pairs`] used by `head`.
    pub fn pair_index(&self, head: usize) -> usize {
        match self {
            MaskSet::PerHead(_) => head,
            MaskSet::Shared(_) => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmsaParams {
    pub qkv: QkvWeights,
    pub masks: MaskSet,
}

impl LmsaParams {
    pub fn validate(&self, geom: GridGeometry) -> Result<()> {
        self.qkv.validate()?;
        if let MaskSet::PerHead(p) = &self.masks {
            if p.len() != self.qkv.num_heads {
                return Err(IbitError::Config(format!(
                    "{} masks for {} heads",
                    p.len(),
                    self.qkv.num_heads
                )));
            }
        }
        for pair in self.masks.pairs() {
            if pair.seq_len() != geom.seq_len() {
                return Err(IbitError::Config(format!(
                    "mask covers {} tokens but the grid has {}",
                    pair.seq_len(),
                    geom.seq_len()
                )));
            }
        }
        Ok(())
    }
}

/// Intermediate maps of one forward pass, indexed `[batch][head]`.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    /// `Q·Kᵀ` per head.
    pub raw_attention: Vec<Vec<Matrix>>,
    /// Raw map times mask, before normalization.
    pub masked_pre_norm: Vec<Vec<Matrix>>,
    /// Normalized masked map actually applied to the values.
    pub masked_attention: Vec<Vec<Matrix>>,
    /// Per-head mask over the `seq_len` grid tokens (no CLS border). Empty for
    /// unmasked attention.
    pub inductive_mask: Vec<Matrix>,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Debug)]
pub(crate) struct LayerVars {
    pub w_keys: Var,
    pub w_queries: Var,
    pub w_values: Var,
    /// `(A, B)` handles, one per entry of [`MaskSet::pairs`]; `None` for plain attention.
    pub masks: Option<Vec<(Var, Var)>>,
    pub shared_mask: bool,
}

/// Tape handles produced by [`attention_graph`]; per-head vectors are indexed `b * heads + h`.
pub(crate) struct AttentionNodes {
    pub output: Var,
    pub raw: Vec<Var>,
    pub pre_norm: Vec<Var>,
    pub normalized: Vec<Var>,
    /// Per-head unbordered mask.
    pub inductive: Vec<Var>,
    pub heads: usize,
}

impl AttentionNodes {
    pub fn trace(&self, tape: &Tape, batch: usize) -> AttentionTrace {
        let collect = |vars: &[Var]| -> Vec<Vec<Matrix>> {
            (0..batch)
                .map(|b| (0..self.heads).map(|h| tape.value(vars[b * self.heads + h]).clone()).collect())
                .collect()
        };
        AttentionTrace {
            raw_attention: collect(&self.raw),
            masked_pre_norm: collect(&self.pre_norm),
            masked_attention: collect(&self.normalized),
            inductive_mask: self.inductive.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }
}

/// Tokens per sample for a stacked `(batch * seq') x d` input.
fn tokens_per_sample(rows: usize, batch: usize, geom: GridGeometry) -> Result<(usize, bool)> {
    let plain = geom.seq_len();
    if batch == 0 {
        return Err(IbitError::InvalidArgument("empty batch".into()));
    }
    if rows == batch * plain {
        Ok((plain, false))
    } else if rows == batch * (plain + 1) {
        Ok((plain + 1, true))
    } else {
        Err(IbitError::dim("attention tokens", (rows, 0), (batch * plain, batch * (plain + 1))))
    }
}

/// Records multi-head (masked) attention over a stacked batch on `tape`.
pub(crate) fn attention_graph(
    tape: &mut Tape,
    x: Var,
    batch: usize,
    vars: &LayerVars,
    num_heads: usize,
    normalization: Normalization,
    geom: GridGeometry,
) -> Result<AttentionNodes> {
    let (rows, d) = tape.shape(x);
    let (seq, has_cls) = tokens_per_sample(rows, batch, geom)?;
    if tape.shape(vars.w_keys) != (d, d) {
        return Err(IbitError::dim("attention input", (rows, d), tape.shape(vars.w_keys)));
    }
    let dh = d / num_heads;

    let keys = tape.matmul(x, vars.w_keys)?;
    let queries = tape.matmul(x, vars.w_queries)?;
    let values = tape.matmul(x, vars.w_values)?;

    let mut inductive = Vec::new();
    let mut applied = Vec::new();
    if let Some(pairs) = &vars.masks {
        for &(a, b) in pairs {
            let rolled = tape.matmul_tn(a, b)?;
            let mask = tape.unroll_rows(rolled)?;
            inductive.push(mask);
            applied.push(if has_cls { tape.ones_border(mask) } else { mask });
        }
        if vars.shared_mask {
            inductive = vec![inductive[0]; num_heads];
        }
    }

    let mut raw = Vec::with_capacity(batch * num_heads);
    let mut pre_norm = Vec::with_capacity(batch * num_heads);
    let mut normalized = Vec::with_capacity(batch * num_heads);
    let mut parts = Vec::with_capacity(batch * num_heads);
    for b in 0..batch {
        let r0 = b * seq;
        for h in 0..num_heads {
            let c0 = h * dh;
            let q = tape.block(queries, r0, c0, seq, dh)?;
            let k = tape.block(keys, r0, c0, seq, dh)?;
            let v = tape.block(values, r0, c0, seq, dh)?;
            let scores = tape.matmul_nt(q, k)?;
            let masked = if applied.is_empty() {
                scores
            } else {
                let idx = if vars.shared_mask { 0 } else { h };
                tape.mul(scores, applied[idx])?
            };
            let norm = match normalization {
                Normalization::RowL1 => tape.row_l1_normalize(masked, NORM_EPS),
                Normalization::Frobenius => tape.frobenius_normalize(masked, NORM_EPS),
            };
            let out = tape.matmul(norm, v)?;
            raw.push(scores);
            pre_norm.push(masked);
            normalized.push(norm);
            parts.push((out, r0, c0));
        }
    }
    let output = tape.assemble(rows, d, parts)?;
    Ok(AttentionNodes {
        output,
        raw,
        pre_norm,
        normalized,
        inductive,
        heads: num_heads,
    })
}

fn stack(x: &[Matrix]) -> Result<Matrix> {
    let first = x.first().ok_or_else(|| IbitError::InvalidArgument("empty batch".into()))?;
    let (s, d) = first.shape();
    let mut out = Matrix::zeros(s * x.len(), d);
    for (b, m) in x.iter().enumerate() {
        if m.shape() != (s, d) {
            return Err(IbitError::dim("batch", m.shape(), (s, d)));
        }
        out.set_block(b * s, 0, m);
    }
    Ok(out)
}

fn unstack(m: &Matrix, batch: usize) -> Vec<Matrix> {
    let s = m.rows() / batch;
    (0..batch).map(|b| m.block(b * s, 0, s, m.cols())).collect()
}

struct RecordedGraph {
    tape: Tape,
    input: Var,
    vars: LayerVars,
    nodes: AttentionNodes,
}

/// Result of [`lmsa_forward`] or [`baseline_attention_forward`].
pub struct AttentionForward {
    pub output: Vec<Matrix>,
    pub trace: AttentionTrace,
    batch: usize,
    graph: Option<RecordedGraph>,
}

impl AttentionForward {
    /// Frees the recorded graph; [`lmsa_backward`] is no longer possible.
    pub fn release_graph(&mut self) {
        self.graph = None;
    }

    pub fn has_graph(&self) -> bool {
        self.graph.is_some()
    }
}

/// Exact gradients of `Σ upstream ⊙ output` with respect to every input.
#[derive(Clone, Debug)]
pub struct LmsaGradients {
    pub w_keys: Matrix,
    pub w_queries: Matrix,
    pub w_values: Matrix,
    /// `(dA, dB)` per entry of [`MaskSet::pairs`]; empty for plain attention.
    pub masks: Vec<(Matrix, Matrix)>,
    pub input: Vec<Matrix>,
    /// Gradient reaching `Q·Kᵀ`, `[batch][head]`.
    pub raw_attention: Vec<Vec<Matrix>>,
    /// Gradient reaching the masked map before normalization, `[batch][head]`.
    pub masked_pre_norm: Vec<Vec<Matrix>>,
}

fn run_forward(x: &[Matrix], qkv: &QkvWeights, masks: Option<&MaskSet>, geom: GridGeometry) -> Result<AttentionForward> {
    qkv.validate()?;
    let batch = x.len();
    let stacked = stack(x)?;
    let mut tape = Tape::new();
    let input = tape.param(stacked);
    let w_keys = tape.param(qkv.w_keys.clone());
    let w_queries = tape.param(qkv.w_queries.clone());
    let w_values = tape.param(qkv.w_values.clone());
    let mask_vars = masks.map(|set| {
        set.pairs()
            .iter()
            .map(|p| (tape.param(p.a().clone()), tape.param(p.b().clone())))
            .collect::<Vec<_>>()
    });
    let vars = LayerVars {
        w_keys,
        w_queries,
        w_values,
        masks: mask_vars,
        shared_mask: matches!(masks, Some(MaskSet::Shared(_))),
    };
    let nodes = attention_graph(&mut tape, input, batch, &vars, qkv.num_heads, qkv.normalization, geom)?;
    let output = unstack(tape.value(nodes.output), batch);
    let trace = nodes.trace(&tape, batch);
    Ok(AttentionForward {
        output,
        trace,
        batch,
        graph: Some(RecordedGraph {
            tape,
            input,
            vars,
            nodes,
        }),
    })
}

/// Learned-mask self-attention over a batch of `seq' x d_model` token matrices.
///
/// `seq'` is either `geom.seq_len()` or `geom.seq_len() + 1` with a CLS token at 0.
pub fn lmsa_forward(x: &[Matrix], params: &LmsaParams, geom: GridGeometry) -> Result<AttentionForward> {
    params.validate(geom)?;
    run_forward(x, &params.qkv, Some(&params.masks), geom)
}

/// The same pipeline with the mask fixed to all ones.
pub fn baseline_attention_forward(x: &[Matrix], qkv: &QkvWeights, geom: GridGeometry) -> Result<AttentionForward> {
    run_forward(x, qkv, None, geom)
}

/// Backpropagates `upstream` (one matrix per batch item, shaped like the output).
pub fn lmsa_backward(forward: &AttentionForward, upstream: &[Matrix]) -> Result<LmsaGradients> {
    let graph = forward
        .graph
        .as_ref()
        .ok_or_else(|| IbitError::State("forward graph was released; rerun the forward pass".into()))?;
    if upstream.len() != forward.batch {
        return Err(IbitError::dim("upstream batch", (upstream.len(), 0), (forward.batch, 0)));
    }
    let seed = stack(upstream)?;
    let tape = &graph.tape;
    let grads = tape.backward_from(graph.nodes.output, seed)?;
    let grad_of = |v: Var| {
        grads.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.shape(v);
            Matrix::zeros(r, c)
        })
    };
    let heads = graph.nodes.heads;
    let per_head = |vars: &[Var]| -> Vec<Vec<Matrix>> {
        (0..forward.batch)
            .map(|b| (0..heads).map(|h| grad_of(vars[b * heads + h])).collect())
            .collect()
    };
    Ok(LmsaGradients {
        w_keys: grad_of(graph.vars.w_keys),
        w_queries: grad_of(graph.vars.w_queries),
        w_values: grad_of(graph.vars.w_values),
        masks: graph
            .vars
            .masks
            .iter()
            .flatten()
            .map(|&(a, b)| (grad_of(a), grad_of(b)))
            .collect(),
        input: unstack(&grad_of(graph.input), forward.batch),
        raw_attention: per_head(&graph.nodes.raw),
        masked_pre_norm: per_head(&graph.nodes.pre_norm),
    })
}

/// Composed mask of every head, without the CLS border.
pub fn head_masks(params: &LmsaParams) -> Vec<Matrix> {
    (0..params.qkv.num_heads)
        .map(|h| compose_mask(&params.masks.pairs()[params.masks.pair_index(h)]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn golden_params() -> LmsaParams {
        LmsaParams {
            qkv: QkvWeights {
                w_keys: m(&[&[1.0, 0.0], &[1.0, 1.0]]),
                w_queries: m(&[&[1.0, 1.0], &[0.0, 1.0]]),
                w_values: m(&[&[2.0, 0.0], &[0.0, 1.0]]),
                num_heads: 1,
                normalization: Normalization::RowL1,
            },
            // Aᵀ·B = [[2,1],[4,2]], unrolled to [[2,1],[2,4]].
            masks: MaskSet::Shared(SubMaskPair::new(m(&[&[1.0, 2.0]]), m(&[&[2.0, 1.0]])).unwrap()),
        }
    }

    #[test]
    fn golden_two_token_case() {
        // K = [[3,2],[1,1]], Q = [[1,3],[0,1]], V = [[2,2],[0,1]]
        // Q·Kᵀ = [[9,4],[2,1]]; masked [[18,4],[4,4]]; rows / 22 and / 8.
        let g = GridGeometry::new(1, 2).unwrap();
        let x = vec![m(&[&[1.0, 2.0], &[0.0, 1.0]])];
        let p = golden_params();
        let fwd = lmsa_forward(&x, &p, g).unwrap();
        let expected = m(&[&[18.0 / 11.0, 20.0 / 11.0], &[1.0, 1.5]]);
        assert!(fwd.output[0].max_abs_diff(&expected) < 1e-14, "{:?}", fwd.output[0]);
        assert_eq!(fwd.trace.raw_attention[0][0], m(&[&[9.0, 4.0], &[2.0, 1.0]]));
        assert_eq!(fwd.trace.inductive_mask[0], m(&[&[2.0, 1.0], &[2.0, 4.0]]));

        let base = baseline_attention_forward(&x, &p.qkv, g).unwrap();
        let expected = m(&[&[18.0 / 13.0, 22.0 / 13.0], &[4.0 / 3.0, 5.0 / 3.0]]);
        assert!(base.output[0].max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let g = GridGeometry::new(1, 2).unwrap();
        let p = golden_params();
        let x = vec![Matrix::zeros(4, 2)];
        assert!(matches!(lmsa_forward(&x, &p, g), Err(IbitError::Dimension { .. })));
        let x = vec![Matrix::zeros(2, 3)];
        assert!(lmsa_forward(&x, &p, g).is_err());
        let mut bad = p.clone();
        bad.qkv.num_heads = 3;
        assert!(matches!(lmsa_forward(&[Matrix::zeros(2, 2)], &bad, g), Err(IbitError::Config(_))));
        let wrong_grid = GridGeometry::new(1, 3).unwrap();
        assert!(lmsa_forward(&[Matrix::zeros(3, 2)], &p, wrong_grid).is_err());
    }

    #[test]
    fn released_graph_is_a_state_error() {
        let g = GridGeometry::new(1, 2).unwrap();
        let mut fwd = lmsa_forward(&[Matrix::ones(2, 2)], &golden_params(), g).unwrap();
        fwd.release_graph();
        assert!(matches!(lmsa_backward(&fwd, &[Matrix::ones(2, 2)]), Err(IbitError::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let g = GridGeometry::new(1, 2).unwrap();
        let fwd = lmsa_forward(&[m(&[&[1.0, 2.0], &[0.0, 1.0]])], &golden_params(), g).unwrap();
        let grads = lmsa_backward(&fwd, &[Matrix::zeros(2, 2)]).unwrap();
        for gm in [&grads.w_keys, &grads.w_queries, &grads.w_values, &grads.input[0], &grads.masks[0].0] {
            assert_eq!(gm.max_abs(), 0.0);
        }
    }

    #[test]
    fn zero_input_stays_finite() {
        let g = GridGeometry::new(1, 2).unwrap();
        let fwd = lmsa_forward(&[Matrix::zeros(3, 2)], &golden_params(), g).unwrap();
        assert!(fwd.output[0].is_finite());
        assert_eq!(fwd.output[0].shape(), (3, 2));
    }

    fn random_params(d: usize, heads: usize, seq_len: usize, fidelity: usize, seed: u64) -> LmsaParams {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d as f64).sqrt();
        LmsaParams {
            qkv: QkvWeights {
                w_keys: Matrix::random_uniform(d, d, s, &mut rng),
                w_queries: Matrix::random_uniform(d, d, s, &mut rng),
                w_values: Matrix::random_uniform(d, d, s, &mut rng),
                num_heads: heads,
                normalization: Normalization::RowL1,
            },
            masks: MaskSet::PerHead(
                (0..heads)
                    .map(|h| SubMaskPair::random(fidelity, seq_len, seed + 1 + h as u64).unwrap())
                    .collect(),
            ),
        }
    }

    fn random_tokens(batch: usize, seq: usize, d: usize, seed: u64) -> Vec<Matrix> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..batch).map(|_| Matrix::random_normal(seq, d, 1.0, &mut rng)).collect()
    }

    #[test]
    fn ones_mask_matches_plain_attention() {
        let g = GridGeometry::new(3, 3).unwrap();
        for (seq, cls) in [(9, false), (10, true)] {
            let mut p = random_params(6, 2, 9, 4, 7);
            p.masks = MaskSet::PerHead(vec![SubMaskPair::ones(4, 9).unwrap(); 2]);
            let x = random_tokens(2, seq, 6, 11);
            let masked = lmsa_forward(&x, &p, g).unwrap();
            let plain = baseline_attention_forward(&x, &p.qkv, g).unwrap();
            for b in 0..2 {
                let diff = masked.output[b].max_abs_diff(&plain.output[b]);
                assert!(diff <= 1e-10, "cls={cls} diff={diff}");
            }
        }
    }

    #[test]
    fn positive_query_scale_is_invisible() {
        let g = GridGeometry::new(3, 3).unwrap();
        let p = random_params(6, 3, 9, 3, 3);
        let x = random_tokens(2, 10, 6, 5);
        let reference = lmsa_forward(&x, &p, g).unwrap();
        for c in [0.1, 10.0] {
            let mut scaled = p.clone();
            scaled.qkv.w_queries = p.qkv.w_queries.scale(c);
            let out = lmsa_forward(&x, &scaled, g).unwrap();
            for b in 0..2 {
                assert!(out.output[b].max_abs_diff(&reference.output[b]) <= 1e-10);
            }
        }
    }

    #[test]
    fn plain_attention_is_permutation_equivariant() {
        let g = GridGeometry::new(2, 3).unwrap();
        let p = random_params(4, 2, 6, 2, 9);
        let x = random_tokens(1, 6, 4, 1);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted = Matrix::from_fn(6, 4, |r, c| x[0].get(perm[r], c));
        let a = baseline_attention_forward(&x, &p.qkv, g).unwrap();
        let b = baseline_attention_forward(&[permuted], &p.qkv, g).unwrap();
        let a_perm = Matrix::from_fn(6, 4, |r, c| a.output[0].get(perm[r], c));
        assert!(a_perm.max_abs_diff(&b.output[0]) <= 1e-12);
    }

    #[test]
    fn frobenius_normalization_is_scale_free() {
        let g = GridGeometry::new(2, 2).unwrap();
        let mut p = random_params(4, 1, 4, 2, 21);
        p.qkv.normalization = Normalization::Frobenius;
        let fwd = lmsa_forward(&random_tokens(1, 5, 4, 2), &p, g).unwrap();
        let map = &fwd.trace.masked_attention[0][0];
        assert!((map.frobenius_norm() - 1.0).abs() < 1e-12);
    }

    fn objective(out: &[Matrix], upstream: &[Matrix]) -> f64 {
        out.iter()
            .zip(upstream)
            .map(|(o, u)| o.elementwise_mul(u).unwrap().sum())
            .sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::linalg::gradcheck::{finite_diff_grad, max_relative_error};
        // 2x2 grid plus CLS: 5 tokens, d = 4, 2 heads.
        let g = GridGeometry::new(2, 2).unwrap();
        let p = random_params(4, 2, 4, 3, 13);
        let x = random_tokens(2, 5, 4, 17);
        let up = random_tokens(2, 5, 4, 19);
        let fwd = lmsa_forward(&x, &p, g).unwrap();
        let grads = lmsa_backward(&fwd, &up).unwrap();
        let eps = 1e-5;

        let fd = finite_diff_grad(
            |w| {
                let mut q = p.clone();
                q.qkv.w_queries = w.clone();
                Ok(objective(&lmsa_forward(&x, &q, g)?.output, &up))
            },
            &p.qkv.w_queries,
            eps,
        )
        .unwrap();
        assert!(max_relative_error(&fd, &grads.w_queries) <= 1e-4);

        let fd = finite_diff_grad(
            |w| {
                let mut q = p.clone();
                q.qkv.w_keys = w.clone();
                Ok(objective(&lmsa_forward(&x, &q, g)?.output, &up))
            },
            &p.qkv.w_keys,
            eps,
        )
        .unwrap();
        assert!(max_relative_error(&fd, &grads.w_keys) <= 1e-4);

        let fd = finite_diff_grad(
            |w| {
                let mut q = p.clone();
                q.qkv.w_values = w.clone();
                Ok(objective(&lmsa_forward(&x, &q, g)?.output, &up))
            },
            &p.qkv.w_values,
            eps,
        )
        .unwrap();
        assert!(max_relative_error(&fd, &grads.w_values) <= 1e-4);

        for head in 0..2 {
            let pair = &p.masks.pairs()[head];
            let with_a = |a: &Matrix| {
                let mut q = p.clone();
                if let MaskSet::PerHead(v) = &mut q.masks {
                    v[head] = SubMaskPair::new(a.clone(), pair.b().clone()).unwrap();
                }
                q
            };
            let fd = finite_diff_grad(
                |a| Ok(objective(&lmsa_forward(&x, &with_a(a), g)?.output, &up)),
                pair.a(),
                eps,
            )
            .unwrap();
            assert!(max_relative_error(&fd, &grads.masks[head].0) <= 1e-4);
        }

        let fd = finite_diff_grad(
            |x0| Ok(objective(&lmsa_forward(&[x0.clone(), x[1].clone()], &p, g)?.output, &up)),
            &x[0],
            eps,
        )
        .unwrap();
        assert!(max_relative_error(&fd, &grads.input[0]) <= 1e-4);
    }

    #[test]
    fn raw_gradient_is_mask_times_masked_gradient() {
        let g = GridGeometry::new(2, 3).unwrap();
        let p = random_params(6, 3, 6, 4, 31);
        let x = random_tokens(2, 7, 6, 37);
        let up = random_tokens(2, 7, 6, 41);
        let fwd = lmsa_forward(&x, &p, g).unwrap();
        let grads = lmsa_backward(&fwd, &up).unwrap();
        for b in 0..2 {
            for (h, mask) in head_masks(&p).iter().enumerate() {
                let bordered = crate::linalg::tape::ones_border(mask);
                let expected = grads.masked_pre_norm[b][h].elementwise_mul(&bordered).unwrap();
                assert!(expected.max_abs_diff(&grads.raw_attention[b][h]) <= 1e-12);
            }
        }

        // Independent check of the pre-normalization gradient for one head.
        use crate::linalg::gradcheck::{finite_diff_grad, max_relative_error};
        let (b, h, dh) = (1, 2, 2);
        let values = x[b].matmul(&p.qkv.w_values).unwrap().block(0, h * dh, 7, dh);
        let up_block = up[b].block(0, h * dh, 7, dh);
        let pre = &fwd.trace.masked_pre_norm[b][h];
        let fd = finite_diff_grad(
            |m| {
                let norm = Matrix::from_fn(7, 7, |r, c| {
                    let s: f64 = m.row(r).iter().map(|v| v.abs()).sum();
                    m.get(r, c) / s.max(NORM_EPS)
                });
                Ok(norm.matmul(&values)?.elementwise_mul(&up_block)?.sum())
            },
            pre,
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(&fd, &grads.masked_pre_norm[b][h]) <= 1e-6);
        let bordered = crate::linalg::tape::ones_border(&head_masks(&p)[h]);
        let biased = fd.elementwise_mul(&bordered).unwrap();
        assert!(max_relative_error(&biased, &grads.raw_attention[b][h]) <= 1e-6);
    }

    #[test]
    fn shared_mask_accumulates_over_heads() {
        let g = GridGeometry::new(2, 2).unwrap();
        let mut p = random_params(4, 2, 4, 2, 5);
        p.masks = MaskSet::Shared(p.masks.pairs()[0].clone());
        let x = random_tokens(1, 4, 4, 6);
        let up = random_tokens(1, 4, 4, 8);
        let grads = lmsa_backward(&lmsa_forward(&x, &p, g).unwrap(), &up).unwrap();
        assert_eq!(grads.masks.len(), 1);
        assert_eq!(head_masks(&p)[0], head_masks(&p)[1]);
    }
}
