use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{MaskInit, MaskMode, TrainConfig, Variant};
use crate::convattn::GridGeometry;
use crate::error::{IbitError, Result};
use crate::linalg::{Gradients, Matrix, Tape, Var};
use crate::lmsa::{attention_graph, AttentionNodes, AttentionTrace, LayerVars};
use crate::mask::{train_mask_weights, GaussianTargetSpec, MaskTrainConfig, SubMaskPair};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Matrix weight; subject to weight decay.
    Weight,
    Bias,
    Norm,
    /// CLS token and positional embedding.
    Embedding,
    Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub kind: ParamKind,
}

impl Param {
    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockLayout {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub w_keys: usize,
    pub w_queries: usize,
    pub w_values: usize,
    /// `(A, B)` indices; one entry per head, or one when shared.
    pub masks: Vec<(usize, usize)>,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub patch_w: usize,
    pub patch_b: usize,
    pub cls: usize,
    pub pos: usize,
    pub blocks: Vec<BlockLayout>,
    pub ln_gain: usize,
    pub ln_bias: usize,
    pub head_w: usize,
    pub head_b: usize,
}

/// Pixel standardization constants taken from a training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

/// Patch-embedding vision transformer with learned-mask or plain attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: TrainConfig,
    variant: Variant,
    geom: GridGeometry,
    params: Vec<Param>,
    layout: Layout,
    input_norm: Option<InputNorm>,
}

struct ParamBuilder<'a> {
    params: Vec<Param>,
    rng: &'a mut ChaCha8Rng,
    std: f64,
}

impl ParamBuilder<'_> {
    fn push(&mut self, name: String, value: Matrix, kind: ParamKind) -> usize {
        self.params.push(Param { name, value, kind });
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, rows: usize, cols: usize, kind: ParamKind) -> usize {
        let dist = Normal::new(0.0, self.std).expect("valid normal");
        let value = Matrix::from_fn(rows, cols, |_, _| dist.sample(self.rng));
        self.push(name, value, kind)
    }

    fn filled(&mut self, name: String, rows: usize, cols: usize, v: f64, kind: ParamKind) -> usize {
        self.push(name, Matrix::filled(rows, cols, v), kind)
    }
}

/// Mask pair every (layer, head) starts from.
pub fn initial_mask_pair(config: &TrainConfig) -> Result<SubMaskPair> {
    let side = config.grid_side();
    let geom = GridGeometry::new(side, side)?;
    let fidelity = config.effective_mask_fidelity();
    match config.mask_init {
        MaskInit::Ones => SubMaskPair::ones(fidelity, geom.seq_len()),
        MaskInit::Pretrained => {
            let spec = GaussianTargetSpec {
                geom,
                sigma: config.effective_mask_sigma(),
                window: None,
            };
            let cfg = MaskTrainConfig {
                epochs: config.mask_pretrain_epochs.max(1),
                seed: config.seed,
                ..MaskTrainConfig::new(fidelity)
            };
            Ok(train_mask_weights(&spec, &cfg)?.pair)
        }
    }
}

/// Splits each image into row-major non-overlapping patches, one row per
/// token, with a zero row at each CLS position and a trailing bias column
/// (1 for patches, 0 for CLS).
fn patch_rows(images: &[&Matrix], patch: usize, side: usize, norm: Option<InputNorm>) -> Matrix {
    let seq = side * side + 1;
    let pd = patch * patch;
    let mut out = Matrix::zeros(images.len() * seq, pd + 1);
    for (b, img) in images.iter().enumerate() {
        for pi in 0..side {
            for pj in 0..side {
                let row = out.row_mut(b * seq + 1 + pi * side + pj);
                for di in 0..patch {
                    for dj in 0..patch {
                        let v = img.get(pi * patch + di, pj * patch + dj);
                        row[di * patch + dj] = match norm {
                            Some(n) => (v - n.mean) / n.std,
                            None => v,
                        };
                    }
                }
                row[pd] = 1.0;
            }
        }
    }
    out
}

/// Recorded forward pass.
pub(crate) struct Graph {
    pub tape: Tape,
    pub vars: Vec<Var>,
    pub logits: Var,
    pub layer_outputs: Vec<Var>,
    pub attention: Vec<AttentionNodes>,
    pub batch: usize,
}

/// Logits and per-layer attention maps of a batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub traces: Vec<AttentionTrace>,
}

impl Model {
    /// Builds a freshly initialized model.
    ///
    /// Non-mask parameters are drawn from `config.seed` in a fixed order that
    /// does not depend on `variant`, so both variants start from the same
    /// weights. Every (layer, head) mask starts as the same pair.
    pub fn new(config: &TrainConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let mask = match variant {
            Variant::Ibit => Some(initial_mask_pair(config)?),
            Variant::Baseline => None,
        };
        Self::with_mask(config, variant, mask)
    }

    /// Like [`Model::new`] but with a caller-supplied initial mask pair.
    pub fn with_mask(config: &TrainConfig, variant: Variant, mask: Option<SubMaskPair>) -> Result<Self> {
        config.validate()?;
        let side = config.grid_side();
        let geom = GridGeometry::new(side, side)?;
        let d = config.d_model;
        let hidden = d * config.mlp_ratio;
        let pd = config.patch_size * config.patch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pb = ParamBuilder {
            params: Vec::new(),
            rng: &mut rng,
            std: config.init_std,
        };
        use ParamKind::*;
        let patch_w = pb.normal("patch_embed.weight".into(), pd, d, Weight);
        let patch_b = pb.filled("patch_embed.bias".into(), 1, d, 0.0, Bias);
        let cls = pb.normal("cls_token".into(), 1, d, Embedding);
        let pos = pb.normal("pos_embed".into(), geom.seq_len_with_cls(), d, Embedding);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockLayout {
                ln1_gain: pb.filled(p("norm1.gain"), 1, d, 1.0, Norm),
                ln1_bias: pb.filled(p("norm1.bias"), 1, d, 0.0, Norm),
                w_keys: pb.normal(p("attn.w_keys"), d, d, Weight),
                w_queries: pb.normal(p("attn.w_queries"), d, d, Weight),
                w_values: pb.normal(p("attn.w_values"), d, d, Weight),
                masks: Vec::new(),
                proj_w: pb.normal(p("attn.proj.weight"), d, d, Weight),
                proj_b: pb.filled(p("attn.proj.bias"), 1, d, 0.0, Bias),
                ln2_gain: pb.filled(p("norm2.gain"), 1, d, 1.0, Norm),
                ln2_bias: pb.filled(p("norm2.bias"), 1, d, 0.0, Norm),
                fc1_w: pb.normal(p("mlp.fc1.weight"), d, hidden, Weight),
                fc1_b: pb.filled(p("mlp.fc1.bias"), 1, hidden, 0.0, Bias),
                fc2_w: pb.normal(p("mlp.fc2.weight"), hidden, d, Weight),
                fc2_b: pb.filled(p("mlp.fc2.bias"), 1, d, 0.0, Bias),
            });
        }
        let ln_gain = pb.filled("norm.gain".into(), 1, d, 1.0, Norm);
        let ln_bias = pb.filled("norm.bias".into(), 1, d, 0.0, Norm);
        let head_w = pb.normal("head.weight".into(), d, config.num_classes, Weight);
        let head_b = pb.filled("head.bias".into(), 1, config.num_classes, 0.0, Bias);

        match (variant, mask) {
            (Variant::Ibit, Some(pair)) => {
                if pair.seq_len() != geom.seq_len() {
                    return Err(IbitError::Config(format!(
                        "mask covers {} tokens, grid has {}",
                        pair.seq_len(),
                        geom.seq_len()
                    )));
                }
                let per_layer = match config.mask_mode {
                    MaskMode::PerHead => config.heads,
                    MaskMode::Shared => 1,
                };
                for (l, block) in blocks.iter_mut().enumerate() {
                    for h in 0..per_layer {
                        let a = pb.push(format!("blocks.{l}.attn.mask.{h}.a"), pair.a().clone(), Mask);
                        let b = pb.push(format!("blocks.{l}.attn.mask.{h}.b"), pair.b().clone(), Mask);
                        block.masks.push((a, b));
                    }
                }
            }
            (Variant::Ibit, None) => return Err(IbitError::Config("the ibit variant needs a mask".into())),
            (Variant::Baseline, Some(_)) => {
                return Err(IbitError::Config("the baseline variant takes no mask".into()))
            }
            (Variant::Baseline, None) => {}
        }

        Ok(Self {
            config: config.clone(),
            variant,
            geom,
            params: pb.params,
            layout: Layout {
                patch_w,
                patch_b,
                cls,
                pos,
                blocks,
                ln_gain,
                ln_bias,
                head_w,
                head_b,
            },
            input_norm: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geom
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn input_norm(&self) -> Option<InputNorm> {
        self.input_norm
    }

    pub fn set_input_norm(&mut self, norm: Option<InputNorm>) {
        self.input_norm = norm;
    }

    /// Masks of `layer`, one pair per head, or `None` for the baseline.
    pub fn layer_masks(&self, layer: usize) -> Result<Option<Vec<SubMaskPair>>> {
        let block = self.layout.blocks.get(layer).ok_or_else(|| {
            IbitError::InvalidArgument(format!("layer {layer} out of range for {} layers", self.config.layers))
        })?;
        if block.masks.is_empty() {
            return Ok(None);
        }
        let pairs = (0..self.config.heads)
            .map(|h| {
                let (a, b) = block.masks[h.min(block.masks.len() - 1)];
                SubMaskPair::new(self.params[a].value.clone(), self.params[b].value.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(pairs))
    }

    /// Replaces the value of every named parameter; shapes must match.
    pub(crate) fn load_values(&mut self, mut values: std::collections::HashMap<String, Matrix>) -> Result<()> {
        for p in &mut self.params {
            let v = values
                .remove(&p.name)
                .ok_or_else(|| IbitError::State(format!("missing parameter {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(IbitError::dim("parameter load", v.shape(), p.value.shape()));
            }
            p.value = v;
        }
        if let Some(extra) = values.keys().next() {
            return Err(IbitError::State(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    fn check_images(&self, images: &[&Matrix]) -> Result<()> {
        if images.is_empty() {
            return Err(IbitError::InvalidArgument("empty batch".into()));
        }
        let s = self.config.image_size;
        for img in images {
            if img.shape() != (s, s) {
                return Err(IbitError::dim("model input", img.shape(), (s, s)));
            }
        }
        Ok(())
    }

    /// Records the forward pass of `images`. `keep` holds per-sample
    /// residual-branch scale factors for each layer's two branches (drop path).
    pub(crate) fn graph(&self, images: &[&Matrix], keep: Option<&[Vec<f64>]>) -> Result<Graph> {
        self.check_images(images)?;
        let cfg = &self.config;
        let batch = images.len();
        let d = cfg.d_model;
        let seq = self.geom.seq_len_with_cls();
        let trainable_masks = !cfg.freeze_masks;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if p.kind == ParamKind::Mask && !trainable_masks {
                    tape.constant(p.value.clone())
                } else {
                    tape.param(p.value.clone())
                }
            })
            .collect();
        let lay = &self.layout;
        let v = |i: usize| vars[i];

        let patches = tape.constant(patch_rows(images, cfg.patch_size, self.geom.width(), self.input_norm));
        let pd = cfg.patch_size * cfg.patch_size;
        let embed_w = tape.assemble(pd + 1, d, vec![(v(lay.patch_w), 0, 0), (v(lay.patch_b), pd, 0)])?;
        let embedded = tape.matmul(patches, embed_w)?;
        let cls_rows = tape.assemble(seq, d, vec![(v(lay.cls), 0, 0)])?;
        let token_bias = tape.add(cls_rows, v(lay.pos))?;
        let mut x = tape.add_tiled(embedded, token_bias)?;

        let mut layer_outputs = Vec::with_capacity(lay.blocks.len());
        let mut attention = Vec::with_capacity(lay.blocks.len());
        for (l, blk) in lay.blocks.iter().enumerate() {
            let h = layer_norm_affine(&mut tape, x, v(blk.ln1_gain), v(blk.ln1_bias))?;
            let layer_vars = LayerVars {
                w_keys: v(blk.w_keys),
                w_queries: v(blk.w_queries),
                w_values: v(blk.w_values),
                masks: if blk.masks.is_empty() {
                    None
                } else {
                    Some(blk.masks.iter().map(|&(a, b)| (v(a), v(b))).collect())
                },
                shared_mask: cfg.mask_mode == MaskMode::Shared,
            };
            let nodes = attention_graph(&mut tape, h, batch, &layer_vars, cfg.heads, cfg.normalization, self.geom)?;
            let proj = tape.matmul(nodes.output, v(blk.proj_w))?;
            let mut branch = tape.add_tiled(proj, v(blk.proj_b))?;
            if let Some(k) = keep {
                branch = tape.row_scale(branch, expand(&k[2 * l], seq))?;
            }
            attention.push(nodes);
            x = tape.add(x, branch)?;

            let h = layer_norm_affine(&mut tape, x, v(blk.ln2_gain), v(blk.ln2_bias))?;
            let z = tape.matmul(h, v(blk.fc1_w))?;
            let z = tape.add_tiled(z, v(blk.fc1_b))?;
            let z = tape.gelu(z);
            let z = tape.matmul(z, v(blk.fc2_w))?;
            let mut branch = tape.add_tiled(z, v(blk.fc2_b))?;
            if let Some(k) = keep {
                branch = tape.row_scale(branch, expand(&k[2 * l + 1], seq))?;
            }
            x = tape.add(x, branch)?;
            layer_outputs.push(x);
        }

        let cls_out = tape.gather_rows(x, (0..batch).map(|b| b * seq).collect())?;
        let h = layer_norm_affine(&mut tape, cls_out, v(lay.ln_gain), v(lay.ln_bias))?;
        let logits = tape.matmul(h, v(lay.head_w))?;
        let logits = tape.add_tiled(logits, v(lay.head_b))?;
        Ok(Graph {
            tape,
            vars,
            logits,
            layer_outputs,
            attention,
            batch,
        })
    }

    pub fn forward(&self, images: &[&Matrix]) -> Result<ForwardOutput> {
        let g = self.graph(images, None)?;
        Ok(ForwardOutput {
            logits: g.tape.value(g.logits).clone(),
            traces: g.attention.iter().map(|n| n.trace(&g.tape, g.batch)).collect(),
        })
    }

    pub fn logits(&self, images: &[&Matrix]) -> Result<Matrix> {
        let g = self.graph(images, None)?;
        Ok(g.tape.value(g.logits).clone())
    }

    /// Arg-max class per image; ties go to the lower index.
    pub fn predict(&self, images: &[&Matrix]) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    /// Label-smoothed cross-entropy and its gradient for every parameter, in
    /// [`Model::params`] order. Frozen masks get zero gradients.
    pub fn loss_and_gradients(&self, images: &[&Matrix], labels: &[usize]) -> Result<(f64, Vec<Matrix>)> {
        let (loss, g, grads) = self.loss_graph(images, labels, None)?;
        Ok((loss, self.collect_grads(&g, &grads)))
    }

    pub fn loss(&self, images: &[&Matrix], labels: &[usize]) -> Result<f64> {
        let mut g = self.graph(images, None)?;
        let loss = g.tape.cross_entropy(g.logits, labels, self.config.label_smoothing)?;
        Ok(g.tape.value(loss).get(0, 0))
    }

    pub(crate) fn loss_graph(
        &self,
        images: &[&Matrix],
        labels: &[usize],
        keep: Option<&[Vec<f64>]>,
    ) -> Result<(f64, Graph, Gradients)> {
        let mut g = self.graph(images, keep)?;
        let loss = g.tape.cross_entropy(g.logits, labels, self.config.label_smoothing)?;
        let value = g.tape.value(loss).get(0, 0);
        let grads = g.tape.backward(loss)?;
        Ok((value, g, grads))
    }

    pub(crate) fn collect_grads(&self, g: &Graph, grads: &Gradients) -> Vec<Matrix> {
        g.vars
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols()))
            })
            .collect()
    }

    /// Per-sample drop-path factors for every residual branch, drawn from `rng`.
    pub(crate) fn sample_drop_path(&self, batch: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<f64>>> {
        let p = self.config.drop_path;
        if p <= 0.0 {
            return None;
        }
        let branches = 2 * self.config.layers;
        Some(
            (0..branches)
                .map(|i| {
                    // Linearly increasing rate with depth.
                    let rate = p * (i / 2) as f64 / (self.config.layers.max(2) - 1) as f64;
                    (0..batch)
                        .map(|_| {
                            if rng.random::<f64>() < rate {
                                0.0
                            } else {
                                1.0 / (1.0 - rate)
                            }
                        })
                        .collect()
                })
                .collect(),
        )
    }

    /// First layer whose output contains a non-finite value.
    pub(crate) fn first_non_finite_layer(g: &Graph) -> Option<usize> {
        g.layer_outputs.iter().position(|&v| !g.tape.value(v).is_finite())
    }
}

fn expand(per_sample: &[f64], seq: usize) -> Vec<f64> {
    per_sample.iter().flat_map(|&f| std::iter::repeat_n(f, seq)).collect()
}

fn layer_norm_affine(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layer_norm(x, LAYER_NORM_EPS);
    let n = tape.mul_tiled(n, gain)?;
    tape.add_tiled(n, bias)
}
