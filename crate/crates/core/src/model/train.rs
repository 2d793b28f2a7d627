use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::LrSchedule;
use super::network::{InputNorm, Model, ParamKind};
use super::optim::AdamW;
use crate::data::{subset_fraction, LabeledImageSet};
use crate::error::{IbitError, Result};
use crate::linalg::Matrix;

/// Images per parallel evaluation chunk.
pub const EVAL_CHUNK: usize = 64;

/// Stream id separating the training RNG from the initializer.
const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    /// Accuracy of the minibatch predictions made while training.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub steps: usize,
}

/// Position of the training RNG, enough to recreate it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// 32-bit word position, as a decimal string (JSON has no 128-bit integers).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| IbitError::State(format!("bad rng position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Progress notifications from [`train`]. Epoch 0 is the untrained model.
pub enum TrainEvent<'a> {
    Step(StepLog),
    Epoch {
        epoch: usize,
        model: &'a Model,
        history: &'a [EpochMetrics],
        rng: RngState,
    },
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub train_size: usize,
    pub steps: usize,
}

fn check_dataset(model: &Model, set: &LabeledImageSet, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(IbitError::InvalidArgument(format!("{what} set is empty")));
    }
    let cfg = model.config();
    let s = cfg.image_size;
    if let Some(shape) = set.image_shape() {
        if shape != (s, s) {
            return Err(IbitError::dim("dataset images", shape, (s, s)));
        }
    }
    if let Some(&bad) = set.labels().iter().find(|&&l| l >= cfg.num_classes) {
        return Err(IbitError::InvalidArgument(format!(
            "{what} label {bad} out of range for {} classes",
            cfg.num_classes
        )));
    }
    Ok(())
}

fn augment(img: &Matrix, padding: usize, hflip: bool, rng: &mut ChaCha8Rng) -> Matrix {
    let (h, w) = img.shape();
    let (dy, dx) = if padding > 0 {
        (rng.random_range(0..=2 * padding), rng.random_range(0..=2 * padding))
    } else {
        (padding, padding)
    };
    let flip = hflip && rng.random::<bool>();
    Matrix::from_fn(h, w, |i, j| {
        let src_j = if flip { w - 1 - j } else { j };
        let si = (i + dy).checked_sub(padding);
        let sj = (src_j + dx).checked_sub(padding);
        match (si, sj) {
            (Some(si), Some(sj)) if si < h && sj < w => img.get(si, sj),
            _ => 0.0,
        }
    })
}

fn pixel_stats(set: &LabeledImageSet) -> InputNorm {
    let n = set.images().iter().map(Matrix::len).sum::<usize>() as f64;
    let mean = set.images().iter().map(Matrix::sum).sum::<f64>() / n;
    let var = set
        .images()
        .iter()
        .flat_map(|m| m.as_slice())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    InputNorm {
        mean,
        std: var.sqrt().max(1e-6),
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Minibatch AdamW training with the configured schedule.
///
/// The training set is first reduced with [`subset_fraction`] when
/// `dataset_fraction < 1`. `on_event` sees every step and every epoch
/// boundary (including epoch 0, before any update); an error from it stops
/// training.
pub fn train(
    model: &mut Model,
    train_set: &LabeledImageSet,
    test_set: Option<&LabeledImageSet>,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainReport> {
    let cfg = model.config().clone();
    check_dataset(model, train_set, "training")?;
    if let Some(t) = test_set {
        check_dataset(model, t, "test")?;
    }
    let owned;
    let data = if cfg.dataset_fraction < 1.0 {
        owned = subset_fraction(train_set, cfg.dataset_fraction, cfg.seed)?;
        &owned
    } else {
        train_set
    };
    if cfg.standardize {
        model.set_input_norm(Some(pixel_stats(data)));
    }

    let n = data.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let schedule = LrSchedule::new(cfg.lr, total_steps, cfg.warmup_fraction);
    let mut opt = AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut history: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs);
    let augmenting = cfg.crop_padding > 0 || cfg.hflip;

    on_event(TrainEvent::Epoch {
        epoch: 0,
        model,
        history: &history,
        rng: RngState::capture(cfg.seed, &rng),
    })?;

    let mut step = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let augmented: Vec<Matrix>;
            let images: Vec<&Matrix> = if augmenting {
                augmented = batch
                    .iter()
                    .map(|&i| augment(&data.images()[i], cfg.crop_padding, cfg.hflip, &mut rng))
                    .collect();
                augmented.iter().collect()
            } else {
                batch.iter().map(|&i| &data.images()[i]).collect()
            };
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let keep = model.sample_drop_path(batch.len(), &mut rng);
            let (loss, graph, grads) = model.loss_graph(&images, &labels, keep.as_deref())?;
            if !loss.is_finite() {
                let layer = Model::first_non_finite_layer(&graph)
                    .map_or_else(|| "the classifier head".to_string(), |l| format!("layer {l}"));
                return Err(IbitError::Training {
                    iteration: step,
                    reason: format!("loss became {loss} in epoch {epoch}; first non-finite activation in {layer}"),
                });
            }
            let logits = graph.tape.value(graph.logits);
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(r, &l)| argmax(logits.row(r)) == l)
                .count();
            lr = schedule.lr(step);
            let frozen = cfg.freeze_masks;
            let grad_refs: Vec<Option<&Matrix>> = graph
                .vars
                .iter()
                .zip(model.params())
                .map(|(&v, p)| if frozen && p.kind == ParamKind::Mask { None } else { grads.get(v) })
                .collect();
            opt.step(model.params_mut(), &grad_refs, lr)?;
            loss_sum += loss * batch.len() as f64;
            on_event(TrainEvent::Step(StepLog { step, epoch, loss, lr }))?;
            step += 1;
        }
        let test_acc = test_set.map(|t| evaluate(model, t)).transpose()?;
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            test_acc,
            lr,
            steps: batches_per_epoch,
        });
        on_event(TrainEvent::Epoch {
            epoch,
            model,
            history: &history,
            rng: RngState::capture(cfg.seed, &rng),
        })?;
    }
    Ok(TrainReport {
        history,
        train_size: n,
        steps: step,
    })
}

/// Top-1 accuracy without augmentation. Chunks are scored in parallel on
/// the current rayon pool; the result does not depend on the thread count.
pub fn evaluate(model: &Model, set: &LabeledImageSet) -> Result<f64> {
    check_dataset(model, set, "evaluation")?;
    let indices: Vec<usize> = (0..set.len()).collect();
    let correct = indices
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let images: Vec<&Matrix> = chunk.iter().map(|&i| &set.images()[i]).collect();
            let preds = model.predict(&images)?;
            Ok(chunk.iter().zip(preds).filter(|&(&i, p)| set.labels()[i] == p).count())
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augment_shifts_and_flips() {
        let img = Matrix::from_fn(3, 3, |r, c| (r * 3 + c) as f64 / 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, 0, false, &mut rng), img);
        let mut saw_shift = false;
        for _ in 0..20 {
            let out = augment(&img, 1, false, &mut rng);
            assert_eq!(out.shape(), (3, 3));
            saw_shift |= out != img;
        }
        assert!(saw_shift);
        let mut flips = 0;
        for _ in 0..20 {
            let out = augment(&img, 0, true, &mut rng);
            if out != img {
                assert_eq!(out.get(0, 0), img.get(0, 2));
                flips += 1;
            }
        }
        assert!(flips > 0 && flips < 20);
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(TRAIN_STREAM);
        for _ in 0..17 {
            rng.random::<u32>();
        }
        let state = RngState::capture(5, &rng);
        let mut restored = state.restore().unwrap();
        assert_eq!(restored.random::<u64>(), rng.random::<u64>());
    }

    #[test]
    fn pixel_stats_match_direct_computation() {
        let images = vec![Matrix::filled(2, 2, 0.0), Matrix::filled(2, 2, 1.0)];
        let set = LabeledImageSet::new(images, vec![0, 1], 2).unwrap();
        let s = pixel_stats(&set);
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.std, 0.5);
    }
}
