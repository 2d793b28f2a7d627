use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IbitError, Result};
use crate::lmsa::Normalization;
use crate::mask::DEFAULT_FILTER_SIZE;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Learned-mask attention.
    #[default]
    Ibit,
    /// Plain attention, otherwise identical.
    Baseline,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Ibit => "ibit",
            Variant::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = IbitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ibit" => Ok(Variant::Ibit),
            "baseline" => Ok(Variant::Baseline),
            other => Err(IbitError::Config(format!("unknown variant {other:?}, expected ibit or baseline"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup from 0, then cosine decay to 0 at the last step.
    #[default]
    CosineWarmup,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    PerHead,
    Shared,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskInit {
    /// Fit to a Gaussian locality target before training.
    #[default]
    Pretrained,
    /// Composed mask of all ones.
    Ones,
}

/// Model shape, optimizer, schedule and augmentation settings.
///
/// Deserialization fills missing fields from [`TrainConfig::default`] and
/// rejects unknown ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub drop_path: f64,
    pub schedule: Schedule,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Standard deviation of the normal initializer for weights and embeddings.
    pub init_std: f64,
    /// Side of the convolution the initial masks emulate.
    pub filter_size: usize,
    /// Gaussian width of the mask target; `filter_size / 2` when absent.
    pub mask_sigma: Option<f64>,
    /// Rank of each mask; `filter_size²` when absent.
    pub mask_fidelity: Option<usize>,
    pub mask_pretrain_epochs: usize,
    pub mask_mode: MaskMode,
    pub mask_init: MaskInit,
    pub freeze_masks: bool,
    pub normalization: Normalization,
    /// Zero padding for random-crop augmentation; 0 disables it.
    pub crop_padding: usize,
    pub hflip: bool,
    /// Standardize pixels with the training-set mean and deviation.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 3,
            d_model: 96,
            patch_size: 4,
            image_size: 28,
            num_classes: 10,
            mlp_ratio: 4,
            lr: 1e-3,
            weight_decay: 0.005,
            label_smoothing: 0.1,
            drop_path: 0.0,
            schedule: Schedule::CosineWarmup,
            warmup_fraction: 0.05,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            dataset_fraction: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            init_std: 0.02,
            filter_size: DEFAULT_FILTER_SIZE,
            mask_sigma: None,
            mask_fidelity: None,
            mask_pretrain_epochs: crate::mask::DEFAULT_MASK_EPOCHS,
            mask_mode: MaskMode::PerHead,
            mask_init: MaskInit::Pretrained,
            freeze_masks: false,
            normalization: Normalization::RowL1,
            crop_padding: 0,
            hflip: false,
            standardize: false,
        }
    }
}

impl TrainConfig {
    /// The 12-layer, 192-wide, 3-head configuration of the full-size model.
    pub fn full_scale() -> Self {
        Self {
            layers: 12,
            heads: 3,
            d_model: 192,
            patch_size: 16,
            image_size: 224,
            num_classes: 1000,
            drop_path: 0.1,
            epochs: 300,
            batch_size: 1024,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| IbitError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IbitError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn effective_mask_sigma(&self) -> f64 {
        self.mask_sigma.unwrap_or(self.filter_size as f64 / 2.0)
    }

    pub fn effective_mask_fidelity(&self) -> usize {
        self.mask_fidelity.unwrap_or(self.filter_size * self.filter_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(IbitError::Config(msg));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.num_classes == 0 {
            return bad("layers, heads, d_model and num_classes must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "patch size {} does not tile image size {}",
                self.patch_size, self.image_size
            ));
        }
        if !(self.dataset_fraction > 0.0 && self.dataset_fraction <= 1.0) {
            return bad(format!("dataset_fraction {} is outside (0, 1]", self.dataset_fraction));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path {} is outside [0, 1)", self.drop_path));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} is outside [0, 1)", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} is outside [0, 1)", self.warmup_fraction));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        if self.weight_decay < 0.0 || self.batch_size == 0 || self.mlp_ratio == 0 {
            return bad("weight_decay must be non-negative; batch_size and mlp_ratio positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        let side = self.grid_side();
        if self.filter_size == 0 || self.filter_size > side {
            return bad(format!("filter size {} does not fit a {side}x{side} grid", self.filter_size));
        }
        let fidelity = self.effective_mask_fidelity();
        if fidelity == 0 || fidelity > self.num_patches() {
            return bad(format!("mask fidelity {fidelity} must be in 1..={}", self.num_patches()));
        }
        if !(self.effective_mask_sigma() > 0.0) {
            return bad("mask_sigma must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate per optimizer step under [`Schedule::CosineWarmup`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        let warmup_steps = ((warmup_fraction * total_steps as f64).round() as usize)
            .max(1)
            .min(total_steps.saturating_sub(1));
        Self {
            peak,
            total_steps,
            warmup_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(1).saturating_sub(self.warmup_steps);
        if span == 0 {
            return if step + 1 >= self.total_steps { 0.0 } else { self.peak };
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.peak * (1.0 + (PI * progress).cos())
    }
}
