//! Training configuration, file loading and dotted-path overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::optim::AdamWConfig;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, ReconLoss};
use crate::unet::ModelConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablations {
    pub no_disent: bool,
    pub mse_instead_of_charbonnier: bool,
    pub no_curriculum: bool,
}

impl Ablations {
    pub fn recon_loss(&self) -> ReconLoss {
        if self.mse_instead_of_charbonnier {
            ReconLoss::Mse
        } else {
            ReconLoss::Charbonnier
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Curriculum horizon: iterations that follow the entropy ramp.
    pub horizon: usize,
    pub batch_size: usize,
    /// Random flips and transposes of each training slice.
    pub augment: bool,
    pub learning_rate: f64,
    /// Cosine decay of the learning rate to zero over this many iterations;
    /// `null` keeps it constant.
    pub lr_cosine_steps: Option<usize>,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    pub loss_weights: LossWeights,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampling_steps: usize,
    pub ema_decay: f64,
    pub ema_warmup: bool,
    pub seed: u64,
    pub ablations: Ablations,
    /// Spread of curriculum entropy targets in bits; `null` uses a sixth of
    /// the training set's entropy range.
    pub curriculum_sigma: Option<f64>,
    pub entropy_bins: usize,
    /// Checkpoint interval in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small model on 32x32 slices, T = 100.
    pub fn desk() -> Self {
        Self {
            iterations: 2000,
            horizon: 200,
            batch_size: 4,
            augment: true,
            learning_rate: 5e-4,
            lr_cosine_steps: None,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            loss_weights: LossWeights::default(),
            model: ModelConfig::desk(),
            schedule: ScheduleConfig {
                steps: 100,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
            sampling_steps: 25,
            ema_decay: 0.999,
            ema_warmup: true,
            seed: 0,
            ablations: Ablations::default(),
            curriculum_sigma: None,
            entropy_bins: crate::curriculum::DEFAULT_ENTROPY_BINS,
            checkpoint_every: 500,
        }
    }

    /// Learning rate for the update that completes iteration `iteration + 1`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        match self.lr_cosine_steps {
            Some(n) => {
                let progress = iteration.min(n) as f64 / n as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            None => self.learning_rate,
        }
    }

    /// Full-size setting: 224x224 slices, T = 1000, 200k iterations.
    pub fn full_scale() -> Self {
        Self {
            iterations: 200_000,
            horizon: 20_000,
            batch_size: 8,
            augment: false,
            learning_rate: 1e-4,
            lr_cosine_steps: None,
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampling_steps: 100,
            ema_decay: 0.9999,
            ema_warmup: false,
            checkpoint_every: 10_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.horizon > self.iterations {
            return err(format!(
                "horizon {} exceeds iterations {}",
                self.horizon, self.iterations
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.lr_cosine_steps == Some(0) {
            return err("lr_cosine_steps must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return err(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.sampling_steps == 0 || self.sampling_steps > self.schedule.steps {
            return err(format!(
                "sampling_steps must lie in 1..={}, got {}",
                self.schedule.steps, self.sampling_steps
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return err(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if let Some(s) = self.curriculum_sigma {
            if !(s > 0.0) {
                return err(format!("curriculum_sigma must be positive, got {s}"));
            }
        }
        if self.entropy_bins == 0 {
            return err("entropy_bins must be positive".into());
        }
        self.optimizer.validate()?;
        self.loss_weights.validate()?;
        self.model.validate()?;
        self.schedule.build()?;
        Ok(())
    }

    /// Loss weights after ablations: the disentanglement ablation zeroes λ1.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss_weights;
        if self.ablations.no_disent {
            w.lambda1 = 0.0;
        }
        w
    }

    /// Desk defaults, then `file` (if any) merged key by key, then
    /// `overrides` of the form `dotted.path=value`. Unknown keys anywhere
    /// are rejected.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let patch: Value = serde_json::from_str(&text)?;
            merge_into(&mut value, patch, "")?;
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }
}

fn merge_into(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(base), Value::Object(patch)) => {
            for (k, v) in patch {
                let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match base.get_mut(&k) {
                    Some(slot) => merge_into(slot, v, &full)?,
                    None => return Err(Error::Config(format!("unknown config key `{full}`"))),
                }
            }
            Ok(())
        }
        (slot, patch) => {
            *slot = patch;
            Ok(())
        }
    }
}

/// Sets `key.path=value` on a JSON document. The value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *slot = value;
    Ok(())
}
