use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::data::{self, ImagePair, SynthKind};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::PNorm;
use crate::schedule::{build_schedule, NoiseSchedule, ScheduleFamily, DEFAULT_TRAIN_STEPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Noise prediction over the full noise-level prior.
    #[default]
    Diffusion,
    /// One-step `y0` prediction from the condition alone (`gamma = 1`, zero `y_t`).
    Regression,
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "diffusion" => Ok(Self::Diffusion),
            "regression" => Ok(Self::Regression),
            other => Err(format!("unknown mode `{other}` (diffusion | regression)")),
        }
    }
}

/// Where training pairs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Procedural images generated from the training seed.
    Synthetic { kind: SynthKind, count: usize, size: usize, scale: usize },
    /// High-resolution PNGs; inputs are derived by downsampling.
    Directory { path: PathBuf, scale: usize },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic { kind: SynthKind::Shapes, count: 2000, size: 32, scale: 4 }
    }
}

impl DataSpec {
    pub fn scale(&self) -> usize {
        match self {
            DataSpec::Synthetic { scale, .. } | DataSpec::Directory { scale, .. } => *scale,
        }
    }

    /// Materializes the pairs; synthetic data is drawn from its own stream of `seed`.
    pub fn load(&self, seed: u64) -> Result<Vec<ImagePair>> {
        match self {
            DataSpec::Synthetic { kind, count, size, scale } => {
                let mut rng = super::stream_rng(seed, SYNTH_STREAM);
                Ok(data::synth_dataset(*kind, *count, *size, *scale, &mut rng)?)
            }
            DataSpec::Directory { path, scale } => {
                Ok(data::load_pairs(path, *scale)?.into_iter().map(|p| p.pair).collect())
            }
        }
    }
}

const SYNTH_STREAM: u64 = 7;

/// Everything a training run depends on besides the dataset contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear ramp length; the rate is constant afterwards.
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Overrides `model.dropout_rate`.
    pub dropout: f64,
    pub p_norm: PNorm,
    #[serde(rename = "T")]
    pub timesteps: usize,
    /// `None` selects the default linear-beta family for `T`.
    pub schedule: Option<ScheduleFamily>,
    pub seed: u64,
    pub mode: TrainMode,
    /// Gaussian blur applied to conditioning inputs; 0 disables it.
    pub input_blur_sigma: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub model: DenoiserConfig,
    pub data: DataSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 16,
            learning_rate: 1e-4,
            warmup_steps: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dropout: 0.0,
            p_norm: PNorm::L2,
            timesteps: DEFAULT_TRAIN_STEPS,
            schedule: None,
            seed: 0,
            mode: TrainMode::Diffusion,
            input_blur_sigma: 0.0,
            grad_clip: Some(1.0),
            checkpoint_every: 1000,
            model: DenoiserConfig::default(),
            data: DataSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            PipelineError::Config(msg) => PipelineError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.input_blur_sigma >= 0.0 && self.input_blur_sigma.is_finite()) {
            return bad(format!("input_blur_sigma must be non-negative, got {}", self.input_blur_sigma));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.data.scale() == 0 {
            return bad("data scale must be at least 1".into());
        }
        self.denoiser_config().validate()?;
        self.noise_schedule()?;
        Ok(())
    }

    /// The model section with the run's dropout rate.
    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig { dropout_rate: self.dropout, ..self.model.clone() }
    }

    pub fn schedule_family(&self) -> ScheduleFamily {
        self.schedule.unwrap_or_else(|| ScheduleFamily::default_for(self.timesteps))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        Ok(build_schedule(self.schedule_family(), self.timesteps)?)
    }
}
