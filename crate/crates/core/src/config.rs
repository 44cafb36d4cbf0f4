//! Run configuration, read from TOML and overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset on disk; when absent the `synth` benchmark is generated in memory.
    pub root: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Ignore the listed splits and shuffle sequences into train/test.
    pub resplit: bool,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            synth: SynthSpec::default(),
            resplit: false,
            split_ratio: 0.9,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer updates, one clip each.
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
    pub log_every: usize,
    /// Feed the frame-2 ground truth (rather than the prediction) to memory
    /// and prior before frame 3.
    pub teacher_forcing: bool,
    /// Window of the moving average reported as the smoothed loss.
    pub smoothing: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-2,
            momentum: 0.0,
            grad_clip: None,
            log_every: 20,
            teacher_forcing: false,
            smoothing: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds parameter initialization and clip sampling.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Validation(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.synth.config.validate()?;
        let d = &self.data;
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            return Err(Error::validation(format!("split_ratio {} must lie in (0, 1)", d.split_ratio)));
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::validation("lr must be positive and momentum in [0, 1)"));
        }
        if t.grad_clip.is_some_and(|c| c <= 0.0) || t.smoothing == 0 {
            return Err(Error::validation("grad_clip and smoothing must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::validation("threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}
