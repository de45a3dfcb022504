use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Method;
use crate::regularizers::{Eps, Kernel, MuMode, PARAPHRASER_STEPS};
use crate::trainer::{ModelConfig, Schedule, TrainConfig};

/// Optimization settings shared by `train`, `ablate` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub steps: usize,
    pub lr_theta: f64,
    pub lr_mu: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub eval_every: usize,
    pub paraphraser_steps: usize,
    pub paraphraser_lr: f64,
    /// Overrides the method's inner μ step count when set.
    pub bilevel_inner_steps: Option<usize>,
    pub model: ModelConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            steps: t.steps,
            lr_theta: t.lr_theta,
            lr_mu: t.lr_mu,
            schedule: t.schedule,
            seed: t.seed,
            eval_every: t.eval_every,
            paraphraser_steps: PARAPHRASER_STEPS,
            paraphraser_lr: t.paraphraser_lr,
            bilevel_inner_steps: None,
            model: t.model,
        }
    }
}

/// Overrides applied on top of a method's regularizer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerSection {
    pub kernel: Option<Kernel>,
    pub mu_mode: Option<MuMode>,
    pub eps_norm: Option<f64>,
    pub eps_sqrt: Option<f64>,
}

impl TrainSection {
    /// The trainer config for `method`, with regularizer overrides applied.
    pub fn to_train_config(&self, method: Method, reg: &RegularizerSection) -> TrainConfig {
        let base = TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            lr_theta: self.lr_theta,
            lr_mu: self.lr_mu,
            schedule: self.schedule,
            seed: self.seed,
            eval_every: self.eval_every,
            paraphraser_steps: self.paraphraser_steps,
            paraphraser_lr: self.paraphraser_lr,
            model: self.model.clone(),
            ..TrainConfig::default()
        };
        let mut c = method.configure(&base);
        if let Some(k) = self.bilevel_inner_steps {
            c.bilevel_inner_steps = k;
        }
        if let Some(spec) = &mut c.regularizer {
            if let Some(k) = reg.kernel {
                spec.kernel = k;
            }
            if let Some(m) = reg.mu_mode {
                spec.mu_mode = m;
            }
            let d = Eps::default();
            spec.eps = Eps {
                norm: reg.eps_norm.unwrap_or(d.norm),
                sqrt: reg.eps_sqrt.unwrap_or(d.sqrt),
            };
        }
        c
    }
}

/// Config file for `train` and `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: String,
    /// Dataset manifest, relative to the config file.
    pub manifest: PathBuf,
    /// Output directory, relative to the config file.
    pub out: PathBuf,
    #[serde(default)]
    pub run_id: Option<String>,
    /// Fixed β; skips selection.
    #[serde(default)]
    pub beta: Option<f64>,
    /// β grid for holdout selection; defaults to the method's grid.
    #[serde(default)]
    pub beta_grid: Option<Vec<f64>>,
    /// Checkpoint whose `extractor.*` tensors initialize the model.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub regularizer: RegularizerSection,
}

/// Synthetic base task for a sweep; each sweep seed draws its own dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_examples: usize,
    pub d_signal: usize,
    pub d_distractor: usize,
    pub n_classes: usize,
    #[serde(default = "default_temperature")]
    pub label_temperature: f64,
}

fn default_temperature() -> f64 {
    1.0
}

/// Config file for `sweep`. Exactly one of `manifest` and `synthetic`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepExperimentConfig {
    pub sweep_id: String,
    pub out: PathBuf,
    pub methods: Vec<String>,
    pub d_noise: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default)]
    pub train: TrainSection,
}

pub(crate) fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, String)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((parsed, text))
}

/// `p` relative to `base` unless absolute.
pub(crate) fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn method(&self) -> Result<Method> {
        self.method.parse()
    }
}
