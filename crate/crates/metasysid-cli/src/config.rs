//! Run configuration: one TOML file with `[stream]`, `[model]`, `[train]`
//! and `[eval]` sections. Unknown keys are rejected everywhere; flags
//! override file keys; every run writes its resolved config next to its
//! outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use metasysid_core::nncore::AdamWConfig;
use metasysid_core::trainer::TrainConfig;
use metasysid_core::{ModelSpec, StreamConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stream: StreamConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub n_iterations: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_iters: u64,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start_path: Option<PathBuf>,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_warmup() -> u64 {
    1000
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_checkpoint_every() -> u64 {
    5000
}
fn default_log_every() -> u64 {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub sigma_e: f64,
    /// Test-ensemble seed; defaults to the stream's global seed (the seed
    /// spaces are tagged apart internally).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_seed: Option<u64>,
    /// Prediction rmse transient skip; defaults to `n_ctx / 4`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip: Option<usize>,
    /// Simulation context split; defaults to the model's encoder window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_split: Option<usize>,
    #[serde(default = "default_sigma_grid")]
    pub sigma_grid: Vec<f64>,
    #[serde(default = "shift_mag_min")]
    pub shift_mag_min: f64,
    #[serde(default = "shift_mag_max")]
    pub shift_mag_max: f64,
    #[serde(default = "shift_phase_min")]
    pub shift_phase_min: f64,
    #[serde(default = "shift_phase_max")]
    pub shift_phase_max: f64,
    /// Realization order for the subspace baseline; absent selects per
    /// dataset by the singular-value gap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_order: Option<usize>,
    /// `--assert` threshold on the aggregate rmse.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assert_rmse_max: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("empty eval section has defaults")
    }
}

fn default_n_test() -> usize {
    256
}
fn default_sigma_grid() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
}
fn shift_mag_min() -> f64 {
    0.2
}
fn shift_mag_max() -> f64 {
    0.99
}
fn shift_phase_min() -> f64 {
    -3.0 * std::f64::consts::FRAC_PI_4
}
fn shift_phase_max() -> f64 {
    3.0 * std::f64::consts::FRAC_PI_4
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(seed) = seed_override {
            cfg.stream.global_seed = seed;
        }
        cfg.stream
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid [stream]: {e}"))?;
        if let Some(model) = &cfg.model {
            model
                .validate()
                .map_err(|e| anyhow::anyhow!("invalid [model]: {e}"))?;
        }
        Ok(cfg)
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.eval_seed.unwrap_or(self.stream.global_seed)
    }

    pub fn require_model(&self) -> Result<&ModelSpec> {
        self.model
            .as_ref()
            .context("config needs a [model] section")
    }

    /// Assembles the core training config from the sections.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let model = self.require_model()?.clone();
        let Some(t) = &self.train else {
            bail!("config needs a [train] section");
        };
        Ok(TrainConfig {
            stream: self.stream.clone(),
            model,
            n_iterations: t.n_iterations,
            adamw: AdamWConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                weight_decay: t.weight_decay,
            },
            warmup_iters: t.warmup_iters,
            clip_norm: t.clip_norm,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            warm_start_path: t.warm_start_path.clone(),
        })
    }

    /// Writes the resolved config next to the run outputs.
    pub fn write_resolved(&self, run_dir: &Path) -> Result<PathBuf> {
        let path = run_dir.join("config_resolved.toml");
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
