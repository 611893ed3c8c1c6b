//! Stochastic meta-training.
//!
//! Every iteration draws a brand-new batch of datasets, takes one AdamW step
//! on the corresponding loss, and moves on; no data is ever revisited, which
//! is what rules out meta-overfitting. The loop is a pure function of its
//! config: identical configs produce identical loss trajectories.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastream::{self, SequenceBatch, StreamConfig, StreamError};
use crate::metamodel::{
    one_step_loss_backward, sim_loss_backward, DecoderOnlyModel, EncoderDecoderModel, ModelSpec,
};
use crate::nncore::{AdamW, AdamWConfig, NnError, Param, ParamStore};
use crate::seeds::{self, tag};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite loss at iteration {iteration}; diagnostic checkpoint at {diagnostic}")]
    NonFiniteLoss { iteration: u64, diagnostic: PathBuf },
    #[error("warm start rejected: {0}")]
    WarmStart(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
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

/// Loss-smoothing decay for the logged EMA.
pub const EMA_DECAY: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stream: StreamConfig,
    pub model: ModelSpec,
    pub n_iterations: u64,
    #[serde(default = "AdamWConfig::default")]
    pub adamw: AdamWConfig,
    /// Linear learning-rate warmup length; 0 disables it.
    #[serde(default = "default_warmup")]
    pub warmup_iters: u64,
    /// Global gradient-norm clip; absent disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub warm_start_path: Option<PathBuf>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.n_iterations == 0 {
            return Err(TrainError::Config("n_iterations must be >= 1".into()));
        }
        if self.adamw.lr <= 0.0 {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        self.stream.validate()?;
        self.model.validate()?;
        match &self.model {
            ModelSpec::DecoderOnly(c) => {
                if c.n_u != 1 || c.n_y != 1 {
                    return Err(TrainError::Config("stream is SISO: n_u = n_y = 1".into()));
                }
                if self.stream.seq_len < 2 || self.stream.seq_len - 1 > c.n_ctx {
                    return Err(TrainError::Config(format!(
                        "sequence length {} needs {} tokens but n_ctx = {}",
                        self.stream.seq_len,
                        self.stream.seq_len - 1,
                        c.n_ctx
                    )));
                }
            }
            ModelSpec::EncoderDecoder(c) => {
                if c.n_u != 1 || c.n_y != 1 {
                    return Err(TrainError::Config("stream is SISO: n_u = n_y = 1".into()));
                }
                if self.stream.seq_len != c.n_ctx_enc + c.n_ctx_dec {
                    return Err(TrainError::Config(format!(
                        "sequence length {} != n_ctx_enc + n_ctx_dec = {}",
                        self.stream.seq_len,
                        c.n_ctx_enc + c.n_ctx_dec
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Either meta-model behind one training/evaluation interface.
#[derive(Debug, Clone)]
pub enum MetaModel {
    Predictor(DecoderOnlyModel<f32>),
    Simulator(EncoderDecoderModel<f32>),
}

impl MetaModel {
    /// Fresh weights; the init stream is derived from the global seed.
    pub fn init(spec: &ModelSpec, global_seed: u64) -> Result<Self, TrainError> {
        let mut rng = seeds::rng_from(seeds::mix_words(&[global_seed, tag::INIT]));
        Ok(match spec {
            ModelSpec::DecoderOnly(c) => Self::Predictor(DecoderOnlyModel::init(c, &mut rng)?),
            ModelSpec::EncoderDecoder(c) => Self::Simulator(EncoderDecoderModel::init(c, &mut rng)?),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Self::Predictor(m) => ModelSpec::DecoderOnly(m.cfg.clone()),
            Self::Simulator(m) => ModelSpec::EncoderDecoder(m.cfg.clone()),
        }
    }

    pub fn visit_params<F: FnMut(&str, &mut Param<f32>)>(&mut self, f: &mut F) {
        match self {
            Self::Predictor(m) => m.visit_params(f),
            Self::Simulator(m) => m.visit_params(f),
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    pub fn n_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.numel());
        n
    }

    /// Loss and gradient accumulation for one batch. The simulator splits
    /// each sequence at its encoder context length.
    pub fn train_step(&mut self, batch: &SequenceBatch) -> Result<f64, TrainError> {
        match self {
            Self::Predictor(m) => {
                Ok(one_step_loss_backward(m, &batch.u, &batch.y, batch.batch, batch.len)?)
            }
            Self::Simulator(m) => {
                let split = datastream::split_context_query(batch, m.cfg.n_ctx_enc)?;
                Ok(sim_loss_backward(
                    m,
                    &split.ctx_u,
                    &split.ctx_y,
                    &split.query_u,
                    &split.target_y,
                    split.batch,
                    split.ctx_len,
                    split.query_len,
                )?)
            }
        }
    }

    pub fn export_params(&mut self) -> Result<ParamStore, TrainError> {
        let mut store = ParamStore::new();
        let mut err = None;
        self.visit_params(&mut |name, p| {
            if err.is_some() {
                return;
            }
            if let Err(e) = store.insert(name, p.value.shape(), p.value.data().to_vec()) {
                err = Some(e);
            }
        });
        match err {
            Some(e) => Err(e.into()),
            None => Ok(store),
        }
    }

    /// Loads parameters by name, requiring an exact one-to-one match.
    /// The error lists every offending parameter.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<(), TrainError> {
        let mut problems = Vec::new();
        let mut loaded = std::collections::HashSet::new();
        self.visit_params(&mut |name, p| match store.get(name) {
            None => problems.push(format!("missing '{name}'")),
            Some(entry) => {
                if entry.dims != p.value.shape() {
                    problems.push(format!(
                        "shape mismatch '{name}': checkpoint {:?} vs model {:?}",
                        entry.dims,
                        p.value.shape()
                    ));
                } else {
                    p.value.data_mut().copy_from_slice(&entry.data);
                    loaded.insert(name.to_string());
                }
            }
        });
        for entry in store.iter() {
            if !loaded.contains(&entry.name) && !problems.iter().any(|p| p.contains(&entry.name)) {
                problems.push(format!("unexpected '{}'", entry.name));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::WarmStart(problems.join("; ")))
        }
    }

    /// Rebuilds a model from a checkpoint (weights only).
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let mut model = Self::init(&ckpt.meta.model, ckpt.meta.global_seed)?;
        model.load_params(&ckpt.params)?;
        Ok(model)
    }
}

/// Copies checkpoint weights into a freshly built model for a new run.
/// The architectures must match exactly; optimizer state is not transferred.
pub fn warm_start(checkpoint_path: &Path, new_spec: &ModelSpec) -> Result<MetaModel, TrainError> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    if ckpt.meta.model != *new_spec {
        return Err(TrainError::WarmStart(format!(
            "checkpoint architecture {:?} differs from requested {:?}",
            ckpt.meta.model, new_spec
        )));
    }
    // Seed is irrelevant here: every weight is overwritten.
    let mut model = MetaModel::init(new_spec, ckpt.meta.global_seed)?;
    model.load_params(&ckpt.params)?;
    Ok(model)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Scheduled learning rate: linear warmup to the configured constant.
fn lr_at(cfg: &TrainConfig, t: u64) -> f64 {
    if cfg.warmup_iters == 0 || t >= cfg.warmup_iters {
        cfg.adamw.lr
    } else {
        cfg.adamw.lr * (t as f64 / cfg.warmup_iters as f64)
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(model: &mut MetaModel, max_norm: f64) -> f64 {
    let mut sum_sq = 0.0f64;
    model.visit_params(&mut |_, p| {
        for &g in p.grad.data() {
            sum_sq += (g as f64) * (g as f64);
        }
    });
    let norm = sum_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        model.visit_params(&mut |_, p| {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        });
    }
    norm
}

fn fmt9(v: f64) -> String {
    format!("{:.8e}", v)
}

/// Runs the meta-training loop and writes checkpoints plus `train_log.csv`
/// into `out_dir`. Returns the final checkpoint.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let mut model = match &cfg.warm_start_path {
        Some(path) => warm_start(path, &cfg.model)?,
        None => MetaModel::init(&cfg.model, cfg.stream.global_seed)?,
    };
    let mut opt = AdamW::<f32>::new(cfg.adamw);

    let log_path = out_dir.join("train_log.csv");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log, "iteration,loss,ema_loss,wall_time_s")?;

    let started = Instant::now();
    let mut ema = f64::NAN;
    let mut last_loss = f64::NAN;

    for t in 1..=cfg.n_iterations {
        let batch = datastream::make_batch(&cfg.stream, t)?;
        model.zero_grads();
        let loss = model.train_step(&batch)?;
        last_loss = loss;

        if !loss.is_finite() {
            let diagnostic = out_dir.join("ckpt_diagnostic.bin");
            let ckpt = build_checkpoint(cfg, &mut model, &mut opt, t, last_loss, ema)?;
            ckpt.save(&diagnostic)?;
            return Err(TrainError::NonFiniteLoss {
                iteration: t,
                diagnostic,
            });
        }

        if let Some(max_norm) = cfg.clip_norm {
            clip_global_norm(&mut model, max_norm);
        }
        let lr_t = lr_at(cfg, t);
        let model_ref = &mut model;
        opt.step(lr_t, |f| model_ref.visit_params(&mut |n, p| f(n, p)))?;

        ema = if ema.is_nan() {
            loss
        } else {
            EMA_DECAY * ema + (1.0 - EMA_DECAY) * loss
        };

        if t == 1 || t == cfg.n_iterations || (cfg.log_every > 0 && t % cfg.log_every == 0) {
            writeln!(
                log,
                "{t},{},{},{:.3}",
                fmt9(loss),
                fmt9(ema),
                started.elapsed().as_secs_f64()
            )?;
            log.flush()?; // keep the log live for long runs
        }

        if cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 && t != cfg.n_iterations {
            let ckpt = build_checkpoint(cfg, &mut model, &mut opt, t, last_loss, ema)?;
            let path = out_dir.join(format!("ckpt_{t}.bin"));
            ckpt.save(&path)?;
            write_latest(out_dir, &path)?;
        }
    }
    log.flush()?;

    let ckpt = build_checkpoint(cfg, &mut model, &mut opt, cfg.n_iterations, last_loss, ema)?;
    let path = out_dir.join(format!("ckpt_{}.bin", cfg.n_iterations));
    ckpt.save(&path)?;
    write_latest(out_dir, &path)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        checkpoint_path: path,
        log_path,
    })
}

fn build_checkpoint(
    cfg: &TrainConfig,
    model: &mut MetaModel,
    opt: &mut AdamW<f32>,
    iteration: u64,
    last_loss: f64,
    ema_loss: f64,
) -> Result<Checkpoint, TrainError> {
    let params = model.export_params()?;
    let (adamw_step, opt_m, opt_v) = opt.export_state()?;
    Ok(Checkpoint {
        meta: CheckpointMeta {
            model: cfg.model.clone(),
            iteration,
            global_seed: cfg.stream.global_seed,
            adamw: cfg.adamw,
            adamw_step,
            last_loss,
            ema_loss,
        },
        params,
        opt_m,
        opt_v,
    })
}

/// Marker file naming the newest checkpoint in the directory.
pub fn write_latest(dir: &Path, checkpoint: &Path) -> Result<(), TrainError> {
    let name = checkpoint
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| TrainError::Config("checkpoint path has no file name".into()))?;
    std::fs::write(dir.join("latest"), format!("{name}\n"))?;
    Ok(())
}

/// Resolves the `latest` marker in a checkpoint directory.
pub fn read_latest(dir: &Path) -> Result<PathBuf, TrainError> {
    let content = std::fs::read_to_string(dir.join("latest"))?;
    Ok(dir.join(content.trim()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastream::SystemClass;
    use crate::metamodel::{DecoderOnlyConfig, EncoderDecoderConfig};
    use crate::sysgen::EigenRegion;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "metasysid-trainer-{tag}-{}",
            std::process::id()
        ));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_predictor_cfg(seed: u64, iters: u64) -> TrainConfig {
        TrainConfig {
            stream: StreamConfig {
                system_class: SystemClass::Lti,
                seq_len: 17,
                batch_size: 4,
                global_seed: seed,
                region: EigenRegion::nominal(),
                order_min: 1,
                order_max: 5,
                wh_order_min: 1,
                wh_order_max: 5,
                mlp_hidden: 32,
                noise_std: 0.0,
            },
            model: ModelSpec::DecoderOnly(DecoderOnlyConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 16,
                n_ctx: 16,
                n_u: 1,
                n_y: 1,
            }),
            n_iterations: iters,
            adamw: AdamWConfig {
                lr: 3e-4,
                ..AdamWConfig::default()
            },
            warmup_iters: 10,
            clip_norm: Some(1.0),
            checkpoint_every: 0,
            log_every: 1,
            warm_start_path: None,
        }
    }

    fn tiny_simulator_cfg(seed: u64, iters: u64) -> TrainConfig {
        TrainConfig {
            stream: StreamConfig {
                system_class: SystemClass::Lti,
                seq_len: 24,
                batch_size: 4,
                global_seed: seed,
                region: EigenRegion::nominal(),
                order_min: 1,
                order_max: 5,
                wh_order_min: 1,
                wh_order_max: 5,
                mlp_hidden: 32,
                noise_std: 0.0,
            },
            model: ModelSpec::EncoderDecoder(EncoderDecoderConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 16,
                n_ctx_enc: 16,
                n_ctx_dec: 8,
                n_u: 1,
                n_y: 1,
            }),
            n_iterations: iters,
            adamw: AdamWConfig {
                lr: 3e-4,
                ..AdamWConfig::default()
            },
            warmup_iters: 10,
            clip_norm: Some(1.0),
            checkpoint_every: 0,
            log_every: 1,
            warm_start_path: None,
        }
    }

    #[test]
    fn single_iteration_contract() {
        let dir = tmp_dir("single");
        let cfg = tiny_predictor_cfg(1, 1);
        let out = train(&cfg, &dir).unwrap();
        assert_eq!(out.checkpoint.meta.iteration, 1);
        assert_eq!(out.checkpoint.meta.adamw_step, 1);
        assert!(out.checkpoint_path.exists());
        assert_eq!(
            read_latest(&dir).unwrap().file_name(),
            out.checkpoint_path.file_name()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn descent_on_learnable_task() {
        // 200 iterations on a tiny predictor: smoothed loss must drop.
        let dir = tmp_dir("descent");
        let cfg = tiny_predictor_cfg(2, 200);
        let out = train(&cfg, &dir).unwrap();
        let log = std::fs::read_to_string(&out.log_path).unwrap();
        let ema_at = |it: u64| -> f64 {
            log.lines()
                .find(|l| l.starts_with(&format!("{it},")))
                .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
                .unwrap()
        };
        let early = ema_at(10);
        let late = ema_at(200);
        assert!(
            late < early,
            "smoothed loss did not descend: {early} -> {late}"
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn training_is_reproducible() {
        let dir1 = tmp_dir("repro1");
        let dir2 = tmp_dir("repro2");
        let cfg = tiny_predictor_cfg(3, 20);
        let o1 = train(&cfg, &dir1).unwrap();
        let o2 = train(&cfg, &dir2).unwrap();
        let strip_wall = |p: &Path| -> Vec<String> {
            std::fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap())
                .collect()
        };
        assert_eq!(strip_wall(&o1.log_path), strip_wall(&o2.log_path));
        assert_eq!(o1.checkpoint.params, o2.checkpoint.params);
        std::fs::remove_dir_all(&dir1).ok();
        std::fs::remove_dir_all(&dir2).ok();
    }

    #[test]
    fn simulator_training_runs() {
        let dir = tmp_dir("sim");
        let cfg = tiny_simulator_cfg(4, 5);
        let out = train(&cfg, &dir).unwrap();
        assert!(out.checkpoint.meta.last_loss.is_finite());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let dir = tmp_dir("roundtrip");
        let cfg = tiny_predictor_cfg(5, 3);
        let out = train(&cfg, &dir).unwrap();
        let loaded = Checkpoint::load(&out.checkpoint_path).unwrap();
        assert_eq!(loaded, out.checkpoint);
        for (a, b) in loaded.params.iter().zip(out.checkpoint.params.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_and_truncated_checkpoints_rejected() {
        let dir = tmp_dir("corrupt");
        let cfg = tiny_predictor_cfg(6, 2);
        let out = train(&cfg, &dir).unwrap();
        let bytes = std::fs::read(&out.checkpoint_path).unwrap();

        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(
            Checkpoint::from_bytes(truncated),
            Err(TrainError::Integrity(_))
        ));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(TrainError::Integrity(_))
        ));

        let mut version_bumped = bytes.clone();
        version_bumped[4..8].copy_from_slice(&99u32.to_le_bytes());
        // fix the checksum so only the version differs
        let body_len = version_bumped.len() - 4;
        let crc = crc32fast::hash(&version_bumped[..body_len]);
        version_bumped[body_len..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&version_bumped),
            Err(TrainError::UnsupportedVersion { found: 99, .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn warm_start_resumes_identical_forward() {
        let dir = tmp_dir("warm");
        let cfg = tiny_predictor_cfg(7, 10);
        let out = train(&cfg, &dir).unwrap();

        let mut resumed = warm_start(&out.checkpoint_path, &cfg.model).unwrap();
        let mut original = MetaModel::from_checkpoint(&out.checkpoint).unwrap();

        let probe = datastream::make_batch(&cfg.stream, 999).unwrap();
        let (MetaModel::Predictor(a), MetaModel::Predictor(b)) = (&mut resumed, &mut original)
        else {
            panic!("expected predictors");
        };
        let (tokens, _) =
            crate::metamodel::predictor_tokens(&probe.u, &probe.y, probe.batch, probe.len);
        let ya = a.forward(&tokens).unwrap();
        let yb = b.forward(&tokens).unwrap();
        assert_eq!(ya.data(), yb.data());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn warm_start_rejects_mismatched_architecture() {
        let dir = tmp_dir("warm-mismatch");
        let cfg = tiny_predictor_cfg(8, 2);
        let out = train(&cfg, &dir).unwrap();
        let mut other = cfg.model.clone();
        if let ModelSpec::DecoderOnly(c) = &mut other {
            c.d_model = 32;
        }
        assert!(matches!(
            warm_start(&out.checkpoint_path, &other),
            Err(TrainError::WarmStart(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let dir = tmp_dir("nan");
        let cfg = tiny_predictor_cfg(9, 2);
        // Poison a checkpoint with a NaN weight, then warm-start from it.
        let out = train(&cfg, &dir).unwrap();
        let mut ckpt = out.checkpoint.clone();
        let mut poisoned = ParamStore::new();
        for entry in ckpt.params.iter() {
            let mut data = entry.data.clone();
            if entry.name == "readout.weight" {
                data[0] = f32::NAN;
            }
            poisoned.insert(&entry.name, &entry.dims, data).unwrap();
        }
        ckpt.params = poisoned;
        let poisoned_path = dir.join("poisoned.bin");
        ckpt.save(&poisoned_path).unwrap();

        let mut cfg2 = tiny_predictor_cfg(9, 2);
        cfg2.warm_start_path = Some(poisoned_path);
        let dir2 = tmp_dir("nan-run");
        let err = train(&cfg2, &dir2).unwrap_err();
        match err {
            TrainError::NonFiniteLoss {
                iteration,
                diagnostic,
            } => {
                assert_eq!(iteration, 1);
                assert!(diagnostic.exists());
            }
            other => panic!("unexpected error {other}"),
        }
        std::fs::remove_dir_all(&dir).ok();
        std::fs::remove_dir_all(&dir2).ok();
    }

    #[test]
    fn consumed_seeds_are_distinct() {
        let cfg = tiny_predictor_cfg(10, 50);
        let mut seen = std::collections::HashSet::new();
        for t in 1..=cfg.n_iterations {
            let batch = datastream::make_batch(&cfg.stream, t).unwrap();
            for s in batch.seeds {
                assert!(seen.insert(s));
            }
        }
    }

    #[test]
    fn gradient_clip_bounds_norm() {
        let cfg = tiny_predictor_cfg(11, 1);
        let mut model = MetaModel::init(&cfg.model, 11).unwrap();
        let batch = datastream::make_batch(&cfg.stream, 1).unwrap();
        model.zero_grads();
        model.train_step(&batch).unwrap();
        clip_global_norm(&mut model, 1e-3);
        let mut sum_sq = 0.0f64;
        model.visit_params(&mut |_, p| {
            sum_sq += p.grad.data().iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
        });
        assert!(sum_sq.sqrt() <= 1e-3 * 1.001);
    }
}
