//! Synthetic dataset stream.
//!
//! Each training iteration consumes a fresh batch of `b` datasets. A dataset
//! is produced by sampling a system and a white Gaussian input from a seed
//! derived with [`crate::seeds::dataset_seed`], simulating, and scaling the
//! output to zero mean and unit variance. Nothing is ever cached or reused:
//! the batch for `(config, iteration)` is a pure function of its arguments,
//! no matter how many workers generate it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

use crate::seeds::{self, tag};
use crate::sysgen::{self, EigenRegion, SysGenError};

/// Raw outputs with population std below this are resampled rather than fed
/// to the epsilon-guarded normalizer.
pub const DEGENERATE_STD: f64 = 1e-3;
const MAX_RESAMPLE_ATTEMPTS: u64 = 16;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("batch generation failed at slot {slot}: {source}")]
    Generation {
        slot: usize,
        #[source]
        source: SysGenError,
    },
    #[error("slot {slot}: no informative dataset after {attempts} resampling attempts")]
    Degenerate { slot: usize, attempts: u64 },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Malformed(String),
}

/// Which prior the stream draws systems from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemClass {
    Lti,
    Wh,
}

/// Settings for the infinite dataset stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub system_class: SystemClass,
    /// Sequence length N.
    pub seq_len: usize,
    /// Datasets per iteration b.
    pub batch_size: usize,
    pub global_seed: u64,
    #[serde(default = "EigenRegion::nominal")]
    pub region: EigenRegion,
    /// LTI state order range.
    #[serde(default = "default_order_min")]
    pub order_min: usize,
    #[serde(default = "default_order_max")]
    pub order_max: usize,
    /// Order range of each Wiener-Hammerstein LTI block.
    #[serde(default = "default_wh_order_min")]
    pub wh_order_min: usize,
    #[serde(default = "default_wh_order_max")]
    pub wh_order_max: usize,
    #[serde(default = "default_mlp_hidden")]
    pub mlp_hidden: usize,
    /// Evaluation-time context noise std (training data stays noise-free).
    #[serde(default)]
    pub noise_std: f64,
}

fn default_order_min() -> usize {
    1
}
fn default_order_max() -> usize {
    10
}
fn default_wh_order_min() -> usize {
    1
}
fn default_wh_order_max() -> usize {
    5
}
fn default_mlp_hidden() -> usize {
    sysgen::DEFAULT_MLP_HIDDEN
}

impl StreamConfig {
    pub fn validate(&self) -> Result<(), StreamError> {
        if self.seq_len < 2 {
            return Err(StreamError::InvalidArgument("seq_len must be >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(StreamError::InvalidArgument(
                "batch_size must be >= 1".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(StreamError::InvalidArgument(
                "noise_std must be >= 0".into(),
            ));
        }
        self.region
            .validate()
            .map_err(|e| StreamError::InvalidArgument(e.to_string()))?;
        Ok(())
    }
}

/// A batch of `batch` sequences of length `len`, stored row-major as `f32`
/// (SISO: one input and one output channel).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub u: Vec<f32>,
    pub y: Vec<f32>,
    pub seeds: Vec<u64>,
    pub batch: usize,
    pub len: usize,
}

impl SequenceBatch {
    pub fn u_row(&self, i: usize) -> &[f32] {
        &self.u[i * self.len..(i + 1) * self.len]
    }

    pub fn y_row(&self, i: usize) -> &[f32] {
        &self.y[i * self.len..(i + 1) * self.len]
    }
}

/// i.i.d. standard normal input sequence.
pub fn sample_input<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Scales to zero mean and unit variance (population std, epsilon-guarded).
/// Returns `(normalized, mean, std)`; invert with `y * std.max(1e-6) + mean`.
pub fn normalize_output(y: &[f64]) -> (Vec<f64>, f64, f64) {
    let (mean, std) = mean_std(y);
    let denom = std.max(1e-6);
    (y.iter().map(|v| (v - mean) / denom).collect(), mean, std)
}

/// Population mean and standard deviation.
pub fn mean_std(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A data-generating system drawn by the stream.
#[derive(Debug, Clone, PartialEq)]
pub enum SampledSystem {
    Lti(sysgen::LtiSystem),
    Wh(sysgen::WhSystem),
}

impl SampledSystem {
    pub fn as_lti(&self) -> Option<&sysgen::LtiSystem> {
        match self {
            SampledSystem::Lti(s) => Some(s),
            SampledSystem::Wh(_) => None,
        }
    }
}

/// Like [`generate_raw_dataset`] but also returns the sampled system.
pub fn generate_raw_with_system(
    seed: u64,
    cfg: &StreamConfig,
) -> Result<(Vec<f64>, Vec<f64>, SampledSystem, u64), StreamError> {
    let mut system = None;
    let (u, y, used) = generate_until_informative(seed, |attempt_seed| {
        let mut rng = seeds::rng_from(attempt_seed);
        let u = sample_input(&mut rng, cfg.seq_len);
        let y = match cfg.system_class {
            SystemClass::Lti => {
                let sys = sysgen::sample_lti(&mut rng, cfg.order_min, cfg.order_max, &cfg.region)
                    .map_err(|source| StreamError::Generation { slot: 0, source })?;
                let y = sysgen::simulate_lti(&sys, &u, None);
                system = Some(SampledSystem::Lti(sys));
                y
            }
            SystemClass::Wh => {
                let sys = sysgen::sample_wh(
                    &mut rng,
                    cfg.wh_order_min,
                    cfg.wh_order_max,
                    &cfg.region,
                    cfg.mlp_hidden,
                )
                .map_err(|source| StreamError::Generation { slot: 0, source })?;
                let y = sysgen::simulate_wh(&sys, &u);
                system = Some(SampledSystem::Wh(sys));
                y
            }
        }
        .map_err(|source| StreamError::Generation { slot: 0, source })?;
        Ok((u, y))
    })?;
    Ok((u, y, system.expect("generator ran at least once"), used))
}

/// Simulates one dataset for `seed`, resampling with derived seeds while the
/// raw output is degenerate. Returns `(u, y_raw, seed_used)`.
pub fn generate_raw_dataset(
    seed: u64,
    cfg: &StreamConfig,
) -> Result<(Vec<f64>, Vec<f64>, u64), StreamError> {
    let (u, y, _, used) = generate_raw_with_system(seed, cfg)?;
    Ok((u, y, used))
}

fn generate_until_informative(
    seed: u64,
    mut gen: impl FnMut(u64) -> Result<(Vec<f64>, Vec<f64>), StreamError>,
) -> Result<(Vec<f64>, Vec<f64>, u64), StreamError> {
    let mut attempt_seed = seed;
    for attempt in 0..MAX_RESAMPLE_ATTEMPTS {
        let (u, y) = gen(attempt_seed)?;
        let (_, std) = mean_std(&y);
        if std >= DEGENERATE_STD {
            return Ok((u, y, attempt_seed));
        }
        attempt_seed = seeds::resample_seed(seed, attempt + 1);
    }
    Err(StreamError::Degenerate {
        slot: 0,
        attempts: MAX_RESAMPLE_ATTEMPTS,
    })
}

/// Generates the batch for `(cfg, iteration)`: fresh systems, fresh inputs,
/// normalized outputs. Pure function of its arguments.
pub fn make_batch(cfg: &StreamConfig, iteration: u64) -> Result<SequenceBatch, StreamError> {
    use rayon::prelude::*;

    cfg.validate()?;
    let slots: Vec<Result<(Vec<f64>, Vec<f64>, u64), StreamError>> = (0..cfg.batch_size)
        .into_par_iter()
        .map(|slot| {
            let seed = seeds::dataset_seed(cfg.global_seed, tag::TRAIN, iteration, slot as u64);
            let (u, y_raw, used) = generate_raw_dataset(seed, cfg).map_err(|e| at_slot(e, slot))?;
            let (y_norm, _, _) = normalize_output(&y_raw);
            Ok((u, y_norm, used))
        })
        .collect();

    let n = cfg.seq_len;
    let b = cfg.batch_size;
    let mut u = Vec::with_capacity(b * n);
    let mut y = Vec::with_capacity(b * n);
    let mut seeds_out = Vec::with_capacity(b);
    for slot in slots {
        let (su, sy, seed) = slot?;
        u.extend(su.iter().map(|&v| v as f32));
        y.extend(sy.iter().map(|&v| v as f32));
        seeds_out.push(seed);
    }
    Ok(SequenceBatch {
        u,
        y,
        seeds: seeds_out,
        batch: b,
        len: n,
    })
}

fn at_slot(e: StreamError, slot: usize) -> StreamError {
    match e {
        StreamError::Generation { source, .. } => StreamError::Generation { slot, source },
        StreamError::Degenerate { attempts, .. } => StreamError::Degenerate { slot, attempts },
        other => other,
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise. With `sigma = 0` the input is returned
/// unchanged (and the RNG is not advanced).
pub fn add_output_noise<R: Rng>(y: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return y.to_vec();
    }
    y.iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Contiguous split of one sequence at index `m` (1-based semantics: the
/// context is the first `m` samples).
pub fn split_sequence<T>(x: &[T], m: usize) -> Result<(&[T], &[T]), StreamError> {
    if m == 0 || m >= x.len() {
        return Err(StreamError::InvalidArgument(format!(
            "split index {m} out of range for length {}",
            x.len()
        )));
    }
    Ok(x.split_at(m))
}

/// Row-major context/query views of a whole batch, split at `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSplit {
    pub ctx_u: Vec<f32>,
    pub ctx_y: Vec<f32>,
    pub query_u: Vec<f32>,
    pub target_y: Vec<f32>,
    pub batch: usize,
    pub ctx_len: usize,
    pub query_len: usize,
}

/// Splits every sequence of a batch into context `1..=m` and query
/// `m+1..=N`. Context and query reassemble to the original bitwise.
pub fn split_context_query(batch: &SequenceBatch, m: usize) -> Result<BatchSplit, StreamError> {
    if m == 0 || m >= batch.len {
        return Err(StreamError::InvalidArgument(format!(
            "split index {m} out of range for length {}",
            batch.len
        )));
    }
    let q = batch.len - m;
    let b = batch.batch;
    let mut out = BatchSplit {
        ctx_u: Vec::with_capacity(b * m),
        ctx_y: Vec::with_capacity(b * m),
        query_u: Vec::with_capacity(b * q),
        target_y: Vec::with_capacity(b * q),
        batch: b,
        ctx_len: m,
        query_len: q,
    };
    for i in 0..b {
        let (cu, qu) = batch.u_row(i).split_at(m);
        let (cy, ty) = batch.y_row(i).split_at(m);
        out.ctx_u.extend_from_slice(cu);
        out.ctx_y.extend_from_slice(cy);
        out.query_u.extend_from_slice(qu);
        out.target_y.extend_from_slice(ty);
    }
    Ok(out)
}

fn fmt9(v: f64) -> String {
    format!("{:.8e}", v)
}

/// Writes one dataset as a columnar text file with columns `k,u,y`.
pub fn export_dataset(path: &Path, u: &[f64], y: &[f64]) -> Result<(), StreamError> {
    if u.len() != y.len() {
        return Err(StreamError::InvalidArgument(
            "input and output lengths differ".into(),
        ));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "k,u,y")?;
    for (k, (uv, yv)) in u.iter().zip(y).enumerate() {
        writeln!(w, "{},{},{}", k + 1, fmt9(*uv), fmt9(*yv))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file written by [`export_dataset`].
pub fn import_dataset(path: &Path) -> Result<(Vec<f64>, Vec<f64>), StreamError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut u = Vec::new();
    let mut y = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "k,u,y" {
                return Err(StreamError::Malformed(format!(
                    "expected header 'k,u,y', found '{line}'"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let _k = parts.next();
        let uv = parts
            .next()
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| StreamError::Malformed(format!("bad row {i}: '{line}'")))?;
        let yv = parts
            .next()
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| StreamError::Malformed(format!("bad row {i}: '{line}'")))?;
        u.push(uv);
        y.push(yv);
    }
    Ok((u, y))
}
