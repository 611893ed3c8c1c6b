//! Evaluation over fresh test-system ensembles.
//!
//! Test systems are drawn from a seed space tagged disjointly from training,
//! as a pure function of `(eval_seed, system index)`. Forward passes run in
//! `f32`, metric accumulation in `f64`. Per-system work is batched; batch
//! boundaries cannot change results because every sequence is processed
//! independently by the models.
//!
//! Evaluation-time normalization uses context statistics only (training uses
//! full-sequence statistics; at test time only the context is observable).
//! Context noise is added to the normalized context outputs; the rmse is
//! always computed against noise-free targets.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastream::{self, StreamConfig, StreamError};
use crate::metamodel::{channel_tensor, context_tokens, predictor_tokens};
use crate::metamodel::{DecoderOnlyModel, EncoderDecoderModel};
use crate::nncore::NnError;
use crate::seeds::{self, tag};
use crate::sysgen::EigenRegion;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Systems evaluated per forward batch.
const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Prediction,
    Simulation,
}

/// Settings echoed into every report header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub task: EvalTask,
    pub method: String,
    pub system_class: datastream::SystemClass,
    pub region: EigenRegion,
    pub n_test: usize,
    pub sigma_e: f64,
    pub eval_seed: u64,
    pub seq_len: usize,
    /// Context length for simulation; fed-token count for prediction.
    pub context_len: usize,
    pub skip: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub settings: EvalSettings,
    pub seeds: Vec<u64>,
    pub per_system_rmse: Vec<f64>,
    /// Prediction only: aggregate without the transient skip.
    pub per_system_rmse_noskip: Vec<f64>,
    pub rmse_mean: f64,
    pub rmse_median: f64,
    pub rmse_mean_noskip: f64,
    /// `(time step label, mean absolute error across systems)`.
    pub curve: Vec<(usize, f64)>,
}

impl EvalReport {
    pub fn mae_at_step(&self, step: usize) -> Option<f64> {
        self.curve
            .iter()
            .find(|(label, _)| *label == step)
            .map(|(_, v)| *v)
    }

    /// Least-squares slope of the error curve (per step).
    pub fn curve_trend_slope(&self) -> f64 {
        let n = self.curve.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mean_x = self.curve.iter().map(|(s, _)| *s as f64).sum::<f64>() / n;
        let mean_y = self.curve.iter().map(|(_, v)| *v).sum::<f64>() / n;
        let mut num = 0.0;
        let mut den = 0.0;
        for (s, v) in &self.curve {
            let dx = *s as f64 - mean_x;
            num += dx * (*v - mean_y);
            den += dx * dx;
        }
        num / den
    }
}

/// Root mean square error over steps `>= skip`.
pub fn rmse(y: &[f64], y_hat: &[f64], skip: usize) -> Result<f64, EvalError> {
    if y.len() != y_hat.len() {
        return Err(EvalError::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            y.len(),
            y_hat.len()
        )));
    }
    if skip >= y.len() {
        return Err(EvalError::InvalidArgument(format!(
            "skip {} out of range for length {}",
            skip,
            y.len()
        )));
    }
    let mut acc = 0.0;
    for k in skip..y.len() {
        let e = y[k] - y_hat[k];
        acc += e * e;
    }
    Ok((acc / (y.len() - skip) as f64).sqrt())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn noise_rng(eval_seed: u64, sys_index: u64, sigma: f64) -> rand_chacha::ChaCha8Rng {
    seeds::rng_from(seeds::mix_words(&[
        eval_seed,
        tag::NOISE,
        sys_index,
        sigma.to_bits(),
    ]))
}

struct TestSequence {
    seed: u64,
    u: Vec<f64>,
    /// Normalized noise-free output.
    y: Vec<f64>,
    /// Normalized output with context noise applied (equals `y` when
    /// `sigma_e` is zero).
    y_noisy: Vec<f64>,
}

/// Draws the deterministic test ensemble. `ctx_stats_len` selects how many
/// leading samples define the normalization statistics; `noise_len` how many
/// leading samples receive context noise.
fn test_ensemble(
    stream: &StreamConfig,
    n_test: usize,
    eval_seed: u64,
    ctx_stats_len: usize,
    noise_len: usize,
    sigma_e: f64,
) -> Result<Vec<TestSequence>, EvalError> {
    use rayon::prelude::*;
    let sequences: Vec<Result<TestSequence, EvalError>> = (0..n_test)
        .into_par_iter()
        .map(|i| {
            let seed = seeds::dataset_seed(eval_seed, tag::EVAL, i as u64, 0);
            let (u, y_raw, used) = datastream::generate_raw_dataset(seed, stream)?;
            let (mean, std) = datastream::mean_std(&y_raw[..ctx_stats_len]);
            let denom = std.max(1e-6);
            let y: Vec<f64> = y_raw.iter().map(|v| (v - mean) / denom).collect();
            let mut y_noisy = y.clone();
            if sigma_e > 0.0 {
                let mut rng = noise_rng(eval_seed, i as u64, sigma_e);
                let noisy_head =
                    datastream::add_output_noise(&y[..noise_len], sigma_e, &mut rng);
                y_noisy[..noise_len].copy_from_slice(&noisy_head);
            }
            Ok(TestSequence {
                seed: used,
                u,
                y,
                y_noisy,
            })
        })
        .collect();
    sequences.into_iter().collect()
}

/// Teacher-forced one-step-ahead evaluation: the model reads `(u_j, y_j)`
/// pairs (possibly noise-corrupted) and each prediction is scored against
/// the clean `y_{j+1}`.
pub fn eval_prediction(
    model: &mut DecoderOnlyModel<f32>,
    stream: &StreamConfig,
    n_test: usize,
    sigma_e: f64,
    eval_seed: u64,
    skip: usize,
) -> Result<EvalReport, EvalError> {
    if n_test == 0 {
        return Err(EvalError::InvalidArgument("n_test must be > 0".into()));
    }
    let n = stream.seq_len;
    if n < 2 || n - 1 > model.cfg.n_ctx {
        return Err(EvalError::InvalidArgument(format!(
            "sequence length {n} incompatible with n_ctx {}",
            model.cfg.n_ctx
        )));
    }
    let horizon = n - 1;
    if skip >= horizon {
        return Err(EvalError::InvalidArgument(format!(
            "skip {skip} out of range for horizon {horizon}"
        )));
    }
    // Prediction is teacher-forced: the whole sequence acts as context, so
    // normalization statistics come from all of it.
    let ensemble = test_ensemble(stream, n_test, eval_seed, n, n, sigma_e)?;

    let mut per_rmse = Vec::with_capacity(n_test);
    let mut per_rmse_noskip = Vec::with_capacity(n_test);
    let mut abs_err_sums = vec![0.0f64; horizon];
    let seeds_out: Vec<u64> = ensemble.iter().map(|s| s.seed).collect();

    for chunk in ensemble.chunks(EVAL_BATCH) {
        let b = chunk.len();
        let mut u = Vec::with_capacity(b * n);
        let mut y_fed = Vec::with_capacity(b * n);
        for s in chunk {
            u.extend(s.u.iter().map(|&v| v as f32));
            y_fed.extend(s.y_noisy.iter().map(|&v| v as f32));
        }
        let (tokens, _) = predictor_tokens(&u, &y_fed, b, n);
        let pred = model.forward(&tokens)?;
        for (bi, s) in chunk.iter().enumerate() {
            let targets: Vec<f64> = s.y[1..].to_vec();
            let mut hat = Vec::with_capacity(horizon);
            for j in 0..horizon {
                hat.push(pred.data()[bi * horizon + j] as f64);
            }
            per_rmse.push(rmse(&targets, &hat, skip)?);
            per_rmse_noskip.push(rmse(&targets, &hat, 0)?);
            for j in 0..horizon {
                abs_err_sums[j] += (targets[j] - hat[j]).abs();
            }
        }
    }

    let curve = abs_err_sums
        .iter()
        .enumerate()
        .map(|(j, s)| (j + 2, s / n_test as f64)) // label = 1-based target step
        .collect();
    Ok(EvalReport {
        settings: EvalSettings {
            task: EvalTask::Prediction,
            method: "transformer".into(),
            system_class: stream.system_class,
            region: stream.region,
            n_test,
            sigma_e,
            eval_seed,
            seq_len: n,
            context_len: horizon,
            skip,
        },
        seeds: seeds_out,
        rmse_mean: per_rmse.iter().sum::<f64>() / n_test as f64,
        rmse_median: median(&per_rmse),
        rmse_mean_noskip: per_rmse_noskip.iter().sum::<f64>() / n_test as f64,
        per_system_rmse: per_rmse,
        per_system_rmse_noskip: per_rmse_noskip,
        curve,
    })
}

/// Simulation evaluation: context (possibly noise-corrupted) through the
/// encoder, query inputs through the decoder, rmse against the noise-free
/// continuation.
pub fn eval_simulation(
    model: &mut EncoderDecoderModel<f32>,
    stream: &StreamConfig,
    m: usize,
    n_test: usize,
    sigma_e: f64,
    eval_seed: u64,
) -> Result<EvalReport, EvalError> {
    if n_test == 0 {
        return Err(EvalError::InvalidArgument("n_test must be > 0".into()));
    }
    let n = stream.seq_len;
    if m == 0 || m >= n {
        return Err(EvalError::InvalidArgument(format!(
            "context split {m} out of range for length {n}"
        )));
    }
    if m > model.cfg.n_ctx_enc || n - m > model.cfg.n_ctx_dec {
        return Err(EvalError::InvalidArgument(format!(
            "split {m}/{} exceeds model windows {}/{}",
            n - m,
            model.cfg.n_ctx_enc,
            model.cfg.n_ctx_dec
        )));
    }
    let q = n - m;
    // Only the context is observable at test time: statistics and noise both
    // restricted to the first m samples.
    let ensemble = test_ensemble(stream, n_test, eval_seed, m, m, sigma_e)?;

    let mut per_rmse = Vec::with_capacity(n_test);
    let mut abs_err_sums = vec![0.0f64; q];
    let seeds_out: Vec<u64> = ensemble.iter().map(|s| s.seed).collect();

    for chunk in ensemble.chunks(EVAL_BATCH) {
        let b = chunk.len();
        let mut ctx_u = Vec::with_capacity(b * m);
        let mut ctx_y = Vec::with_capacity(b * m);
        let mut query_u = Vec::with_capacity(b * q);
        for s in chunk {
            ctx_u.extend(s.u[..m].iter().map(|&v| v as f32));
            ctx_y.extend(s.y_noisy[..m].iter().map(|&v| v as f32));
            query_u.extend(s.u[m..].iter().map(|&v| v as f32));
        }
        let ctx = context_tokens(&ctx_u, &ctx_y, b, m);
        let query = channel_tensor(&query_u, b, q);
        let pred = model.forward_sim(&ctx, &query)?;
        for (bi, s) in chunk.iter().enumerate() {
            let targets: Vec<f64> = s.y[m..].to_vec();
            let mut hat = Vec::with_capacity(q);
            for j in 0..q {
                hat.push(pred.data()[bi * q + j] as f64);
            }
            per_rmse.push(rmse(&targets, &hat, 0)?);
            for j in 0..q {
                abs_err_sums[j] += (targets[j] - hat[j]).abs();
            }
        }
    }

    let curve = abs_err_sums
        .iter()
        .enumerate()
        .map(|(j, s)| (m + 1 + j, s / n_test as f64))
        .collect();
    Ok(EvalReport {
        settings: EvalSettings {
            task: EvalTask::Simulation,
            method: "transformer".into(),
            system_class: stream.system_class,
            region: stream.region,
            n_test,
            sigma_e,
            eval_seed,
            seq_len: n,
            context_len: m,
            skip: 0,
        },
        seeds: seeds_out,
        rmse_mean: per_rmse.iter().sum::<f64>() / n_test as f64,
        rmse_median: median(&per_rmse),
        rmse_mean_noskip: per_rmse.iter().sum::<f64>() / n_test as f64,
        per_system_rmse: per_rmse.clone(),
        per_system_rmse_noskip: per_rmse,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sigma_e: f64,
    pub rmse_mean: f64,
    pub rmse_median: f64,
}

#[derive(Debug)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<EvalReport>,
}

/// One simulation evaluation per noise level over a shared ensemble (the
/// same systems and inputs at every sigma).
pub fn noise_sweep(
    model: &mut EncoderDecoderModel<f32>,
    stream: &StreamConfig,
    m: usize,
    n_test: usize,
    sigma_grid: &[f64],
    eval_seed: u64,
) -> Result<SweepReport, EvalError> {
    if sigma_grid.is_empty() {
        return Err(EvalError::InvalidArgument("empty noise grid".into()));
    }
    if sigma_grid.iter().any(|s| *s < 0.0) {
        return Err(EvalError::InvalidArgument(
            "noise levels must be non-negative".into(),
        ));
    }
    let mut rows = Vec::with_capacity(sigma_grid.len());
    let mut reports = Vec::with_capacity(sigma_grid.len());
    for &sigma in sigma_grid {
        let report = eval_simulation(model, stream, m, n_test, sigma, eval_seed)?;
        rows.push(SweepRow {
            sigma_e: sigma,
            rmse_mean: report.rmse_mean,
            rmse_median: report.rmse_median,
        });
        reports.push(report);
    }
    Ok(SweepReport { rows, reports })
}

#[derive(Debug)]
pub struct ShiftReport {
    pub nominal: EvalReport,
    pub shifted: EvalReport,
}

/// Evaluates the same model on the nominal region and on a shifted
/// eigenvalue region.
pub fn distribution_shift_eval(
    model: &mut EncoderDecoderModel<f32>,
    stream: &StreamConfig,
    shifted_region: EigenRegion,
    m: usize,
    n_test: usize,
    eval_seed: u64,
) -> Result<ShiftReport, EvalError> {
    let nominal = eval_simulation(model, stream, m, n_test, 0.0, eval_seed)?;
    let mut shifted_stream = stream.clone();
    shifted_stream.region = shifted_region;
    let shifted = eval_simulation(model, &shifted_stream, m, n_test, 0.0, eval_seed)?;
    Ok(ShiftReport { nominal, shifted })
}

fn fmt9(v: f64) -> String {
    format!("{:.8e}", v)
}

/// Writes the per-system report; the error curve goes to a sibling file
/// (`<stem>_curve.csv`). Returns the curve path when one was written.
pub fn export_report(report: &EvalReport, path: &Path) -> Result<Option<PathBuf>, EvalError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let s = &report.settings;
    writeln!(w, "# task={:?}", s.task)?;
    writeln!(w, "# method={}", s.method)?;
    writeln!(w, "# system_class={:?}", s.system_class)?;
    writeln!(
        w,
        "# region=mag({},{}) phase({},{})",
        fmt9(s.region.mag_min),
        fmt9(s.region.mag_max),
        fmt9(s.region.phase_min),
        fmt9(s.region.phase_max)
    )?;
    writeln!(w, "# n_test={}", s.n_test)?;
    writeln!(w, "# sigma_e={}", fmt9(s.sigma_e))?;
    writeln!(w, "# eval_seed={}", s.eval_seed)?;
    writeln!(w, "# seq_len={}", s.seq_len)?;
    writeln!(w, "# context_len={}", s.context_len)?;
    writeln!(w, "# skip={}", s.skip)?;
    writeln!(w, "method,system,seed,rmse,rmse_noskip")?;
    for i in 0..report.per_system_rmse.len() {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.method,
            i,
            report.seeds[i],
            fmt9(report.per_system_rmse[i]),
            fmt9(report.per_system_rmse_noskip[i])
        )?;
    }
    writeln!(w, "# rmse_mean={}", fmt9(report.rmse_mean))?;
    writeln!(w, "# rmse_median={}", fmt9(report.rmse_median))?;
    writeln!(w, "# rmse_mean_noskip={}", fmt9(report.rmse_mean_noskip))?;

    let curve_path = if report.curve.is_empty() {
        writeln!(w, "# curve=omitted (empty)")?;
        None
    } else {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        let curve_path = path.with_file_name(format!("{stem}_curve.csv"));
        let mut cw = std::io::BufWriter::new(std::fs::File::create(&curve_path)?);
        writeln!(cw, "step,mean_abs_error")?;
        for (step, mae) in &report.curve {
            writeln!(cw, "{},{}", step, fmt9(*mae))?;
        }
        cw.flush()?;
        writeln!(
            w,
            "# curve={}",
            curve_path.file_name().unwrap().to_str().unwrap()
        )?;
        Some(curve_path)
    };
    w.flush()?;
    Ok(curve_path)
}

/// Writes the noise-sweep table.
pub fn export_sweep(sweep: &SweepReport, method: &str, path: &Path) -> Result<(), EvalError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "method,sigma_e,rmse_mean,rmse_median")?;
    for row in &sweep.rows {
        writeln!(
            w,
            "{},{},{},{}",
            method,
            fmt9(row.sigma_e),
            fmt9(row.rmse_mean),
            fmt9(row.rmse_median)
        )?;
    }
    w.flush()?;
    Ok(())
}
