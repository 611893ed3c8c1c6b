//! `metasysid`: meta-model system identification experiments.
//!
//! Subcommands: `generate`, `train-predictor`, `train-simulator`, `eval`,
//! `sweep-noise`, `shift-eval`, `baseline`. Each run reads one TOML config,
//! writes into a fresh timestamped directory under `--out`, and leaves a
//! `latest` marker plus a resolved copy of the config it actually used.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use metasysid_core::baseline::{self, ArxModel};
use metasysid_core::datastream::{self, SystemClass};
use metasysid_core::eval::{
    distribution_shift_eval, eval_prediction, eval_simulation, export_report, export_sweep,
    noise_sweep, rmse, EvalReport,
};
use metasysid_core::sysgen::EigenRegion;
use metasysid_core::trainer::{self, Checkpoint, MetaModel};
use metasysid_core::ModelSpec;

/// Exit code for `--assert` threshold failures.
const EXIT_ASSERT_FAILED: i32 = 2;

#[derive(Parser)]
#[command(name = "metasysid", version, about = "In-context learning for system identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Parent directory for the timestamped run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides `stream.global_seed` from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with code 2 when the command's acceptance thresholds fail.
    #[arg(long, default_value_t = false)]
    assert: bool,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint file, or a directory containing a `latest` marker.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory of `dataset_*.csv` files; generated from the config when
    /// absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes one batch of datasets as columnar files plus a manifest.
    Generate(CommonArgs),
    /// Trains the decoder-only one-step predictor.
    TrainPredictor(CommonArgs),
    /// Trains the encoder-decoder simulator.
    TrainSimulator(CommonArgs),
    /// Evaluates a checkpoint on a fresh test ensemble.
    Eval(CheckpointArgs),
    /// Simulation rmse across a grid of context-noise levels.
    SweepNoise(CheckpointArgs),
    /// Compares nominal-region and shifted-region performance.
    ShiftEval(CheckpointArgs),
    /// Classical per-dataset baselines (ARX one-step, subspace simulation).
    Baseline(BaselineArgs),
}

fn main() -> Result<()> {
    configure_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::TrainPredictor(args) => cmd_train(args, Arch::Predictor),
        Command::TrainSimulator(args) => cmd_train(args, Arch::Simulator),
        Command::Eval(args) => cmd_eval(args),
        Command::SweepNoise(args) => cmd_sweep_noise(args),
        Command::ShiftEval(args) => cmd_shift_eval(args),
        Command::Baseline(args) => cmd_baseline(args),
    }
}

/// `METASYSID_THREADS` caps worker parallelism.
fn configure_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("METASYSID_THREADS") {
        let n: usize = raw
            .parse()
            .with_context(|| format!("METASYSID_THREADS='{raw}' is not a thread count"))?;
        if n == 0 {
            bail!("METASYSID_THREADS must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("installing global thread pool")?;
    }
    Ok(())
}

/// Creates `out/<command>_<seconds>[_k]/` and points `out/latest` at it.
fn make_run_dir(out: &Path, command: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut dir = out.join(format!("{command}_{stamp}"));
    let mut k = 1;
    while dir.exists() {
        dir = out.join(format!("{command}_{stamp}_{k}"));
        k += 1;
    }
    std::fs::create_dir(&dir)?;
    let name = dir.file_name().unwrap().to_string_lossy().to_string();
    std::fs::write(out.join("latest"), format!("{name}\n"))?;
    Ok(dir)
}

fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        trainer::read_latest(path)
            .map_err(|e| anyhow::anyhow!("no usable `latest` marker in {}: {e}", path.display()))
    } else {
        Ok(path.to_path_buf())
    }
}

/// Records the inputs that live outside the config file (checkpoint, data
/// directory), completing the provenance of a run directory.
fn write_run_info(run_dir: &Path, command: &str, extras: &[(&str, String)]) -> Result<()> {
    let mut info = serde_json::Map::new();
    info.insert("command".into(), command.into());
    for (k, v) in extras {
        info.insert((*k).into(), v.clone().into());
    }
    std::fs::write(
        run_dir.join("run_info.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(info))?,
    )?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(Checkpoint, MetaModel)> {
    let resolved = resolve_checkpoint(path)?;
    let ckpt = Checkpoint::load(&resolved)
        .with_context(|| format!("loading checkpoint {}", resolved.display()))?;
    let model = MetaModel::from_checkpoint(&ckpt)?;
    Ok((ckpt, model))
}

fn cmd_generate(args: CommonArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config, args.seed)?;
    let run_dir = make_run_dir(&args.out, "generate")?;
    cfg.write_resolved(&run_dir)?;

    let batch = datastream::make_batch(&cfg.stream, 0)?;
    let mut files = Vec::new();
    for i in 0..batch.batch {
        let path = run_dir.join(format!("dataset_{i:03}.csv"));
        let u: Vec<f64> = batch.u_row(i).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = batch.y_row(i).iter().map(|&v| v as f64).collect();
        datastream::export_dataset(&path, &u, &y)?;
        files.push(path.file_name().unwrap().to_string_lossy().to_string());
    }
    let manifest = serde_json::json!({
        "system_class": cfg.stream.system_class,
        "region": cfg.stream.region,
        "seq_len": cfg.stream.seq_len,
        "order_min": order_min(&cfg.stream),
        "order_max": order_max(&cfg.stream),
        "seeds": batch.seeds,
        "files": files,
    });
    std::fs::write(
        run_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "wrote {} datasets to {}",
        batch.batch,
        run_dir.display()
    );
    Ok(())
}

fn order_min(stream: &datastream::StreamConfig) -> usize {
    match stream.system_class {
        SystemClass::Lti => stream.order_min,
        SystemClass::Wh => stream.wh_order_min,
    }
}

fn order_max(stream: &datastream::StreamConfig) -> usize {
    match stream.system_class {
        SystemClass::Lti => stream.order_max,
        SystemClass::Wh => stream.wh_order_max,
    }
}

enum Arch {
    Predictor,
    Simulator,
}

fn cmd_train(args: CommonArgs, arch: Arch) -> Result<()> {
    let cfg = RunConfig::load(&args.config, args.seed)?;
    let train_cfg = cfg.train_config()?;
    match (&arch, &train_cfg.model) {
        (Arch::Predictor, ModelSpec::DecoderOnly(_)) => {}
        (Arch::Simulator, ModelSpec::EncoderDecoder(_)) => {}
        (Arch::Predictor, _) => bail!("train-predictor needs a decoder-only [model] (n_ctx key)"),
        (Arch::Simulator, _) => {
            bail!("train-simulator needs an encoder-decoder [model] (n_ctx_enc/n_ctx_dec keys)")
        }
    }
    let name = match arch {
        Arch::Predictor => "train-predictor",
        Arch::Simulator => "train-simulator",
    };
    let run_dir = make_run_dir(&args.out, name)?;
    cfg.write_resolved(&run_dir)?;
    let outcome = trainer::train(&train_cfg, &run_dir)?;
    println!(
        "trained {} iterations; final loss {:.6} (ema {:.6})",
        outcome.checkpoint.meta.iteration,
        outcome.checkpoint.meta.last_loss,
        outcome.checkpoint.meta.ema_loss
    );
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("loss log:   {}", outcome.log_path.display());
    Ok(())
}

fn assert_gate(args: &CommonArgs, passed: bool, what: &str) -> Result<()> {
    if args.assert && !passed {
        eprintln!("assertion failed: {what}");
        std::process::exit(EXIT_ASSERT_FAILED);
    }
    Ok(())
}

fn report_summary(report: &EvalReport) -> String {
    format!(
        "rmse mean {:.6}, median {:.6} over {} systems",
        report.rmse_mean,
        report.rmse_median,
        report.per_system_rmse.len()
    )
}

fn cmd_eval(args: CheckpointArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.common.config, args.common.seed)?;
    let run_dir = make_run_dir(&args.common.out, "eval")?;
    cfg.write_resolved(&run_dir)?;
    let resolved_ckpt = resolve_checkpoint(&args.checkpoint)?;
    write_run_info(&run_dir, "eval", &[("checkpoint", resolved_ckpt.display().to_string())])?;
    let (_ckpt, mut model) = load_model(&args.checkpoint)?;

    let report = match &mut model {
        MetaModel::Predictor(m) => {
            let skip = cfg.eval.skip.unwrap_or(m.cfg.n_ctx / 4);
            eval_prediction(
                m,
                &cfg.stream,
                cfg.eval.n_test,
                cfg.eval.sigma_e,
                cfg.eval_seed(),
                skip,
            )?
        }
        MetaModel::Simulator(m) => {
            let split = cfg.eval.context_split.unwrap_or(m.cfg.n_ctx_enc);
            eval_simulation(
                m,
                &cfg.stream,
                split,
                cfg.eval.n_test,
                cfg.eval.sigma_e,
                cfg.eval_seed(),
            )?
        }
    };
    let path = run_dir.join("report.csv");
    export_report(&report, &path)?;
    println!("{}", report_summary(&report));
    println!("report: {}", path.display());
    let passed = cfg
        .eval
        .assert_rmse_max
        .is_none_or(|max| report.rmse_mean <= max);
    assert_gate(
        &args.common,
        passed,
        &format!(
            "rmse mean {:.6} exceeds assert_rmse_max {:?}",
            report.rmse_mean, cfg.eval.assert_rmse_max
        ),
    )
}

/// Non-decreasing across the grid, tolerating one adjacent dip of at most
/// 5 percent.
fn sweep_is_monotone(rows: &[(f64, f64)]) -> bool {
    let mut violations = 0;
    for w in rows.windows(2) {
        let (_, prev) = w[0];
        let (_, next) = w[1];
        if next < prev {
            if (prev - next) / prev.max(1e-12) > 0.05 {
                return false;
            }
            violations += 1;
        }
    }
    violations <= 1
}

fn cmd_sweep_noise(args: CheckpointArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.common.config, args.common.seed)?;
    let run_dir = make_run_dir(&args.common.out, "sweep-noise")?;
    cfg.write_resolved(&run_dir)?;
    let resolved_ckpt = resolve_checkpoint(&args.checkpoint)?;
    write_run_info(&run_dir, "sweep-noise", &[("checkpoint", resolved_ckpt.display().to_string())])?;
    let (_ckpt, mut model) = load_model(&args.checkpoint)?;
    let MetaModel::Simulator(ref mut m) = model else {
        bail!("sweep-noise needs an encoder-decoder checkpoint");
    };
    let split = cfg.eval.context_split.unwrap_or(m.cfg.n_ctx_enc);
    let sweep = noise_sweep(
        m,
        &cfg.stream,
        split,
        cfg.eval.n_test,
        &cfg.eval.sigma_grid,
        cfg.eval_seed(),
    )?;
    let path = run_dir.join("sweep.csv");
    export_sweep(&sweep, "transformer", &path)?;
    for (i, report) in sweep.reports.iter().enumerate() {
        export_report(report, &run_dir.join(format!("report_sigma_{i}.csv")))?;
    }
    for row in &sweep.rows {
        println!("sigma_e {:.2}: rmse mean {:.6}", row.sigma_e, row.rmse_mean);
    }
    println!("sweep table: {}", path.display());
    let pairs: Vec<(f64, f64)> = sweep.rows.iter().map(|r| (r.sigma_e, r.rmse_mean)).collect();
    assert_gate(
        &args.common,
        sweep_is_monotone(&pairs),
        "noise sweep is not monotone non-decreasing",
    )
}

fn cmd_shift_eval(args: CheckpointArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.common.config, args.common.seed)?;
    let run_dir = make_run_dir(&args.common.out, "shift-eval")?;
    cfg.write_resolved(&run_dir)?;
    let resolved_ckpt = resolve_checkpoint(&args.checkpoint)?;
    write_run_info(&run_dir, "shift-eval", &[("checkpoint", resolved_ckpt.display().to_string())])?;
    let (_ckpt, mut model) = load_model(&args.checkpoint)?;
    let MetaModel::Simulator(ref mut m) = model else {
        bail!("shift-eval needs an encoder-decoder checkpoint");
    };
    let shifted_region = EigenRegion::new(
        cfg.eval.shift_mag_min,
        cfg.eval.shift_mag_max,
        cfg.eval.shift_phase_min,
        cfg.eval.shift_phase_max,
    )
    .map_err(|e| anyhow::anyhow!("shifted region: {e}"))?;
    let split = cfg.eval.context_split.unwrap_or(m.cfg.n_ctx_enc);
    let shift = distribution_shift_eval(
        m,
        &cfg.stream,
        shifted_region,
        split,
        cfg.eval.n_test,
        cfg.eval_seed(),
    )?;
    export_report(&shift.nominal, &run_dir.join("report_nominal.csv"))?;
    export_report(&shift.shifted, &run_dir.join("report_shifted.csv"))?;
    println!("nominal: {}", report_summary(&shift.nominal));
    println!("shifted: {}", report_summary(&shift.shifted));
    let degradation = shift.shifted.rmse_mean / shift.nominal.rmse_mean.max(1e-12);
    println!("degradation factor: {degradation:.3}");
    assert_gate(
        &args.common,
        degradation >= 1.25,
        &format!("shifted rmse only {degradation:.3}x nominal (expected >= 1.25x)"),
    )
}

fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.common.config, args.common.seed)?;
    let run_dir = make_run_dir(&args.common.out, "baseline")?;
    cfg.write_resolved(&run_dir)?;
    let data_note = args
        .data
        .as_ref()
        .map(|d| d.display().to_string())
        .unwrap_or_else(|| "generated from [stream]".to_string());
    write_run_info(&run_dir, "baseline", &[("data", data_note)])?;

    // Datasets: either columnar files or a freshly generated eval ensemble.
    let mut datasets: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    match &args.data {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("dataset_") && n.ends_with(".csv"))
                })
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("no dataset_*.csv files in {}", dir.display());
            }
            for p in paths {
                let (u, y) = datastream::import_dataset(&p)?;
                datasets.push((p.file_name().unwrap().to_string_lossy().to_string(), u, y));
            }
        }
        None => {
            for i in 0..cfg.eval.n_test {
                let seed = metasysid_core::seeds::dataset_seed(
                    cfg.eval_seed(),
                    metasysid_core::seeds::tag::EVAL,
                    i as u64,
                    0,
                );
                let (u, y, _) = datastream::generate_raw_dataset(seed, &cfg.stream)?;
                datasets.push((format!("generated_{i:03}"), u, y));
            }
        }
    }

    let split = cfg
        .eval
        .context_split
        .unwrap_or_else(|| datasets[0].1.len() * 4 / 5);
    let out_path = run_dir.join("baseline.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&out_path)?);
    use std::io::Write;
    writeln!(w, "method,dataset,order,rmse")?;
    let mut subspace_rmses = Vec::new();
    let mut arx_rmses = Vec::new();
    for (name, u, y_raw) in &datasets {
        let n = y_raw.len();
        if split == 0 || split >= n {
            bail!("context split {split} out of range for dataset of length {n}");
        }
        let (mean, std) = datastream::mean_std(&y_raw[..split]);
        let y: Vec<f64> = y_raw.iter().map(|v| (v - mean) / std.max(1e-6)).collect();

        let (sim, used_order) = baseline::baseline_simulate_auto(
            &u[..split],
            &y[..split],
            &u[split..],
            cfg.eval.baseline_order,
        )?;
        let sub_rmse = rmse(&y[split..], &sim, 0)?;
        writeln!(w, "subspace,{name},{used_order},{}", fmt9(sub_rmse))?;
        subspace_rmses.push(sub_rmse);

        let arx: ArxModel = baseline::fit_arx_ls(&u[..split], &y[..split], 10, 10)?;
        let pred = arx.predict_one_step(u, &y);
        let arx_rmse = rmse(&y[split..], &pred[split..], 0)?;
        writeln!(w, "arx,{name},10,{}", fmt9(arx_rmse))?;
        arx_rmses.push(arx_rmse);
    }
    let sub_mean = subspace_rmses.iter().sum::<f64>() / subspace_rmses.len() as f64;
    let arx_mean = arx_rmses.iter().sum::<f64>() / arx_rmses.len() as f64;
    writeln!(w, "# subspace_rmse_mean={}", fmt9(sub_mean))?;
    writeln!(w, "# arx_rmse_mean={}", fmt9(arx_mean))?;
    w.flush()?;
    println!(
        "subspace mean rmse {sub_mean:.6}, arx one-step mean rmse {arx_mean:.6} over {} datasets",
        datasets.len()
    );
    println!("table: {}", out_path.display());
    let passed = cfg
        .eval
        .assert_rmse_max
        .is_none_or(|max| sub_mean <= max);
    assert_gate(
        &args.common,
        passed,
        &format!(
            "subspace rmse mean {sub_mean:.6} exceeds assert_rmse_max {:?}",
            cfg.eval.assert_rmse_max
        ),
    )
}

fn fmt9(v: f64) -> String {
    format!("{:.8e}", v)
}
