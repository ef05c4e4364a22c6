use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use splinevio::config::RunConfig;
use splinevio::estimator::run_dataset;
use splinevio::eval::{calibration_stats, compute_ape};
use splinevio::io;
use splinevio::sim;

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const TRACE_FILE: &str = "line_delay.csv";
pub const REPORTS_FILE: &str = "reports.csv";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "splinevio", version, about = "Continuous-time rolling-shutter visual-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Simulate {
        config: PathBuf,
        /// Dataset directory; defaults to the config's output dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `sim.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the estimator over a dataset directory.
    Run {
        config: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Marginalization strategy, 1 or 2; overrides the config.
        #[arg(long)]
        strategy: Option<u8>,
        /// Overrides `estimator.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Absolute pose error of an estimate against ground truth.
    Evaluate {
        estimate: PathBuf,
        ground_truth: PathBuf,
        /// Result file; defaults to `ape.txt` next to the estimate.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Line-delay convergence statistics of a calibration trace.
    CalibReport {
        trace: PathBuf,
        /// Reference line delay, microseconds.
        #[arg(long = "ref")]
        reference: Option<f64>,
        /// Length of the final averaging window, seconds.
        #[arg(long, default_value_t = 5.0)]
        window: f64,
        /// Settling band around the reference, microseconds.
        #[arg(long, default_value_t = 10.0)]
        band: f64,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    Ok(RunConfig::load(path)?)
}

fn simulate(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    let simulation = sim::generate(&cfg.sim)?;
    let r = &simulation.report;
    if r.sparse_frames > 0 {
        log::warn!("{} frames see fewer than {} features (minimum {})", r.sparse_frames, cfg.sim.min_tracks, r.min_features);
    }
    io::write_dataset(&dir, &simulation.dataset)?;
    io::write_text(&dir.join(CONFIG_ECHO_FILE), &cfg.to_toml()?)?;
    let d = &simulation.dataset;
    println!("dataset: {}", dir.display());
    println!("imu samples: {}", d.imu.len());
    println!("frames: {}", d.frames.len());
    println!("min features per frame: {}", r.min_features);
    println!("line delay: {:.3} us", cfg.sim.line_delay_us);
    Ok(())
}

fn run(config: &Path, dataset: &Path, out: Option<PathBuf>, strategy: Option<u8>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = strategy {
        cfg.estimator.marginalization_strategy = s;
    }
    if let Some(s) = seed {
        cfg.estimator.seed = s;
    }
    cfg.validate()?;
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    let data = io::load_dataset(dataset)?;
    let output = run_dataset(&data, &cfg.estimator, &cfg.solver)?;
    if output.poses.is_empty() {
        bail!("no keyframe pose was estimated ({} frames never processed)", output.unprocessed);
    }
    if output.unprocessed > 0 {
        log::warn!("{} trailing frames lacked IMU coverage and were not processed", output.unprocessed);
    }
    io::write_trajectory(&dir.join(TRAJECTORY_FILE), &output.poses)?;
    io::write_trace(&dir.join(TRACE_FILE), &output.trace)?;
    io::write_text(&dir.join(REPORTS_FILE), &io::format_reports(&output.reports))?;

    println!("keyframe poses: {}", output.poses.len());
    println!("window solves: {}", output.reports.len());
    println!("marginalization strategy: {}", cfg.estimator.marginalization_strategy);
    println!("final line delay: {:.3} us", output.final_line_delay * 1e6);
    if let Some(gt) = &data.ground_truth {
        let ape = compute_ape(&output.poses, gt)?;
        println!("APE RMSE: {:.6} m ({} poses)", ape.rmse, ape.pairs);
    }
    println!("results: {}", dir.display());
    Ok(())
}

fn evaluate(estimate: &Path, ground_truth: &Path, out: Option<PathBuf>) -> Result<()> {
    let est = io::read_trajectory(estimate)?;
    let gt = io::read_trajectory(ground_truth)?;
    let ape = compute_ape(&est, &gt)?;
    let text = format!("ape_rmse_m = {}\nape_max_m = {}\npairs = {}\n", ape.rmse, ape.max, ape.pairs);
    let path = out.unwrap_or_else(|| estimate.with_file_name("ape.txt"));
    io::write_text(&path, &text)?;
    println!("APE RMSE: {:.6} m", ape.rmse);
    println!("APE max: {:.6} m", ape.max);
    println!("pairs: {}", ape.pairs);
    Ok(())
}

fn calib_report(trace: &Path, reference_us: Option<f64>, window: f64, band_us: f64) -> Result<()> {
    if !(window > 0.0) {
        bail!("--window must be positive");
    }
    let samples = io::read_trace(trace)?;
    let stats = calibration_stats(&samples, window, reference_us.map(|r| r * 1e-6), band_us * 1e-6)
        .with_context(|| format!("{}", trace.display()))?;
    println!("samples in last {window} s: {}", stats.samples);
    println!("mean: {:.3} us", stats.mean * 1e6);
    println!("std: {:.3} us", stats.std * 1e6);
    println!("final: {:.3} us", stats.final_value * 1e6);
    if let Some(e) = stats.error {
        println!("error: {:.3} us", e.abs() * 1e6);
        match stats.settle_time {
            Some(t) => println!("within {band_us} us from t = {t:.9}"),
            None => println!("not settled within {band_us} us"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, seed } => simulate(&config, out, seed),
        Command::Run { config, dataset, out, strategy, seed } => run(&config, &dataset, out, strategy, seed),
        Command::Evaluate { estimate, ground_truth, out } => evaluate(&estimate, &ground_truth, out),
        Command::CalibReport { trace, reference, window, band } => calib_report(&trace, reference, window, band),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
