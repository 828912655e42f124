use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pipesgd_harness::calibrate::{calibrate, MIN_REPS};
use pipesgd_harness::charts;
use pipesgd_harness::compare::{self, MeasuredRun};
use pipesgd_harness::config::{ExperimentConfig, KeyValues};
use pipesgd_harness::experiment::{parse_metrics_csv, run_experiment, write_outputs};
use pipesgd_harness::predict::{self, PredictInput};
use pipesgd_harness::HarnessError;

#[derive(Parser)]
#[command(name = "pipesgd", version, about = "Run and model decentralized pipelined SGD experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train end-to-end and write metrics, breakdown, trace and charts.
    Run(ExperimentArgs),
    /// Measure stage times and network parameters for the configured cluster.
    Calibrate {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Repetitions per probe (at least 20).
        #[arg(long, default_value_t = MIN_REPS)]
        reps: usize,
    },
    /// Evaluate the timing model on a `key = value` parameter file.
    Predict {
        input: PathBuf,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        k: Option<u64>,
        /// Also write the prediction as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare measured runs against predictions from a calibration file.
    Compare {
        #[arg(long)]
        calibration: PathBuf,
        /// Run output directories (each with summary.txt).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Render charts from run outputs.
    Chart {
        /// Run output directories; each contributes its metrics.csv and breakdown.csv.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "charts")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = ["none", "trunc16", "quant8"])]
    codec: Option<String>,
    #[arg(long)]
    k: Option<u64>,
    #[arg(long)]
    warmup_epochs: Option<u64>,
    #[arg(long, value_parser = ["inproc", "tcp"])]
    transport: Option<String>,
    #[arg(long)]
    roster: Option<PathBuf>,
    /// This process's rank for the tcp transport.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    inject_alpha_ms: Option<f64>,
    #[arg(long)]
    inject_mbps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn config(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut kv = match &self.config {
            Some(path) => KeyValues::load(path)?,
            None => KeyValues::new(),
        };
        let mut flags = KeyValues::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                flags.set(k, v);
            }
        };
        put("mode", self.mode.clone());
        put("workers", self.workers.map(|v| v.to_string()));
        put("codec", self.codec.clone());
        put("k", self.k.map(|v| v.to_string()));
        put("warmup_epochs", self.warmup_epochs.map(|v| v.to_string()));
        put("transport", self.transport.clone());
        put("roster", self.roster.as_ref().map(|p| p.display().to_string()));
        put("rank", self.rank.map(|v| v.to_string()));
        put("inject_alpha_ms", self.inject_alpha_ms.map(|v| v.to_string()));
        put("inject_mbps", self.inject_mbps.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("iterations", self.iters.map(|v| v.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("--set {s:?}: expected key=value")))?;
            flags.set(k.trim(), v.trim());
        }
        kv.merge(&flags);
        ExperimentConfig::from_pairs(&kv)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pipesgd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run(args) => {
            let config = args.config()?;
            let result = run_experiment(&config)?;
            write_outputs(&result, &config.out_dir)?;
            if result.rank == 0 {
                print!("{}", fs::read_to_string(config.out_dir.join("summary.txt"))?);
            }
            Ok(())
        }
        Command::Calibrate { exp, reps } => {
            let config = exp.config()?;
            if let Some(cal) = calibrate(&config, reps)? {
                let text = cal.to_pairs().to_text();
                fs::create_dir_all(&config.out_dir)?;
                fs::write(config.out_dir.join("calibration.txt"), &text)?;
                print!("{text}");
            }
            Ok(())
        }
        Command::Predict { input, iters, k, csv } => {
            let mut kv = KeyValues::load(&input)?;
            if let Some(t) = iters {
                kv.set("iterations", t);
            }
            if let Some(k) = k {
                kv.set("k", k);
            }
            let prediction = predict::predict(&PredictInput::from_pairs(&kv)?);
            print!("{}", predict::report_text(&prediction));
            if let Some(path) = csv {
                fs::write(path, predict::report_csv(&prediction))?;
            }
            Ok(())
        }
        Command::Compare { calibration, runs } => {
            let cal = KeyValues::load(&calibration)?;
            let measured = runs.iter().map(|d| MeasuredRun::load(d)).collect::<Result<Vec<_>, _>>()?;
            let rows = compare::compare(&measured, &cal)?;
            print!("{}", compare::report_text(&rows));
            compare::check(&rows)
        }
        Command::Chart { runs, out } => chart(&runs, &out),
    }
}

fn read(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))
}

fn chart(runs: &[PathBuf], out: &Path) -> Result<(), HarnessError> {
    let mut series = Vec::new();
    let mut bars = Vec::new();
    for dir in runs {
        let label = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
        let rows = parse_metrics_csv(&read(&dir.join("metrics.csv"))?)?;
        if rows.is_empty() {
            return Err(HarnessError::Config(format!("{}: metrics.csv has no rows", dir.display())));
        }
        series.push(charts::accuracy_series(&label, &rows));
        let breakdown = dir.join("breakdown.csv");
        if breakdown.exists() {
            for b in charts::parse_breakdown_csv(&read(&breakdown)?)? {
                bars.push((label.clone(), b));
            }
        }
    }
    fs::create_dir_all(out)?;
    series.retain(|s| !s.points.is_empty());
    if !series.is_empty() {
        fs::write(out.join("accuracy.svg"), charts::accuracy_chart(&series)?)?;
    }
    if !bars.is_empty() {
        fs::write(out.join("breakdown.svg"), charts::breakdown_chart(&bars)?)?;
    }
    println!("charts written to {}", out.display());
    Ok(())
}
