use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use driftlab::data::{generate_drift_scenario, Affine2, DriftScenarioSpec};
use driftlab::eval::ExperimentReport;
use driftlab::experiment::{
    cosine_histograms, final_means, ranking_text, run_ablation, run_experiment, write_outputs, AblationKind,
    ExperimentConfig, ExperimentOutcome,
};
use driftlab::toy::{estimates_csv, run_toy, samples_csv, toy_projector_config};
use driftlab::Error;

#[derive(Parser)]
#[command(name = "driftlab", version, about = "Prototype drift compensation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write report.jsonl and summary.csv.
    Run {
        config: PathBuf,
        /// Output directory (overrides DRIFTLAB_OUT and the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-dimensional drift toy: SDC and LDC estimates of a withheld mean.
    Toy {
        /// Rotation angle in radians.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        theta: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        scale: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        tx: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        ty: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        sdc_sigma: f64,
        /// Class whose drifted mean is estimated; the others are observed.
        #[arg(long, default_value_t = 0)]
        target: usize,
        /// Draw the second epoch independently instead of moving the same points.
        #[arg(long)]
        resample: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis: projector-arch, nme-memory, feature-bank or label-fraction.
    Ablate {
        kind: String,
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine-distance histograms from a report.jsonl.
    Analyze {
        report: PathBuf,
        #[arg(long, default_value_t = 40)]
        bins: usize,
        /// Upper edge of the histogram range.
        #[arg(long, default_value_t = 2.0)]
        max: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Invariant(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Invariant(_) => 3,
            Failure::Io(_) => 1,
        }
    }
}

/// Errors raised while validating user input map to exit 2.
fn config_failure(e: Error) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime_failure(e: Error) -> Failure {
    match e {
        Error::Config(_) => Failure::Config(e.to_string()),
        Error::Io(_) => Failure::Io(e.to_string()),
        other => Failure::Invariant(other.to_string()),
    }
}

fn io_failure(e: impl std::fmt::Display) -> Failure {
    Failure::Io(e.to_string())
}

fn out_dir(flag: Option<PathBuf>, fallback: &Path) -> PathBuf {
    flag.or_else(|| std::env::var_os("DRIFTLAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| fallback.to_path_buf())
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let cfg = ExperimentConfig::load(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn print_means(outcome: &ExperimentOutcome) {
    for (m, v, a) in final_means(&outcome.report) {
        let tag = if v.is_empty() { m } else { format!("{m} [{v}]") };
        println!("{tag:<28} final A_last {a:.4}");
    }
}

fn cmd_run(config: PathBuf, out: Option<PathBuf>) -> Result<(), Failure> {
    let (cfg, base) = load_config(&config)?;
    let dir = out_dir(out, &cfg.output_dir);
    let outcome = run_experiment(&cfg, &base, "").map_err(runtime_failure)?;
    write_outputs(&dir, &cfg, &outcome).map_err(io_failure)?;
    print_means(&outcome);
    println!("wrote {}", dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_toy(
    theta: f64,
    scale: f64,
    tx: f64,
    ty: f64,
    seed: u64,
    sdc_sigma: f64,
    target: usize,
    resample: bool,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut spec = DriftScenarioSpec::with_transform(
        Affine2 {
            theta,
            scale,
            translation: [tx, ty],
        },
        seed,
    );
    spec.resample = resample;
    let scenario = generate_drift_scenario(&spec).map_err(config_failure)?;
    let reference: Vec<usize> = (0..scenario.num_classes()).filter(|&c| c != target).collect();
    let r = run_toy(&scenario, &reference, target, sdc_sigma, &toy_projector_config()).map_err(config_failure)?;
    let dir = out_dir(out, Path::new("driftlab-out"));
    std::fs::create_dir_all(&dir).map_err(io_failure)?;
    std::fs::write(dir.join("toy_samples.csv"), samples_csv(&scenario)).map_err(io_failure)?;
    std::fs::write(dir.join("toy_estimates.csv"), estimates_csv(&r)).map_err(io_failure)?;
    println!("true mean    ({:.6}, {:.6})", r.true_mean[0], r.true_mean[1]);
    println!("sdc estimate ({:.6}, {:.6})  error {:.3e}", r.sdc_estimate[0], r.sdc_estimate[1], r.sdc_error);
    println!("ldc estimate ({:.6}, {:.6})  error {:.3e}", r.ldc_estimate[0], r.ldc_estimate[1], r.ldc_error);
    if r.sdc_fallback {
        println!("note: SDC kernel weights underflowed; plain mean drift used");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_ablate(kind: String, config: PathBuf, out: Option<PathBuf>) -> Result<(), Failure> {
    let kind: AblationKind = kind.parse().map_err(config_failure)?;
    let (cfg, base) = load_config(&config)?;
    let dir = out_dir(out, &cfg.output_dir);
    let outcome = run_ablation(kind, &cfg, &base).map_err(runtime_failure)?;
    write_outputs(&dir, &cfg, &outcome).map_err(io_failure)?;
    let ranking = ranking_text(&outcome.report);
    std::fs::write(dir.join("ranking.txt"), &ranking).map_err(io_failure)?;
    print_means(&outcome);
    print!("{ranking}");
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_analyze(report: PathBuf, bins: usize, max: f64, out: Option<PathBuf>) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&report)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", report.display())))?;
    let rep = ExperimentReport::from_jsonl(&text).map_err(|e| Failure::Config(format!("{}: {e}", report.display())))?;
    let hists = cosine_histograms(&rep, bins, max).map_err(config_failure)?;
    let fallback = report.parent().unwrap_or(Path::new("."));
    let dir = out_dir(out, fallback);
    std::fs::create_dir_all(&dir).map_err(io_failure)?;
    for (stem, h) in &hists {
        let path = dir.join(format!("hist_{stem}.csv"));
        std::fs::write(&path, h.to_csv()).map_err(io_failure)?;
        println!("{}: {} distances", path.display(), h.counts.iter().sum::<usize>());
    }
    if hists.is_empty() {
        println!("no cosine distances in report");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out } => cmd_run(config, out),
        Command::Toy {
            theta,
            scale,
            tx,
            ty,
            seed,
            sdc_sigma,
            target,
            resample,
            out,
        } => cmd_toy(theta, scale, tx, ty, seed, sdc_sigma, target, resample, out),
        Command::Ablate { kind, config, out } => cmd_ablate(kind, config, out),
        Command::Analyze { report, bins, max, out } => cmd_analyze(report, bins, max, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Config(m) | Failure::Invariant(m) | Failure::Io(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
