//! Batch CLI for the trajectory-JEPA lab.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 training
//! divergence, 4 evaluation error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use trajepa::curriculum::ParadigmName;
use trajepa::harness::{ExperimentConfig, Pipeline, Preset, ReportFormat};

#[derive(Parser)]
#[command(name = "trajepa", version, about = "Curriculum co-training lab for latent trajectory prediction on synthetic stays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; omit for pure preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (default: $TRAJEPA_OUT or ./runs/default).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Base preset: desk | appendix-b.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Worker threads (default: $TRAJEPA_THREADS or all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and patient-level splits.
    GenerateData(Common),
    /// Run the shared encoder initialization pretraining.
    PretrainInit(Common),
    /// Train one paradigm.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        paradigm: String,
    },
    /// Rollout-drift and collapse evaluation for all configured paradigms.
    EvalDrift(Common),
    /// Cohort latent-geometry evaluation.
    EvalGeometry(Common),
    /// Downstream probe suite.
    EvalProbes(Common),
    /// Emit tables and plots from completed stages.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "all")]
        format: String,
    },
    /// Execute every stage and emit the full report bundle.
    RunAll {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "all")]
        format: String,
    },
}

fn setup(common: &Common) -> trajepa::Result<(ExperimentConfig, PathBuf)> {
    let threads = common
        .threads
        .or_else(|| std::env::var("TRAJEPA_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        // Ignore the error if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let preset = Preset::from_str(&common.preset)?;
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path, preset)?,
        None => ExperimentConfig::preset(preset),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var("TRAJEPA_OUT").ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/default"));
    Ok((cfg, out))
}

fn run() -> trajepa::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData(common) => {
            let (cfg, out) = setup(&common)?;
            let p = Pipeline::new(cfg, &out)?;
            let (split, manifest) = p.dataset()?;
            println!(
                "dataset ready: {} train / {} val / {} test windows (T_max {}, stride {})",
                split.train.len(),
                split.val.len(),
                split.test.len(),
                manifest.t_max,
                manifest.stride
            );
        }
        Command::PretrainInit(common) => {
            let (cfg, out) = setup(&common)?;
            let p = Pipeline::new(cfg, &out)?;
            let enc = p.sft_encoder()?;
            println!(
                "initialization pretraining done: {} encoder parameters",
                enc.total_params()
            );
        }
        Command::Train { common, paradigm } => {
            let (cfg, out) = setup(&common)?;
            let name = ParadigmName::from_str(&paradigm)?;
            let p = Pipeline::new(cfg, &out)?;
            let model = p.train(name)?;
            println!(
                "trained {}: final z_std {:.4}, {} logged steps",
                name.as_str(),
                model.log.final_z_std().unwrap_or(f64::NAN),
                model.log.entries.len()
            );
        }
        Command::EvalDrift(common) => {
            let (cfg, out) = setup(&common)?;
            let p = Pipeline::new(cfg.clone(), &out)?;
            for &name in &cfg.paradigms {
                let (curve, track) = p.eval_drift(name)?;
                println!(
                    "{}: accumulation {:+.2}% (median {:+.2}%), final z_std {:.4}",
                    name.as_str(),
                    curve.accumulation_pct,
                    curve.accumulation_median_pct,
                    track.z_std.last().copied().unwrap_or(f64::NAN)
                );
            }
        }
        Command::EvalGeometry(common) => {
            let (cfg, out) = setup(&common)?;
            let p = Pipeline::new(cfg, &out)?;
            let reports = p.eval_geometry()?;
            for (name, g) in &reports {
                println!(
                    "{name}: displacement ratio {:.3}, d {:.3}, p {:.2e}",
                    g.displacement_ratio, g.cohens_d, g.mann_whitney_p
                );
            }
        }
        Command::EvalProbes(common) => {
            let (cfg, out) = setup(&common)?;
            let p = Pipeline::new(cfg, &out)?;
            let report = p.eval_probes()?;
            for cell in &report.cells {
                match (&cell.metrics, &cell.error) {
                    (Some(m), _) => println!(
                        "{} {} {}: AUROC {:.3} [{:.3}, {:.3}]",
                        cell.paradigm.as_str(),
                        cell.task,
                        cell.variant.as_str(),
                        m.auroc,
                        m.auroc_ci.0,
                        m.auroc_ci.1
                    ),
                    (None, Some(e)) => println!(
                        "{} {} {}: error: {e}",
                        cell.paradigm.as_str(),
                        cell.task,
                        cell.variant.as_str()
                    ),
                    (None, None) => {}
                }
            }
        }
        Command::Report { common, format } => {
            let (cfg, out) = setup(&common)?;
            let fmt = ReportFormat::from_str(&format)?;
            let p = Pipeline::new(cfg, &out)?;
            let bundle = p.run_all(fmt)?;
            println!(
                "report emitted to {}/report (config {})",
                out.display(),
                bundle.config_hash
            );
        }
        Command::RunAll { common, format } => {
            let (cfg, out) = setup(&common)?;
            let fmt = ReportFormat::from_str(&format)?;
            let p = Pipeline::new(cfg, &out)?;
            let bundle = p.run_all(fmt)?;
            let hash = std::fs::read_to_string(out.join("bundle.hash"))?;
            println!("run complete: bundle hash {hash}");
            for e in &bundle.quadrant.entries {
                println!(
                    "  {:<16} accumulation {:+9.2}%  final z_std {:.4}  in_quadrant {}",
                    e.paradigm.as_str(),
                    e.accumulation_pct,
                    e.final_z_std,
                    e.in_quadrant
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
