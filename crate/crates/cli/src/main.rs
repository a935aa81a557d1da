use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use csnn_cli::config::{ExperimentConfig, ProbeConfig};
use csnn_cli::export::{cmd_export_bmu, cmd_export_stats, Overlap};
use csnn_cli::report::{build_report, export_run_curves, load_curves, run_curves, write_report};
use csnn_cli::run::{cmd_probe, cmd_train, CheckpointSelector};
use csnn_cli::trace::RunTrace;
use csnn_cli::{exit_code, thread_cap, verify_oracle, EXIT_CONFIG};
use csnn_core::metrics::{ConvergenceMode, Orientation, ReportOptions};
use csnn_core::{Ablation, CsnnError, Result};

#[derive(Parser)]
#[command(name = "csnn", version, about = "Train, probe and analyse convolutional self-organizing networks")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write snapshots at every checkpoint.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Overrides the output directory of the config.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Encode checkpoints and train probes on the representations.
    Probe {
        #[arg(short, long)]
        run: PathBuf,
        /// Probe preset (fc, 2fc, 3fc, 3fc-relu); defaults to the probes of the config.
        #[arg(long)]
        probe: Option<String>,
        #[arg(long)]
        kfold: Option<usize>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// `all`, `last` or a comma-separated list of steps.
        #[arg(long, default_value = "all")]
        checkpoint: String,
        /// Encode with this ablation instead of the stored parameters.
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
    },
    /// Mismatch report of a run's probe, or of external curve files.
    Metrics {
        #[arg(short, long, required_unless_present = "curves")]
        run: Option<PathBuf>,
        /// Probe name in the run trace; required when the run has several.
        #[arg(long)]
        probe: Option<String>,
        /// Pretext curve followed by one target curve per fold.
        #[arg(long, num_args = 2.., conflicts_with = "run")]
        curves: Vec<PathBuf>,
        #[arg(long)]
        orientation: Option<String>,
        #[arg(long, default_value_t = 3)]
        patience: usize,
        #[arg(long, default_value_t = 0.0)]
        min_delta: f64,
        #[arg(long, value_enum, default_value = "best")]
        mode: ModeArg,
        /// Evaluate every step instead of stopping at pretext convergence.
        #[arg(long)]
        no_truncate: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Export images and statistics of a checkpoint.
    Export {
        #[command(subcommand)]
        what: ExportCommand,
    },
    /// Run the brute-force equivalence suite.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum ExportCommand {
    /// Reconstruct a test sample from the BMU weights of one layer.
    Bmu {
        #[arg(short, long)]
        run: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value = "last")]
        checkpoint: String,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Overlapping patches overwrite instead of averaging.
        #[arg(long)]
        overwrite: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Utilization, weight changes and class-average representations.
    Stats {
        #[arg(short, long)]
        run: PathBuf,
        /// Accepted for symmetry with `bmu`; statistics cover the final layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value = "last")]
        checkpoint: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    None,
    RandomMasks,
    NoiseMasks,
    NoMasks,
    RandomSom,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::None => Ablation::None,
            AblationArg::RandomMasks => Ablation::RandomMasks,
            AblationArg::NoiseMasks => Ablation::NoiseMasks,
            AblationArg::NoMasks => Ablation::NoMasks,
            AblationArg::RandomSom => Ablation::RandomSom,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Best,
    Trigger,
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, output } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = output {
                cfg.output = o;
            }
            let trace = cmd_train(&cfg)?;
            println!("{} checkpoints written to {}", trace.checkpoints.len(), cfg.output.display());
        }
        Command::Probe {
            run,
            probe,
            kfold,
            shots,
            epochs,
            checkpoint,
            ablation,
        } => {
            let probes: Vec<ProbeConfig> = probe
                .map(|p| ProbeConfig {
                    kfold,
                    shots,
                    epochs,
                    ..ProbeConfig::from_preset(&p)
                })
                .into_iter()
                .collect();
            if probes.is_empty() && (kfold.is_some() || shots.is_some() || epochs.is_some()) {
                return Err(CsnnError::Config("--kfold, --shots and --epochs need --probe".into()));
            }
            let selector: CheckpointSelector = checkpoint.parse()?;
            let trace = cmd_probe(&run, &selector, &probes, ablation.map(Ablation::from))?;
            for c in &trace.checkpoints {
                for (name, p) in &c.probes {
                    let test = p.test_accuracy.map(|a| format!(", test {a:.2}%")).unwrap_or_default();
                    println!("step {:>8}  {name:<12} pocket {:.2}%{test}", c.step, p.mean.pocket_accuracy);
                }
            }
        }
        Command::Metrics {
            run,
            probe,
            curves,
            orientation,
            patience,
            min_delta,
            mode,
            no_truncate,
            out,
        } => {
            let opts = ReportOptions {
                patience,
                min_delta,
                convergence_mode: match mode {
                    ModeArg::Best => ConvergenceMode::Best,
                    ModeArg::Trigger => ConvergenceMode::Trigger,
                },
                truncate_at_convergence: !no_truncate,
            };
            let orientation: Option<Orientation> = orientation.as_deref().map(str::parse).transpose()?;
            let (pretext, targets, out) = match run {
                Some(run) => {
                    let trace = RunTrace::load(&run)?;
                    if orientation.is_some_and(|o| o != trace.orientation) {
                        return Err(CsnnError::Config("--orientation differs from the run's configured orientation".into()));
                    }
                    let names = trace.probe_names();
                    let probe = match (probe, names.as_slice()) {
                        (Some(p), _) => p,
                        (None, [only]) => only.clone(),
                        (None, []) => return Err(CsnnError::Data("the run has no probe results yet".into())),
                        (None, _) => return Err(CsnnError::Config(format!("--probe: choose one of {names:?}"))),
                    };
                    let out = out.unwrap_or_else(|| run.join("reports").join(&probe));
                    export_run_curves(&trace, &probe, &out.join("curves"))?;
                    let (p, t) = run_curves(&trace, &probe)?;
                    (p, t, out)
                }
                None => {
                    let (p, t) = load_curves(&curves[0], &curves[1..], orientation)?;
                    (p, t, out.unwrap_or_else(|| PathBuf::from("report")))
                }
            };
            let report = build_report(&pretext, &targets, &opts)?;
            write_report(&report, &out)?;
            println!(
                "MM3 {:.4}  MSM3 {:.4}  cSM3 {:.4}  mSM3 {:.4}  MOFM {:.4}  cOFM {:.4}  mOFM {:.4}  converged at step {}",
                report.mm3,
                report.msm3,
                report.c_sm3,
                report.m_sm3,
                report.ofm.mean_ofm,
                report.ofm.c_ofm,
                report.ofm.m_ofm,
                report.convergence.step
            );
            println!("report written to {}", out.display());
        }
        Command::Export { what } => match what {
            ExportCommand::Bmu {
                run,
                layer,
                checkpoint,
                sample,
                overwrite,
                out,
            } => {
                let out = out.unwrap_or_else(|| run.join("exports"));
                let overlap = if overwrite { Overlap::Last } else { Overlap::Average };
                for p in cmd_export_bmu(&run, &checkpoint.parse()?, layer, sample, overlap, &out)? {
                    println!("{}", p.display());
                }
            }
            ExportCommand::Stats {
                run, checkpoint, out, ..
            } => {
                let out = out.unwrap_or_else(|| run.join("exports"));
                for p in cmd_export_stats(&run, &checkpoint.parse()?, &out)? {
                    println!("{}", p.display());
                }
            }
        },
        Command::Oracle { seed } => {
            let checks = csnn_core::oracle::run_all(seed)?;
            for c in &checks {
                let status = if c.passed { "ok" } else { "FAILED" };
                println!("{:<36} {:>4} cases  max error {:.3e}  {status}", c.name, c.cases, c.max_error);
            }
            verify_oracle(&checks)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match thread_cap(std::env::var("CSNN_THREADS").ok().as_deref()) {
        Ok(Some(n)) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: cannot size the thread pool: {e}");
                return ExitCode::from(EXIT_CONFIG as u8);
            }
        }
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
