use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use log::info;
use steallab::losses::{CloneLoss, DiversityVariant};
use steallab::metrics::{render_report, ReportFormat};
use steallab_cli::config::Baseline;
use steallab_cli::{exit, exit_code, report, resolve, rerun, run, sweep, Overrides};

/// Data-free model stealing experiments at desk scale.
#[derive(Parser)]
#[command(name = "steallab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a victim classifier and save it with its data splits.
    TrainVictim {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Steal a victim with the diversity-driven attack or the noise baseline.
    Attack {
        #[command(flatten)]
        source: Source,
        /// Directory written by `train-victim`; otherwise a victim is trained first.
        #[arg(long)]
        victim: Option<PathBuf>,
        #[command(flatten)]
        flags: AttackFlags,
        /// Name recorded in the run_id column.
        #[arg(long, default_value = "run")]
        run_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a grid of attacks from a TOML grid file.
    Sweep {
        grid: PathBuf,
        #[command(flatten)]
        flags: AttackFlags,
        #[arg(long)]
        out: PathBuf,
        /// Cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Merge metric reports and print the per-config median summary.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory for merged.csv and summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat a run from its manifest.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Source {
    /// Task preset: blobs-4, blobs-10, blobs-10-unbalanced, rings-3 or digits.
    #[arg(long)]
    task: Option<String>,
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AttackFlags {
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "ng")]
    n_g: Option<usize>,
    #[arg(long = "nc")]
    n_c: Option<usize>,
    /// batch, sample or label.
    #[arg(long)]
    diversity: Option<DiversityVariant>,
    /// l1, l2 or kl.
    #[arg(long)]
    clone_loss: Option<CloneLoss>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long, value_parser = parse_baseline)]
    baseline: Option<Baseline>,
    /// Record wall-clock seconds in elapsed_s.
    #[arg(long)]
    timing: bool,
}

fn parse_baseline(s: &str) -> Result<Baseline, String> {
    match s {
        "random-noise" => Ok(Baseline::RandomNoise),
        other => Err(format!("unknown baseline `{other}`; expected random-noise")),
    }
}

impl AttackFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            budget: self.budget,
            batch_size: self.batch_size,
            n_g: self.n_g,
            n_c: self.n_c,
            diversity: self.diversity,
            clone_loss: self.clone_loss,
            seed: self.seed,
            eval_every: self.eval_every,
            baseline: self.baseline,
            timing: self.timing,
        }
    }
}

fn execute(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::TrainVictim { source, seed, out } => {
            let flags = Overrides { seed, ..Default::default() };
            let cfg = resolve(source.task.as_deref(), source.config.as_deref(), &flags)?;
            let v = run::train_victim(&cfg, &out)?;
            println!("test_accuracy {:.6}", v.fit.test_accuracy);
        }
        Cmd::Attack {
            source,
            victim,
            flags,
            run_id,
            out,
        } => {
            let mut cfg = resolve(source.task.as_deref(), source.config.as_deref(), &flags.overrides())?;
            if victim.is_some() {
                cfg.victim.path = victim;
            }
            let outcome = run::attack(&cfg, &out, &run_id)?;
            print!("{}", render_report(std::slice::from_ref(outcome.final_row()), ReportFormat::Csv)?);
        }
        Cmd::Sweep { grid, flags, out, jobs } => {
            let spec = sweep::GridSpec::load(&grid)?;
            let outcome = sweep::sweep(&spec, &flags.overrides(), &out, jobs)?;
            print!("{}", render_report(&outcome.summary, ReportFormat::Csv)?);
        }
        Cmd::Report { inputs, out } => {
            let merged = report::merge(&inputs)?;
            if let Some(dir) = out {
                report::write(&merged, &dir)?;
                info!("wrote {} merged rows to {}", merged.rows.len(), dir.display());
            }
            print!("{}", render_report(&merged.summary, ReportFormat::Csv)?);
        }
        Cmd::Rerun { manifest, out } => {
            if let Some(outcome) = rerun(&manifest, &out)? {
                print!("{}", render_report(std::slice::from_ref(outcome.final_row()), ReportFormat::Csv)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STEALLAB_LOG", "info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
