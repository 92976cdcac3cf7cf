use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use didor_cli::config::{ExperimentConfig, Profile};
use didor_cli::run::{evaluate_bundle, run_experiment};
use didor_cli::store::{export_reports, Bundle, ExportFormat};
use didor_core::eval::summarize;
use didor_core::Error;

#[derive(Parser)]
#[command(name = "didor", version, about = "Domain-randomized teacher training and policy distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method and write an artifact bundle.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `master_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Bundle directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        profile: Option<Profile>,
    },
    /// Evaluate a bundle on its teacher domains and on unseen domains.
    Eval {
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a bundle's eval reports for plotting.
    Export {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: ExportFormat,
        /// Destination directory; defaults to `<out>/export`.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Check every artifact hash listed in a bundle manifest.
    Verify {
        #[arg(long)]
        out: PathBuf,
    },
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::Config { .. })))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, seed, out, profile } => {
            let mut cfg = ExperimentConfig::load(&config, profile)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            let Some(dir) = out.or_else(|| cfg.output_dir.clone()) else {
                bail!(Error::config("output_dir", "no --out given and no output_dir in the config"));
            };
            let bundle = run_experiment(&cfg, &dir).context("training")?;
            println!("wrote {} artifacts to {}", bundle.manifest.artifacts.len(), dir.display());
        }
        Command::Eval { out } => {
            let mut bundle = Bundle::open(&out)?;
            let reports = evaluate_bundle(&mut bundle).context("evaluation")?;
            for (name, r) in &reports {
                let s = summarize(r)?;
                println!("{name}: median {:.2} (q1 {:.2}, q3 {:.2}) over {} returns", s.median, s.q1, s.q3, s.count);
            }
        }
        Command::Export { out, format, dest } => {
            let bundle = Bundle::open(&out)?;
            let dest = dest.unwrap_or_else(|| out.join("export"));
            for p in export_reports(&bundle.reports()?, format, &dest)? {
                println!("{}", p.display());
            }
        }
        Command::Verify { out } => {
            let bundle = Bundle::open(&out)?;
            let n = bundle.verify()?;
            if !bundle.manifest.complete {
                bail!("bundle {} is incomplete", out.display());
            }
            println!("{n} artifacts verified");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
