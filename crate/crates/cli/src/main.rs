use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmfuse_cli::{commands, report, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "mmfuse", version, about = "Multimodal self-supervised fusion experiments")]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    Generate,
    /// Train a model on a dataset.
    Train {
        /// Dataset manifest (`data.json`) or container (`data.mmdt`).
        #[arg(long)]
        data: PathBuf,
        /// Objective preset; overrides the config.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Fit the logistic-regression probe on frozen latents.
    Probe {
        /// Run directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Cross-modal CKA and SVCCA per group.
    Similarity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// SmoothGrad maps, cross-modal pairing and group contrasts.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare every run directory under a root.
    Report {
        /// Directory whose subdirectories are runs.
        root: PathBuf,
    },
}

fn required_out(out: Option<PathBuf>, command: &str) -> Result<PathBuf, CliError> {
    out.ok_or_else(|| CliError::Config(anyhow::anyhow!("{command} needs --out")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    mmfuse_cli::init_threads()?;
    let base = RunConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Generate => {
            let cfg = base.resolve(cli.seed)?;
            let out = required_out(cli.out, "generate")?;
            commands::generate(&cfg, &out)?;
            println!("wrote dataset to {}", out.join("data.json").display());
        }
        Command::Train { data, preset } => {
            let mut cfg = base;
            if let Some(p) = preset {
                cfg.train.preset = p;
                cfg.train.graph = None;
            }
            let cfg = cfg.resolve(cli.seed)?;
            let out = required_out(cli.out, "train")?;
            let info = commands::train(&cfg, &data, &out)?;
            println!(
                "trained {} (seed {}) for {} steps; final loss {}",
                info.model,
                info.seed,
                info.steps,
                info.final_loss.map_or("n/a".into(), |l| format!("{l:.4}"))
            );
        }
        Command::Probe { model, data } => {
            let cfg = base.resolve(cli.seed)?;
            let out = cli.out.unwrap_or_else(|| model.clone());
            let s = commands::probe(&cfg, &model, &data, &out)?;
            let aucs: Vec<String> = s.modalities.iter().map(|m| format!("{:.4}", m.holdout_auc)).collect();
            println!("{}: holdout AUC {} (mean {:.4})", s.model, aucs.join(" / "), s.mean_auc);
        }
        Command::Similarity { model, data } => {
            let cfg = base.resolve(cli.seed)?;
            let out = cli.out.unwrap_or_else(|| model.clone());
            let r = commands::similarity(&cfg, &model, &data, &out)?;
            for g in &r.groups {
                let f = |v: Option<f64>| v.map_or(report::ABSENT.into(), |x| format!("{x:.4}"));
                println!("{:>5} n={:<4} cka {} svcca {}", g.group, g.n, f(g.cka), f(g.svcca));
            }
        }
        Command::Saliency { model, data } => {
            let cfg = base.resolve(cli.seed)?;
            let out = cli.out.unwrap_or_else(|| model.clone());
            let s = commands::saliency(&cfg, &model, &data, &out)?;
            println!(
                "best saliency pair: m1 dim {} / m2 dim {} (r = {:.4}) over {} subjects",
                s.pair.m1_dim, s.pair.m2_dim, s.pair.correlation, s.subjects
            );
        }
        Command::Report { root } => {
            let out = cli.out.unwrap_or_else(|| root.clone());
            let r = report::collect(&root)?;
            report::write(&r, &out)?;
            println!("{} runs, {} models; wrote {}", r.runs.len(), r.models.len(), out.join("report.md").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
