use clap::{Parser, Subcommand};
use psyphy::commands::{self, Ctx};
use std::path::PathBuf;
use std::process::ExitCode;

/// Evaluate convolutional classifiers as psychophysical observers.
#[derive(Parser)]
#[command(name = "psyphy", version, about)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full training of the configured models (backbone unfrozen).
    Pretrain,
    /// Frozen-backbone transfer learning of the classifier heads.
    Transfer,
    /// Sweep the clean continuum and fit response curves.
    Curve,
    /// Attribution grid over the continuum.
    Cam {
        /// Convolutional layer (dotted path); defaults to the last one.
        #[arg(long)]
        layer: Option<String>,
        /// Print eligible layer names per model and exit.
        #[arg(long)]
        list_layers: bool,
    },
    /// Sweep the continuum under each configured mask condition.
    MaskEval,
    /// Fit participants from the trials CSV and store the baseline.
    FitHuman,
    /// Build the comparison table from stored curves.
    Report {
        /// Bonferroni family size (default: non-degenerate row count).
        #[arg(long)]
        m: Option<usize>,
    },
    /// Run a full experiment bundle.
    Experiment {
        /// 1 = clean, 2 = masked, 3 = excitation overlay.
        which: u8,
    },
}

fn run(cli: Cli) -> psyphy::Result<()> {
    let config_path = cli.config.ok_or_else(|| {
        psyphy::Error::Validation("--config <file.json> is required".into())
    })?;
    let ctx = Ctx::load(&config_path, cli.seed, cli.out)?;
    match cli.cmd {
        Cmd::Pretrain => {
            let reports = commands::cmd_pretrain(&ctx)?;
            for r in &reports {
                println!(
                    "{}: best epoch {} val accuracy {:.3}",
                    r.model, r.best_epoch, r.best_val_accuracy
                );
            }
        }
        Cmd::Transfer => {
            let reports = commands::cmd_transfer(&ctx)?;
            for r in &reports {
                println!(
                    "{}: best epoch {} val accuracy {:.3}",
                    r.model, r.best_epoch, r.best_val_accuracy
                );
            }
        }
        Cmd::Curve => {
            let records = commands::cmd_curve(&ctx)?;
            for r in &records {
                match r.fit.pse {
                    Some(p) => println!("{} ({}): PSE {:.3}", r.model, r.provenance, p),
                    None => println!("{} ({}): degenerate", r.model, r.provenance),
                }
            }
        }
        Cmd::Cam { layer, list_layers } => {
            if let Some(path) = commands::cmd_cam(&ctx, layer.as_deref(), list_layers)? {
                println!("wrote {}", path.display());
            }
        }
        Cmd::MaskEval => {
            let records = commands::cmd_mask_eval(&ctx)?;
            for r in &records {
                match r.fit.pse {
                    Some(p) => {
                        println!("{} ({}) [{}]: PSE {:.3}", r.model, r.provenance, r.condition, p)
                    }
                    None => println!(
                        "{} ({}) [{}]: degenerate",
                        r.model, r.provenance, r.condition
                    ),
                }
            }
        }
        Cmd::FitHuman => {
            let baseline = commands::cmd_fit_human(&ctx)?;
            println!(
                "n = {}, mean PSE = {:.3}, SEM = {:.3}",
                baseline.n, baseline.mean, baseline.sem
            );
        }
        Cmd::Report { m } => {
            let report = commands::cmd_report(&ctx, m)?;
            print!("{}", report.text);
        }
        Cmd::Experiment { which } => {
            let report =
                commands::cmd_experiment(&ctx, commands::Experiment::from_index(which)?)?;
            print!("{}", report.text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
