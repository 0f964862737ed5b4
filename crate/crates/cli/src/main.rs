use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use fas_cli::commands::{cmd_eval, cmd_infer, cmd_report, cmd_synth, cmd_train, protocol_listing, Workspace};
use fas_cli::config::{Override, RunConfig};
use fas_core::data::{ProtocolId, SyntheticConfig};
use fas_core::training::Strategy;

#[derive(Parser, Debug)]
#[command(name = "fas", version, about = "Cross-domain face anti-spoofing with a vision-language dual encoder")]
#[command(after_help = "Examples:
  fas synth --out data/synthetic
  FAS_DATA_ROOT=data/synthetic fas train --config configs/p1.toml --set train.iterations=300
  fas eval --config configs/p1.toml
  fas report runs/p1-mcl runs/p1-v --baseline runs/p1-v
  fas protocols list 3")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,

    /// Override a scalar field, e.g. `--set train.lr=1e-3`. Logged.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<Override>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per configured seed.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue each seed from its latest checkpoint, if any.
        #[arg(long)]
        resume: bool,
    },
    /// Score the target domain, write reports and aggregate over seeds.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoints to evaluate instead of each seed's final one.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Real-face probability of one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Prompt file for the similarity path.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Scoring path, when the checkpoint does not record one.
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// List or describe protocol splits.
    Protocols {
        #[command(subcommand)]
        action: ProtocolAction,
    },
    /// Aggregate evaluated runs into one table, with optional t-tests and plots.
    Report {
        /// Output directories of evaluated runs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Run to test every other run against (one-sided, on HTER).
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Where to write the table, aggregates and plots.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset root with every domain.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 24)]
        real: usize,
        #[arg(long, default_value_t = 12)]
        print: usize,
        #[arg(long, default_value_t = 12)]
        replay: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand, Debug)]
enum ProtocolAction {
    /// Splits of one protocol, or of all of them.
    List { protocol: Option<ProtocolId> },
    /// Composition of one split.
    Describe { protocol: ProtocolId, split: String },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let ws = Workspace::new(config.load()?)?;
            println!("config hash {}", ws.hash);
            for t in cmd_train(&ws, resume)? {
                match t.final_loss {
                    Some(l) => println!("seed {}: final loss {l:.4}, {}", t.seed, t.checkpoint.display()),
                    None => println!("seed {}: already complete, {}", t.seed, t.checkpoint.display()),
                }
            }
        }
        Command::Eval { config, checkpoints } => {
            let ws = Workspace::new(config.load()?)?;
            let out = cmd_eval(&ws, &checkpoints)?;
            for r in &out.reports {
                println!(
                    "seed {}: HTER {:.2} AUC {:.2} TPR@FPR={}% {:.2}",
                    r.meta.seed,
                    100.0 * r.hter,
                    100.0 * r.auc,
                    100.0 * r.fpr_target,
                    100.0 * r.tpr_at_fpr
                );
            }
            if let Some(table) = &out.table {
                print!("\n{table}");
            }
            if let Some(t) = &out.ttest {
                println!("paired t-test vs baseline: t = {:.3}, p = {:.4}, reject = {}", t.t, t.p, t.reject);
            }
        }
        Command::Infer {
            checkpoint,
            image,
            prompts,
            strategy,
        } => {
            let p = cmd_infer(&checkpoint, &image, prompts.as_deref(), strategy)?;
            println!("{p:.6}");
        }
        Command::Protocols { action } => match action {
            ProtocolAction::List { protocol } => {
                let ids = protocol.map_or(ProtocolId::ALL.to_vec(), |p| vec![p]);
                for id in ids {
                    println!("protocol {id}");
                    for line in protocol_listing(id) {
                        println!("  {line}");
                    }
                }
            }
            ProtocolAction::Describe { protocol, split } => {
                let spec = protocol.find(&split)?;
                println!("{}  {}", spec.name(), spec.describe());
            }
        },
        Command::Report { runs, baseline, out } => {
            print!("{}", cmd_report(&runs, baseline.as_deref(), out.as_deref())?);
        }
        Command::Synth {
            out,
            size,
            real,
            print,
            replay,
            seed,
        } => {
            let cfg = SyntheticConfig {
                size,
                real,
                print,
                replay,
                seed,
            };
            cmd_synth(&out, &cfg)?;
            println!("wrote synthetic domains to {}", out.display());
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
