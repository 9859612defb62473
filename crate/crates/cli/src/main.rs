use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hookmem_cli::commands::{cmd_ablate, cmd_edit, cmd_eval, cmd_generate, EditOptions, EvalOptions, Sweep, Which};
use hookmem_cli::{CliError, RunConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "hookmem", version, about = "Consecutive batch editing with routed hook layers")]
struct Cli {
    /// Worker threads for evaluation and target search (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the network, dataset and editing streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (output.directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set editing.lambda=1000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.output.directory = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a JSON-lines dataset (synthetic or ingested).
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run consecutive editing and write a snapshot plus step logs.
    Edit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Snapshot directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many steps are done.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a snapshot.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// reliability, generality, locality, all, scope, employment or memory.
        #[arg(long, default_value = "all")]
        which: Which,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-token routing traces.
        #[arg(long)]
        traces: bool,
    },
    /// Rerun editing over a parameter grid, one parameter at a time.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `param=v1,v2,...`; param is one of lambda, alpha_z, fixed_alpha,
        /// batch_size, n_layers, hook, reg_beta.
        #[arg(long = "sweep", required = true)]
        sweeps: Vec<Sweep>,
    },
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Generate { cfg } => print(&cmd_generate(&cfg.load()?)?),
        Command::Edit { cfg, resume, stop_after } => {
            print(&cmd_edit(&cfg.load()?, &EditOptions { resume, stop_after })?)
        }
        Command::Eval {
            snapshot,
            dataset,
            which,
            out,
            traces,
        } => print(&cmd_eval(&EvalOptions {
            snapshot,
            dataset,
            which,
            out,
            traces,
        })?),
        Command::Ablate { cfg, sweeps } => print(&cmd_ablate(&cfg.load()?, &sweeps)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
