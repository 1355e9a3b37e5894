use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod plot;

#[derive(Parser, Debug)]
#[command(name = "looc", version, about = "Count-supervised object localization on synthetic dense scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Results directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Run single-threaded with ordered reductions.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train and test splits on disk.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one method for one seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// looc, topk, glance or lcfcn-supervised
        #[arg(long)]
        method: String,
        /// Dataset directory written by gen-data; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue an interrupted curriculum run.
        #[arg(long)]
        resume: bool,
        /// Stop a curriculum run after this many rounds.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate every trained run under --out on the test split; writes metrics.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Only evaluate this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Only evaluate this method.
        #[arg(long)]
        method: Option<String>,
    },
    /// Score final pseudo-labels against the training points; writes audit.csv.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Bar charts of metrics.csv, one PNG per metric.
    Plot {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common, seed } => commands::gen_data(&common, seed),
        Command::Train {
            common,
            seed,
            method,
            data,
            resume,
            stop_after,
        } => commands::train(&common, seed, &method, data.as_deref(), resume, stop_after),
        Command::Eval {
            common,
            data,
            seed,
            method,
        } => commands::eval(&common, data.as_deref(), seed, method.as_deref()),
        Command::Audit { common, data } => commands::audit(&common, data.as_deref()),
        Command::Plot { out } => plot::plot_metrics(&out).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                looc_core::LoocError::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
