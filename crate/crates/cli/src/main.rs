//! `scaf`: fixture generation, scribble synthesis, bank building, training,
//! evaluation, robustness sweeps and reports.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scaf_core::Split;

#[derive(Parser, Debug)]
#[command(name = "scaf", version, about = "Scribble-supervised manipulation localization")]
struct Cli {
    /// Run config (TOML). Built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location; each command documents its default.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Single-threaded tensor kernels for bit-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the procedural splice dataset (default out: paths.data).
    Fixture {
        /// Number of manipulated samples (default: fixture.n_samples).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Re-synthesize scribbles from dense masks (default out: paths.data).
    Scribble {
        #[arg(long, default_value = "train")]
        split: Split,
        /// Per-class coverage (default: fixture.coverage).
        #[arg(long)]
        coverage: Option<f64>,
    },
    /// Build memory banks or score an image against them.
    Bank {
        #[command(subcommand)]
        action: BankAction,
    },
    /// Train from scratch (default out: paths.run).
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        banks: Option<PathBuf>,
    },
    /// Per-image F1 on a split (default out: paths.run/eval).
    Eval(EvalArgs),
    /// F1 after JPEG re-encoding (default out: paths.run/eval).
    Robust {
        #[command(flatten)]
        eval: EvalArgs,
        /// Comma-separated quality factors (default: eval.qualities).
        #[arg(long, value_delimiter = ',')]
        qualities: Option<Vec<u8>>,
    },
    /// Markdown summary of eval/robust outputs (default out: paths.run/eval).
    Report,
    /// Print the effective config as TOML, or write it to --out.
    Config {
        /// Start from the desk-scale preset instead of the full-scale defaults.
        #[arg(long)]
        toy: bool,
    },
}

#[derive(Subcommand, Debug)]
enum BankAction {
    /// Bank the `authentic` split and the training images (default out: paths.banks).
    Build {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write MP/AP maps for one image (default out: paths.run/priors).
    Score {
        #[arg(long)]
        banks: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
    },
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    /// Default: paths.run/final.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Default: eval.split.
    #[arg(long)]
    split: Option<Split>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        // Read by the tensor backend when its thread pool starts.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<scaf_core::Error>())
                .map_or("runtime", |c| c.kind());
            let report = serde_json::json!({
                "error": {
                    "kind": kind,
                    "message": e.to_string(),
                    "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
                }
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
