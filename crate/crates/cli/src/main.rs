//! `vkt`: generate stimuli, simulate learners, train and evaluate tracers,
//! and run the collection server. Success prints a JSON summary on stdout;
//! failure prints a JSON error on stderr and exits nonzero.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "vkt", version, about = "Visual knowledge tracing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic three-class stimulus set.
    GenerateGreebles {
        #[command(flatten)]
        common: Common,
        /// Generator spec (JSON); built-in defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Items per class, overriding the spec.
        #[arg(long)]
        per_class: Option<usize>,
        /// Square image size, overriding the spec.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Simulate a learner population on a dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Simulator config (JSON); built-in defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        learners: Option<usize>,
    },
    /// Train one model on a learner split and score its test learners.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// Score a checkpoint, or run the reshuffled protocol when none is given.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelOpts,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Probe items per class for the probability trace.
        #[arg(long, default_value_t = 50)]
        probes_per_class: usize,
    },
    /// Probability traces of a checkpoint over a probe set.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        probes_per_class: usize,
        #[arg(long)]
        f64: bool,
    },
    /// Dump recurrent states (and emitted classifiers) of a checkpoint.
    ExportStates {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        f64: bool,
    },
    /// Per-phase correctness histograms and skewness of a session log.
    Stats {
        #[command(flatten)]
        common: Common,
    },
    /// Run the collection server.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Directory of datasets; defaults to the directory of --dataset.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        timeout_secs: Option<u64>,
    },
}

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug)]
struct Common {
    /// Dataset manifest (JSON).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Session log (JSONL).
    #[arg(long)]
    sessions: Option<PathBuf>,
    /// static, static_time, direct, cls_pred, dkt, prototype, exemplar
    /// (evaluate also accepts gt_label).
    #[arg(long)]
    variant: Option<String>,
    /// base, y or y_z.
    #[arg(long)]
    conditioning: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Embedding {
    /// CNN when every item has an image, features otherwise.
    Auto,
    Cnn,
    /// Recorded features through the simulator's projection.
    Features,
}

#[derive(Args, Clone, Debug)]
struct ModelOpts {
    /// Hyperparameters (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Embedding::Auto)]
    embedding: Embedding,
    /// Simulator config whose projection defines the feature embedding.
    #[arg(long)]
    sim_config: Option<PathBuf>,
    /// Feed per-class running accuracy to the recurrent input.
    #[arg(long)]
    meta: bool,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    reshuffles: Option<usize>,
    /// Compute in 64-bit floats.
    #[arg(long)]
    f64: bool,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => fail("usage", &e.to_string(), 2),
    };
    match commands::run(cli.command) {
        Ok(summary) => println!("{}", serde_json::to_string_pretty(&summary).unwrap()),
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}

fn fail(kind: &str, message: &str, code: i32) -> ! {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message.trim_end() } });
    eprintln!("{body}");
    std::process::exit(code)
}
