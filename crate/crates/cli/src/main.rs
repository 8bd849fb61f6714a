use std::path::PathBuf;

use clap::{Parser, Subcommand};

use esma_cli::commands::{self, Context};
use esma_cli::{exit, exit_code};

/// Easy-sample matching attacks, density diagnostics and watermark risk
/// evaluation.
#[derive(Debug, Parser)]
#[command(name = "esma", version)]
struct Cli {
    /// TOML config for the subcommand; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config and ESMA_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact cache root; falls back to ESMA_CACHE_DIR, then <out>/cache.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Emit plots; comma-separated kinds, or every kind with data when empty.
    #[arg(long, global = true, num_args = 0..=1, value_delimiter = ',', default_missing_value = "")]
    plots: Option<Vec<String>>,
    /// Output root.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Density-consistency study on the two-Gaussian toy task.
    ToyDensity,
    /// Screen easy samples and write per-class anchors.
    ScreenAnchors,
    /// Pretrain the target-class embedding bank.
    PretrainEmbeddings,
    /// Train an ESMA generator.
    TrainEsma,
    /// Train a BEM-ESMA generator.
    TrainBemEsma,
    /// Generate adversarial images with a trained generator.
    Attack {
        /// Image directory or dataset file; the configured test split when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Generator checkpoint directory; the matching train-esma output when absent.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Use the train-bem-esma output instead of train-esma.
        #[arg(long)]
        bem: bool,
    },
    /// Train a watermark encoder/decoder.
    TrainWatermark,
    /// Build disjoint enterprise message pools.
    MakePools,
    /// Erasure and tampering sweep over message lengths.
    EvalWatermark,
    /// Run an experiment protocol and write its report.
    Run,
    /// Render plots from a saved report.
    Plots {
        #[arg(long)]
        report: PathBuf,
    },
    /// Convert an image directory or built-in generator into a dataset file.
    Ingest {
        /// Directory path, or `builtin:prototype`, `builtin:covers`, `builtin:toy`.
        #[arg(long)]
        source: String,
        #[arg(long, default_value_t = 16)]
        size: usize,
        /// Samples to generate for built-in sources (per class for `prototype`).
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let ctx = Context {
        config: cli.config,
        seed: cli.seed,
        cache_dir: cli.cache_dir,
        plots: cli.plots.map(|k| k.into_iter().filter(|s| !s.is_empty()).collect()),
        out: cli.out,
    };
    let result = match &cli.command {
        Command::ToyDensity => commands::toy_density(&ctx),
        Command::ScreenAnchors => commands::screen_anchors(&ctx),
        Command::PretrainEmbeddings => commands::pretrain(&ctx),
        Command::TrainEsma => commands::train_generator(&ctx, false),
        Command::TrainBemEsma => commands::train_generator(&ctx, true),
        Command::Attack { input, generator, bem } => commands::attack(&ctx, input.as_deref(), generator.as_deref(), *bem),
        Command::TrainWatermark => commands::train_watermark(&ctx),
        Command::MakePools => commands::make_pools(&ctx),
        Command::EvalWatermark => commands::eval_watermark(&ctx),
        Command::Run => commands::run(&ctx),
        Command::Plots { report } => commands::plots(&ctx, report).map(|files| {
            for f in &files {
                println!("{}", f.display());
            }
            ctx.out.join("plots")
        }),
        Command::Ingest { source, size, count } => commands::ingest(&ctx, source, *size, *count),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            std::process::exit(exit::OK);
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(exit_code(&e));
        }
    }
}
