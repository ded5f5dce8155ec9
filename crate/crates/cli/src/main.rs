//! `topicnet`: build taxonomies, train, evaluate and export.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "topicnet", version, about = "Taxonomy-guided deep topic models with Gaussian embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Builds a layer-aligned topic tree from a hypernym edge list.
    BuildTree {
        /// Tab-separated `child<TAB>parent` lines.
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Number of topic layers to keep.
        #[arg(long)]
        depth: usize,
        /// Output tree JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for the checkpoint and the JSONL log.
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Scores a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: EvalWhat,
        #[arg(long)]
        out: PathBuf,
        /// Corpus to score instead of the configured one.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Words listed per topic in the topics report.
        #[arg(long, default_value_t = 10)]
        top_n: usize,
        /// Permutations for the alignment test.
        #[arg(long, default_value_t = 1000)]
        permutations: usize,
    },
    /// Writes learned parameters in plain-text form.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: ExportWhat,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalWhat {
    /// Held-out perplexity.
    Ppl,
    /// Top words, coherence and diversity per topic.
    Topics,
    /// Edge versus non-edge divergences.
    Alignment,
    /// Per-document topic proportions.
    Features,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportWhat {
    /// Embedding means of words and topics.
    Embeddings,
    /// The loading matrices, one block per layer.
    Loadings,
}

/// Bad input or configuration.
const EXIT_VALIDATION: u8 = 1;
/// Failure while computing.
const EXIT_RUNTIME: u8 = 2;

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err.chain().any(|c| {
        c.downcast_ref::<topicnet_core::Error>().is_some_and(|e| e.is_validation())
            || c.downcast_ref::<commands::UsageError>().is_some()
    });
    if validation {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::BuildTree {
            taxonomy,
            vocab,
            depth,
            out,
        } => commands::build_tree(&taxonomy, &vocab, depth, &out),
        Command::Train {
            config,
            out_dir,
            resume,
            seed,
            epochs,
            max_steps,
            learning_rate,
        } => commands::train(&commands::TrainArgs {
            config,
            out_dir,
            resume,
            seed,
            epochs,
            max_steps,
            learning_rate,
        }),
        Command::Eval {
            config,
            checkpoint,
            what,
            out,
            corpus,
            seed,
            top_n,
            permutations,
        } => {
            let ctx = commands::EvalArgs {
                config,
                checkpoint,
                out,
                corpus,
                seed,
            };
            match what {
                EvalWhat::Ppl => commands::eval_ppl(&ctx),
                EvalWhat::Topics => commands::eval_topics(&ctx, top_n),
                EvalWhat::Alignment => commands::eval_alignment(&ctx, permutations),
                EvalWhat::Features => commands::eval_features(&ctx),
            }
        }
        Command::Export {
            config,
            checkpoint,
            what,
            out,
        } => match what {
            ExportWhat::Embeddings => commands::export_embeddings(&config, &checkpoint, &out),
            ExportWhat::Loadings => commands::export_loadings(&config, &checkpoint, &out),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
