//! `labelmill` — batch front end for the taxonomy-generation and
//! text-labeling pipelines. One TOML config describes a run; subcommands
//! execute its stages. Exit codes: 0 success, 2 configuration error,
//! 3 pipeline error, 4 a stage exhausted its LLM retry budget.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use labelmill::Error;

mod config;
mod io;
mod ops;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "labelmill", version, about = "Taxonomy generation and text labeling pipelines")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "labelmill.toml")]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize every corpus document with the LLM.
    Summarize,
    /// Run the full taxonomy loop and write the winning taxonomy.
    Taxonomy {
        /// Override the number of seeded trials.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Pseudo-label the corpus against an existing taxonomy.
    Annotate {
        /// `primary_only` or `primary_and_all`.
        #[arg(long)]
        mode: Option<String>,
        /// Taxonomy file to label against.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Distill annotations into an embedding classifier.
    Train {
        /// `logit`, `mlp`, `multilabel-logit`, or `multilabel-mlp`.
        #[arg(long)]
        model: Option<String>,
    },
    /// Label the corpus with a trained model file.
    Predict {
        /// Model file written by `train` or `cluster-baseline`.
        #[arg(long)]
        model_path: Option<PathBuf>,
    },
    /// Embedding + k-means baseline with LLM cluster naming.
    ClusterBaseline {
        /// Override the number of clusters.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Agreement and accuracy reports from assignment files.
    Evaluate {
        /// Gold assignments (jsonl).
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Predicted assignments (jsonl).
        #[arg(long)]
        pred: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> labelmill::Result<()> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(dir) = cli.out_dir {
        config.output.dir = dir;
    }
    std::fs::create_dir_all(&config.output.dir).map_err(|e| Error::Config(format!(
        "cannot create output directory `{}`: {e}",
        config.output.dir.display()
    )))?;
    // Flags win over the file.
    match &cli.command {
        Command::Taxonomy { trials: Some(n) } => config.phase1.trials = *n,
        Command::Annotate { mode, taxonomy } => {
            if let Some(mode) = mode {
                config.annotate.mode = Some(mode.clone());
            }
            if let Some(taxonomy) = taxonomy {
                config.annotate.taxonomy = Some(taxonomy.clone());
            }
        }
        Command::Train { model: Some(kind) } => config.train.model = kind.clone(),
        Command::Predict {
            model_path: Some(path),
        } => config.predict.model_path = Some(path.clone()),
        Command::ClusterBaseline { k: Some(k) } => config.cluster.k = *k,
        Command::Evaluate { gold, pred } => {
            if let Some(gold) = gold {
                config.evaluate.gold = Some(gold.clone());
            }
            if let Some(pred) = pred {
                config.evaluate.pred = Some(pred.clone());
            }
        }
        _ => {}
    }

    match cli.command {
        Command::Summarize => ops::cmd_summarize(&config),
        Command::Taxonomy { .. } => ops::cmd_taxonomy(&config),
        Command::Annotate { .. } => ops::cmd_annotate(&config),
        Command::Train { .. } => ops::cmd_train(&config),
        Command::Predict { .. } => ops::cmd_predict(&config),
        Command::ClusterBaseline { .. } => ops::cmd_cluster_baseline(&config),
        Command::Evaluate { .. } => ops::cmd_evaluate(&config),
    }
}

/// 2 for anything the user can fix in the config or input files, 4 when a
/// stage ran out of LLM retries, 3 for everything else.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Exhausted { .. } => 4,
        Error::Pipeline { reason, .. } if reason.contains("exhaust") => 4,
        Error::Config(_)
        | Error::Invalid(_)
        | Error::Record { .. }
        | Error::DuplicateDocId { .. }
        | Error::UnknownFilterRule { .. }
        | Error::InvalidFilterRule { .. }
        | Error::TaxonomyFormat { .. }
        | Error::MissingSlot { .. }
        | Error::SlotNotInBody { .. } => 2,
        _ => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustion_maps_to_4_and_config_to_2() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::invalid("x")), 2);
        assert_eq!(exit_code(&Error::pipeline("annotate", "3 documents exhausted retries")), 4);
        assert_eq!(exit_code(&Error::pipeline("embed", "no document could be embedded")), 3);
    }
}
