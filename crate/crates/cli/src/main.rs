//! `skillkt`: skill embeddings, model training, evaluation and experiments.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use config::{RunConfig, KEYS, OUT_DIR_ENV};

#[derive(Parser, Debug)]
#[command(name = "skillkt", version, about = "Graph-informed knowledge tracing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embed a skill graph with biased random walks and skip-gram.
    Embed(EmbedArgs),
    /// Train a knowledge tracing model on an interaction log.
    Train(TrainArgs),
    /// Pooled AUC of a checkpoint on an interaction log.
    Eval(EvalArgs),
    /// Ablation and limited-data grids over arms, fractions and seeds.
    Experiment(ExperimentArgs),
    /// Write a synthetic interaction log and its ground-truth skill graph.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (also read from SKILLKT_OUT_DIR).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of skills; skill ids are then the integers 0..n.
    #[arg(long)]
    n_skills: Option<usize>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Delimiter-separated interaction log with a header row.
    #[arg(long)]
    interactions: Option<PathBuf>,
    #[arg(long)]
    col_user: Option<String>,
    #[arg(long)]
    col_skill: Option<String>,
    #[arg(long)]
    col_correct: Option<String>,
    /// Ordering column, or `none` for file order.
    #[arg(long)]
    col_order: Option<String>,
    /// Single character or `tab`.
    #[arg(long)]
    delimiter: Option<String>,
    /// Characters splitting multi-skill cells.
    #[arg(long)]
    skill_separators: Option<String>,
}

#[derive(Args, Debug)]
struct WalkArgs {
    /// Skill graph as a whitespace-separated edge list.
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Skill vector dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    walk_length: Option<usize>,
    #[arg(long)]
    num_walks: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    walk_epochs: Option<usize>,
    #[arg(long)]
    walk_learning_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    feedforward_dim: Option<usize>,
    /// Hidden width of a two-layer projection head.
    #[arg(long)]
    projection_hidden: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Weight of the skill projection loss; 0 disables it.
    #[arg(long)]
    lambda: Option<f64>,
    /// Evaluations without improvement before stopping; 0 disables.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    subsample: Option<f64>,
    /// `record` or `student`.
    #[arg(long)]
    split_mode: Option<String>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    walk: WalkArgs,
    /// Embed a random graph instead of `--edges`.
    #[arg(long)]
    random_graph: bool,
    /// Edge count of the random graph.
    #[arg(long)]
    edges_count: Option<usize>,
    /// Embedding file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    walk: WalkArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Precomputed skill embedding file.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `eval`, `train` or `all`, relative to the checkpoint's split.
    #[arg(long)]
    partition: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    walk: WalkArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Comma-separated arms: ours, noproj, random.
    #[arg(long)]
    arms: Option<String>,
    /// Comma-separated training fractions.
    #[arg(long)]
    fractions: Option<String>,
    /// Number of paired seeds, starting at `--seed`.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    students: Option<usize>,
    #[arg(long)]
    skills: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    /// Interactions per student.
    #[arg(long = "interactions", id = "interactions_per_student")]
    interactions_per_student: Option<usize>,
    /// Ability gain per practiced interaction.
    #[arg(long)]
    synth_learning_rate: Option<f64>,
    /// Interaction file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ground-truth edge list to write.
    #[arg(long)]
    edges_out: Option<PathBuf>,
}

/// Defaults, then the config file, then the environment, then flags.
fn resolve(matches: &ArgMatches) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    if let Some(path) = matches.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        cfg.set("out_dir", &dir)?;
    }
    for id in matches.ids() {
        let key = id.as_str();
        if !(KEYS.contains(&key) || key == "out_dir") || matches.value_source(key) != Some(ValueSource::CommandLine) {
            continue;
        }
        let raw = matches.get_raw(key).into_iter().flatten().next().and_then(|v| v.to_str());
        if let Some(raw) = raw {
            cfg.set(key, raw).map_err(|e| format!("--{}: {e}", key.replace('_', "-")))?;
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cfg = match resolve(sub) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let outcome = match cli.command {
        Command::Embed(_) => commands::embed(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Experiment(_) => commands::experiment(&cfg),
        Command::Synth(_) => commands::synth(&cfg),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({name}): {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
