use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kt_core::dataset::{
    build_sequences, make_batches, parse_interactions, parse_interactions_with_vocab, split_records,
    synthesize_students, write_interactions, ParsedInteractions,
};
use kt_core::experiment::{ExperimentData, Runner};
use kt_core::graph::{load_edge_list_path, random_skill_graph};
use kt_core::node2vec::skill2vec;
use kt_core::train::{evaluate, train_observed, EpochObserver};
use kt_core::{
    AdamState, Batch, Checkpoint, EmbeddingTable, EpochMetrics, Error, InteractionRecord, KtModel, SkillGraph,
    SynthConfig,
};
use serde_json::json;

use crate::config::{Partition, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::NonFinite(_)) => 3,
            CliError::Core(Error::AucUndefined) => 4,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io { path: path.to_path_buf(), source: e })
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    Ok(&cfg.out_dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

/// `# key = value` lines for delimiter-separated outputs.
fn config_comment(cfg: &RunConfig) -> String {
    cfg.entries().iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
}

fn echo_config(cfg: &RunConfig, name: &str) -> Result<()> {
    write_text(&cfg.out_dir.join(name), &cfg.render())
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| usage(format!("missing required --{flag}")))
}

fn read_interactions(cfg: &RunConfig) -> Result<ParsedInteractions> {
    let path = required(&cfg.interactions, "interactions")?;
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let parsed = match cfg.n_skills {
        Some(n) => {
            let vocab: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            parse_interactions_with_vocab(file, &cfg.schema, &vocab)?
        }
        None => parse_interactions(file, &cfg.schema)?,
    };
    if parsed.records.is_empty() {
        return Err(usage(format!("{} holds no usable interactions", path.display())));
    }
    log::info!(
        "{} interactions over {} skills ({} rows without a known skill, {} invalid)",
        parsed.records.len(),
        parsed.n_skills(),
        parsed.dropped_missing_skill,
        parsed.dropped_invalid
    );
    Ok(parsed)
}

fn read_graph(cfg: &RunConfig, n_skills: usize) -> Result<SkillGraph> {
    let path = required(&cfg.edges, "edges")?;
    if cfg.n_skills.is_none() {
        log::warn!("edge ids are read as dense skill indices; pass --n-skills when skill ids are 0..n");
    }
    Ok(load_edge_list_path(path, n_skills)?)
}

/// Largest id in an edge list plus one.
fn infer_node_count(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut max = None;
    for tok in text.lines().flat_map(|l| l.split('#').next().unwrap_or("").split_whitespace()) {
        if let Ok(id) = tok.parse::<usize>() {
            max = max.max(Some(id));
        }
    }
    max.map(|m| m + 1).ok_or_else(|| usage(format!("{} contains no edges; pass --n-skills", path.display())))
}

fn batches(records: &[InteractionRecord], n: usize, cfg: &RunConfig, max_len: usize) -> Result<Vec<Batch>> {
    let sequences = build_sequences(records, max_len);
    Ok(make_batches(&sequences, n, max_len, cfg.train.batch_size, 2 * n + 1)?)
}

pub fn embed(cfg: &RunConfig) -> Result<()> {
    let out_dir = prepare_out_dir(cfg)?;
    let graph = if cfg.random_graph {
        let n = cfg.n_skills.ok_or_else(|| usage("--random-graph needs --n-skills"))?;
        let e = cfg.edges_count.ok_or_else(|| usage("--random-graph needs --edges-count"))?;
        random_skill_graph(n, e, cfg.train.seed)?
    } else {
        let path = cfg.edges.as_deref().ok_or_else(|| usage("missing --edges (or pass --random-graph)"))?;
        let n = match cfg.n_skills {
            Some(n) => n,
            None => infer_node_count(path)?,
        };
        load_edge_list_path(path, n)?
    };
    let isolated = graph.isolated_nodes().len();
    println!("nodes {}  edges {}  isolated {}", graph.node_count(), graph.edge_count(), isolated);

    let started = Instant::now();
    let report = skill2vec(&graph, &cfg.walk_config())?;
    log::info!("skill2vec finished in {:.1}s", started.elapsed().as_secs_f64());
    let out = cfg.out.clone().unwrap_or_else(|| out_dir.join("skill2vec.txt"));
    report.table.export_path(&out)?;
    write_json(
        &out_dir.join("embed.json"),
        &json!({
            "config": cfg.to_json(),
            "nodes": graph.node_count(),
            "edges": graph.edge_count(),
            "isolated": isolated,
            "epoch_losses": report.epoch_losses,
        }),
    )?;
    echo_config(cfg, "embed_config.txt")?;
    println!("wrote {}", out.display());
    Ok(())
}

fn skill_table(cfg: &RunConfig, n: usize) -> Result<Option<EmbeddingTable>> {
    if cfg.train.lambda == 0.0 {
        return Ok(None);
    }
    let table = match (&cfg.embeddings, &cfg.edges) {
        (Some(path), _) => EmbeddingTable::import_path(path)?,
        (None, Some(_)) => skill2vec(&read_graph(cfg, n)?, &cfg.walk_config())?.table,
        (None, None) => return Err(usage("lambda > 0 needs --embeddings or --edges (or pass --lambda 0)")),
    };
    if table.count() != n || table.dim() != cfg.walk.dim {
        return Err(usage(format!(
            "embedding table is {}×{}, expected {n} skills × dim {}",
            table.count(),
            table.dim(),
            cfg.walk.dim
        )));
    }
    Ok(Some(table))
}

/// Saves `last.ckpt` after every epoch.
struct LastCheckpoint<'a> {
    path: PathBuf,
    vocab: &'a [String],
    run_config: serde_json::Value,
}

impl EpochObserver<f32> for LastCheckpoint<'_> {
    fn on_epoch(&mut self, model: &KtModel<f32>, adam: &AdamState<f32>, metrics: &EpochMetrics) -> kt_core::Result<()> {
        Checkpoint {
            model: model.clone(),
            adam: Some(adam.clone()),
            epoch: metrics.epoch,
            skill_vocab: self.vocab.to_vec(),
            run_config: self.run_config.clone(),
        }
        .save(&self.path)
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.8}"))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let out_dir = prepare_out_dir(cfg)?.to_path_buf();
    let parsed = read_interactions(cfg)?;
    let n = parsed.n_skills();
    let model_cfg = cfg.model_config(n);
    let table = skill_table(cfg, n)?;
    let (train_records, eval_records) = split_records(&parsed.records, &cfg.split_spec())?;
    let train_b = batches(&train_records, n, cfg, model_cfg.max_len)?;
    let eval_b = batches(&eval_records, n, cfg, model_cfg.max_len)?;
    log::info!("{} train batches, {} eval batches", train_b.len(), eval_b.len());

    let mut model = KtModel::<f32>::init(&model_cfg, cfg.train.seed)?;
    let run_config = cfg.to_json();
    let mut observer = LastCheckpoint { path: out_dir.join("last.ckpt"), vocab: &parsed.skill_vocab, run_config };
    let result = train_observed(&mut model, &train_b, &eval_b, table.as_ref(), &cfg.train, &mut observer)?;
    log::info!("training took {:.1}s", result.wall_clock_secs);

    Checkpoint {
        model,
        adam: None,
        epoch: result.best_epoch.unwrap_or(result.epochs_run()),
        skill_vocab: parsed.skill_vocab.clone(),
        run_config: cfg.to_json(),
    }
    .save(&out_dir.join("model.ckpt"))?;

    let mut tsv = config_comment(cfg);
    tsv.push_str("epoch\ttrain_kt\ttrain_projection\teval_auc\n");
    for m in &result.epochs {
        let _ = writeln!(
            tsv,
            "{}\t{:.8}\t{}\t{}",
            m.epoch,
            m.train_kt,
            opt_cell(m.train_projection),
            opt_cell(m.eval_auc)
        );
    }
    write_text(&out_dir.join("metrics.tsv"), &tsv)?;
    write_json(
        &out_dir.join("metrics.json"),
        &json!({
            "config": cfg.to_json(),
            "epochs": result.epochs,
            "final_auc": result.final_auc,
            "best_epoch": result.best_epoch,
            "last_auc": result.last_auc,
            "stopped_early": result.stopped_early,
            "epochs_run": result.epochs_run(),
        }),
    )?;
    echo_config(cfg, "train_config.txt")?;
    match result.final_auc {
        Some(auc) => println!("best eval AUC {auc:.4} at epoch {}", result.best_epoch.unwrap_or(0)),
        None => println!("trained {} epochs (no eval partition)", result.epochs_run()),
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let out_dir = prepare_out_dir(cfg)?;
    let path = required(&cfg.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::<f32>::load(path)?;
    let trained = RunConfig::from_json(&ckpt.run_config).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let data = required(&cfg.interactions, "interactions")?;
    let file = File::open(data).map_err(|e| io_err(data, e))?;
    let parsed = parse_interactions_with_vocab(file, &cfg.schema, &ckpt.skill_vocab)?;
    let n = ckpt.skill_vocab.len();
    let records = match cfg.partition {
        Partition::All => parsed.records,
        p => {
            let (train, eval) = split_records(&parsed.records, &trained.split_spec())?;
            if p == Partition::Train {
                train
            } else {
                eval
            }
        }
    };
    let eval_b = batches(&records, n, cfg, ckpt.model.config().max_len)?;
    let positions: usize = eval_b.iter().map(Batch::valid_count).sum();
    let auc = match evaluate(&ckpt.model, &eval_b) {
        Err(Error::AucUndefined) => {
            return Err(CliError::Core(Error::AucUndefined)).inspect_err(|_| {
                eprintln!("the selected partition has {positions} scored positions, all with the same label");
            })
        }
        other => other?,
    };
    let partition = cfg.partition.name();
    println!("AUC {auc:.6} over {positions} positions ({partition} partition)");
    write_json(
        &out_dir.join("eval.json"),
        &json!({
            "config": cfg.to_json(),
            "checkpoint_config": ckpt.run_config,
            "partition": partition,
            "positions": positions,
            "auc": auc,
        }),
    )?;
    echo_config(cfg, "eval_config.txt")?;
    Ok(())
}

pub fn experiment(cfg: &RunConfig) -> Result<()> {
    let out_dir = prepare_out_dir(cfg)?.to_path_buf();
    let parsed = read_interactions(cfg)?;
    let n = parsed.n_skills();
    let graph = read_graph(cfg, n)?;
    let exp = kt_core::ExperimentConfig {
        model: cfg.model_config(n),
        train: cfg.train.clone(),
        walk: cfg.walk_config(),
        split: cfg.split_spec(),
        seeds: cfg.seed_list(),
    };
    let total = cfg.fractions.len() * cfg.arms.len() * exp.seeds.len();
    let mut done = 0;
    let data = ExperimentData { records: &parsed.records, graph: &graph };
    let grid = Runner::new(data, &exp)?
        .on_cell(|c| {
            done += 1;
            eprintln!(
                "[{done}/{total}] fraction {} arm {} seed {}: AUC {:.4} after {} epochs",
                c.fraction, c.arm, c.seed, c.auc, c.epochs_run
            );
        })
        .run_grid(&cfg.fractions, &cfg.arms)?;

    let mut tsv = config_comment(cfg).into_bytes();
    grid.write_tsv(&mut tsv)?;
    fs::write(out_dir.join("grid.tsv"), tsv).map_err(|e| io_err(&out_dir, e))?;

    let margins: Vec<_> = cfg
        .fractions
        .iter()
        .flat_map(|&f| {
            let grid = &grid;
            cfg.arms.iter().filter(|&&a| a != kt_core::Arm::NoProj).map(move |&a| {
                json!({ "fraction": f, "arm": a, "versus": "noproj", "margin": grid.paired_margin(f, a, kt_core::Arm::NoProj) })
            })
        })
        .collect();
    write_json(
        &out_dir.join("summary.json"),
        &json!({ "config": cfg.to_json(), "rows": grid.summary(), "paired_margins": margins }),
    )?;
    let summary = grid.render_summary();
    write_text(&out_dir.join("summary.txt"), &format!("{}{summary}", config_comment(cfg)))?;
    echo_config(cfg, "experiment_config.txt")?;
    print!("{summary}");
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out_dir = prepare_out_dir(cfg)?;
    let mut spec = SynthConfig::new(cfg.students, cfg.skills, cfg.clusters, cfg.train.seed)?;
    spec.interactions_per_student = cfg.interactions_per_student;
    spec.learning_rate = cfg.synth_learning_rate;
    let data = synthesize_students(&spec)?;
    let out = cfg.out.clone().unwrap_or_else(|| out_dir.join("interactions.csv"));
    let edges_out = cfg.edges_out.clone().unwrap_or_else(|| out_dir.join("skills.edges"));
    let file = File::create(&out).map_err(|e| io_err(&out, e))?;
    write_interactions(&data.records, BufWriter::new(file))?;
    let file = File::create(&edges_out).map_err(|e| io_err(&edges_out, e))?;
    data.graph.write_edge_list(BufWriter::new(file))?;
    echo_config(cfg, "synth_config.txt")?;
    println!(
        "{} interactions from {} students over {} skills; truth graph has {} edges",
        data.records.len(),
        cfg.students,
        cfg.skills,
        data.graph.edge_count()
    );
    Ok(())
}
