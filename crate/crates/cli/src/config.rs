//! Resolved run configuration: built-in defaults, then a `key = value` file,
//! then `SKILLKT_OUT_DIR`, then command-line flags.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kt_core::{Arm, ModelConfig, Schema, SplitMode, SplitSpec, TrainConfig, WalkConfig};

pub const OUT_DIR_ENV: &str = "SKILLKT_OUT_DIR";

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Primary output file of `embed` and `synth`.
    pub out: Option<PathBuf>,
    pub edges_out: Option<PathBuf>,
    /// Not echoed: artifacts must not depend on where they are written.
    pub out_dir: PathBuf,
    pub n_skills: Option<usize>,
    pub schema: Schema,
    pub walk: WalkConfig,
    pub model: ModelConfig,
    /// `None` means four times `d_model`.
    pub feedforward_dim: Option<usize>,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub random_graph: bool,
    pub edges_count: Option<usize>,
    pub partition: Partition,
    pub arms: Vec<Arm>,
    pub fractions: Vec<f64>,
    pub seeds: usize,
    pub students: usize,
    pub skills: usize,
    pub clusters: usize,
    pub interactions_per_student: usize,
    pub synth_learning_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Eval,
    Train,
    All,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Eval => "eval",
            Partition::Train => "train",
            Partition::All => "all",
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            interactions: None,
            edges: None,
            embeddings: None,
            checkpoint: None,
            out: None,
            edges_out: None,
            out_dir: PathBuf::from("."),
            n_skills: None,
            schema: Schema::default(),
            walk: WalkConfig::default(),
            model: ModelConfig::new(0),
            feedforward_dim: None,
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            random_graph: false,
            edges_count: None,
            partition: Partition::Eval,
            arms: Arm::ALL.to_vec(),
            fractions: vec![1.0],
            seeds: 1,
            students: 50,
            skills: 16,
            clusters: 2,
            interactions_per_student: 100,
            synth_learning_rate: 0.05,
        }
    }
}

/// Every configuration key, in echo order.
pub const KEYS: &[&str] = &[
    "interactions",
    "edges",
    "embeddings",
    "checkpoint",
    "out",
    "edges_out",
    "n_skills",
    "col_user",
    "col_skill",
    "col_correct",
    "col_order",
    "delimiter",
    "skill_separators",
    "dim",
    "walk_length",
    "num_walks",
    "window",
    "p",
    "q",
    "negatives",
    "walk_epochs",
    "walk_learning_rate",
    "d_model",
    "n_heads",
    "encoder_layers",
    "decoder_layers",
    "dropout",
    "feedforward_dim",
    "projection_hidden",
    "max_len",
    "epochs",
    "batch_size",
    "learning_rate",
    "lambda",
    "patience",
    "eval_every",
    "seed",
    "train_fraction",
    "subsample",
    "split_mode",
    "random_graph",
    "edges_count",
    "partition",
    "arms",
    "fractions",
    "seeds",
    "students",
    "skills",
    "clusters",
    "interactions_per_student",
    "synth_learning_rate",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| format!("invalid value {value:?} for `{key}`: {e}"))
}

fn opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, String>
where
    T::Err: Display,
{
    match value.trim() {
        "" | "none" => Ok(None),
        v => num(key, v).map(Some),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    match value.trim() {
        "" | "none" => None,
        v => Some(PathBuf::from(v)),
    }
}

fn show<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn delimiter_byte(value: &str) -> Result<u8, String> {
    match value {
        "tab" | "\\t" | "\t" => Ok(b'\t'),
        v if v.len() == 1 => Ok(v.as_bytes()[0]),
        v => Err(format!("invalid value {v:?} for `delimiter`: expected one ASCII character or `tab`")),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "interactions" => self.interactions = path(v),
            "edges" => self.edges = path(v),
            "embeddings" => self.embeddings = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "out" => self.out = path(v),
            "edges_out" => self.edges_out = path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "n_skills" => self.n_skills = opt(key, v)?,
            "col_user" => self.schema.user = v.to_string(),
            "col_skill" => self.schema.skill = v.to_string(),
            "col_correct" => self.schema.correct = v.to_string(),
            "col_order" => self.schema.order = if v.is_empty() || v == "none" { None } else { Some(v.to_string()) },
            "delimiter" => self.schema.delimiter = delimiter_byte(value.trim_matches(|c| c == ' ' || c == '\n'))?,
            "skill_separators" => self.schema.multi_skill_separators = v.chars().collect(),
            "dim" => self.walk.dim = num(key, v)?,
            "walk_length" => self.walk.walk_length = num(key, v)?,
            "num_walks" => self.walk.num_walks = num(key, v)?,
            "window" => self.walk.window = num(key, v)?,
            "p" => self.walk.p = num(key, v)?,
            "q" => self.walk.q = num(key, v)?,
            "negatives" => self.walk.negatives = num(key, v)?,
            "walk_epochs" => self.walk.epochs = num(key, v)?,
            "walk_learning_rate" => self.walk.learning_rate = num(key, v)?,
            "d_model" => self.model.d_model = num(key, v)?,
            "n_heads" => self.model.n_heads = num(key, v)?,
            "encoder_layers" => self.model.n_encoder_layers = num(key, v)?,
            "decoder_layers" => self.model.n_decoder_layers = num(key, v)?,
            "dropout" => self.model.dropout = num(key, v)?,
            "feedforward_dim" => self.feedforward_dim = opt(key, v)?,
            "projection_hidden" => self.model.projection_hidden = opt(key, v)?,
            "max_len" => self.model.max_len = num(key, v)?,
            "epochs" => self.train.epochs = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "learning_rate" => self.train.learning_rate = num(key, v)?,
            "lambda" => self.train.lambda = num(key, v)?,
            "patience" => self.train.patience = num(key, v)?,
            "eval_every" => self.train.eval_every = num(key, v)?,
            "seed" => self.train.seed = num(key, v)?,
            "train_fraction" => self.split.train_fraction = num(key, v)?,
            "subsample" => self.split.subsample = num(key, v)?,
            "split_mode" => {
                self.split.mode = match v {
                    "record" => SplitMode::Record,
                    "student" => SplitMode::Student,
                    _ => return Err(format!("invalid value {v:?} for `split_mode`: expected record or student")),
                }
            }
            "random_graph" => self.random_graph = num(key, v)?,
            "edges_count" => self.edges_count = opt(key, v)?,
            "partition" => {
                self.partition = match v {
                    "eval" => Partition::Eval,
                    "train" => Partition::Train,
                    "all" => Partition::All,
                    _ => return Err(format!("invalid value {v:?} for `partition`: expected eval, train or all")),
                }
            }
            "arms" => self.arms = list(key, v)?,
            "fractions" => self.fractions = list(key, v)?,
            "seeds" => self.seeds = num(key, v)?,
            "students" => self.students = num(key, v)?,
            "skills" => self.skills = num(key, v)?,
            "clusters" => self.clusters = num(key, v)?,
            "interactions_per_student" => self.interactions_per_student = num(key, v)?,
            "synth_learning_rate" => self.synth_learning_rate = num(key, v)?,
            _ => return Err(format!("unknown configuration key `{key}`")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "interactions" => show_path(&self.interactions),
            "edges" => show_path(&self.edges),
            "embeddings" => show_path(&self.embeddings),
            "checkpoint" => show_path(&self.checkpoint),
            "out" => show_path(&self.out),
            "edges_out" => show_path(&self.edges_out),
            "n_skills" => show(&self.n_skills),
            "col_user" => self.schema.user.clone(),
            "col_skill" => self.schema.skill.clone(),
            "col_correct" => self.schema.correct.clone(),
            "col_order" => show(&self.schema.order),
            "delimiter" => match self.schema.delimiter {
                b'\t' => "tab".into(),
                d => (d as char).to_string(),
            },
            "skill_separators" => self.schema.multi_skill_separators.iter().collect(),
            "dim" => self.walk.dim.to_string(),
            "walk_length" => self.walk.walk_length.to_string(),
            "num_walks" => self.walk.num_walks.to_string(),
            "window" => self.walk.window.to_string(),
            "p" => self.walk.p.to_string(),
            "q" => self.walk.q.to_string(),
            "negatives" => self.walk.negatives.to_string(),
            "walk_epochs" => self.walk.epochs.to_string(),
            "walk_learning_rate" => self.walk.learning_rate.to_string(),
            "d_model" => self.model.d_model.to_string(),
            "n_heads" => self.model.n_heads.to_string(),
            "encoder_layers" => self.model.n_encoder_layers.to_string(),
            "decoder_layers" => self.model.n_decoder_layers.to_string(),
            "dropout" => self.model.dropout.to_string(),
            "feedforward_dim" => self.feedforward().to_string(),
            "projection_hidden" => show(&self.model.projection_hidden),
            "max_len" => self.model.max_len.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "lambda" => self.train.lambda.to_string(),
            "patience" => self.train.patience.to_string(),
            "eval_every" => self.train.eval_every.to_string(),
            "seed" => self.train.seed.to_string(),
            "train_fraction" => self.split.train_fraction.to_string(),
            "subsample" => self.split.subsample.to_string(),
            "split_mode" => match self.split.mode {
                SplitMode::Record => "record".into(),
                SplitMode::Student => "student".into(),
            },
            "random_graph" => self.random_graph.to_string(),
            "edges_count" => show(&self.edges_count),
            "partition" => self.partition.name().into(),
            "arms" => join(&self.arms),
            "fractions" => join(&self.fractions),
            "seeds" => self.seeds.to_string(),
            "students" => self.students.to_string(),
            "skills" => self.skills.to_string(),
            "clusters" => self.clusters.to_string(),
            "interactions_per_student" => self.interactions_per_student.to_string(),
            "synth_learning_rate" => self.synth_learning_rate.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Resolved `(key, value)` pairs in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|&k| (k, self.get(k))).collect()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_file_contents(&mut self, text: &str, origin: &Path) -> Result<(), String> {
        for (i, line) in text.lines().enumerate() {
            let content = match line.trim_start() {
                l if l.starts_with('#') => continue,
                l => l.trim_end(),
            };
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected `key = value`", origin.display(), i + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| format!("{}:{}: {e}", origin.display(), i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        self.apply_file_contents(&text, path)
    }

    pub fn render(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.entries().into_iter().map(|(k, v)| (k.to_string(), serde_json::Value::String(v))).collect(),
        )
    }

    /// Restores the keys of an echoed configuration.
    pub fn from_json(value: &serde_json::Value) -> Result<Self, String> {
        let map = value.as_object().ok_or("stored run configuration is not an object")?;
        let mut cfg = RunConfig::default();
        for (k, v) in map {
            let v = v.as_str().ok_or_else(|| format!("stored value for `{k}` is not a string"))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn feedforward(&self) -> usize {
        self.feedforward_dim.unwrap_or(4 * self.model.d_model)
    }

    /// Model configuration for `n_problems` skills; the skill space follows `dim`.
    pub fn model_config(&self, n_problems: usize) -> ModelConfig {
        ModelConfig {
            n_problems,
            skill_dim: self.walk.dim,
            feedforward_dim: self.feedforward(),
            ..self.model.clone()
        }
    }

    pub fn walk_config(&self) -> WalkConfig {
        WalkConfig { seed: self.train.seed, ..self.walk.clone() }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { seed: self.train.seed, ..self.split.clone() }
    }

    /// `seeds` consecutive seeds starting at `seed`.
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.train.seed + i).collect()
    }
}
