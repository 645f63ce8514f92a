//! Ablation and limited-data experiment harness.
//!
//! A cell is one `(fraction, arm, seed)` triple: split and subsample the
//! records, build the arm's skill table, train, and record the best eval
//! AUC. Every arm sees the same split, model initialization and dropout
//! stream for a given seed, so arms are compared on paired seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{build_sequences, make_batches, split_records, Batch, InteractionRecord, SplitSpec};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::{random_skill_graph, SkillGraph};
use crate::model::{KtModel, ModelConfig};
use crate::node2vec::{skill2vec, WalkConfig};
use crate::train::{train, ExperimentResult, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Projection loss towards the given skill graph's embedding.
    Ours,
    /// No projection loss (`λ = 0`).
    NoProj,
    /// Projection loss towards a random graph with the same edge count.
    Random,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Ours, Arm::NoProj, Arm::Random];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Ours => "ours",
            Arm::NoProj => "noproj",
            Arm::Random => "random",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}` (expected ours, noproj or random)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub walk: WalkConfig,
    /// Split settings; `seed` and `subsample` are overridden per cell.
    pub split: SplitSpec,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.walk.validate()?;
        self.split.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub fraction: f64,
    pub arm: Arm,
    pub seed: u64,
    pub auc: f64,
    pub epochs_run: usize,
    pub result: ExperimentResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub fraction: f64,
    pub arm: Arm,
    pub seeds: usize,
    pub mean_auc: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsGrid {
    pub cells: Vec<CellResult>,
}

fn same_fraction(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

impl ResultsGrid {
    pub fn aucs(&self, fraction: f64, arm: Arm) -> Vec<(u64, f64)> {
        self.cells
            .iter()
            .filter(|c| c.arm == arm && same_fraction(c.fraction, fraction))
            .map(|c| (c.seed, c.auc))
            .collect()
    }

    pub fn mean_auc(&self, fraction: f64, arm: Arm) -> Option<f64> {
        let v = self.aucs(fraction, arm);
        (!v.is_empty()).then(|| v.iter().map(|p| p.1).sum::<f64>() / v.len() as f64)
    }

    /// Mean over seeds present in both arms of `AUC(a) − AUC(b)`.
    pub fn paired_margin(&self, fraction: f64, a: Arm, b: Arm) -> Option<f64> {
        let other: BTreeMap<u64, f64> = self.aucs(fraction, b).into_iter().collect();
        let diffs: Vec<f64> = self
            .aucs(fraction, a)
            .into_iter()
            .filter_map(|(s, x)| other.get(&s).map(|y| x - y))
            .collect();
        (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64)
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: Vec<(f64, Arm, Vec<f64>)> = Vec::new();
        for c in &self.cells {
            match groups.iter_mut().find(|g| g.1 == c.arm && same_fraction(g.0, c.fraction)) {
                Some(g) => g.2.push(c.auc),
                None => groups.push((c.fraction, c.arm, vec![c.auc])),
            }
        }
        groups
            .into_iter()
            .map(|(fraction, arm, v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = if v.len() > 1 {
                    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                SummaryRow { fraction, arm, seeds: v.len(), mean_auc: mean, std_auc: var.sqrt() }
            })
            .collect()
    }

    /// One row per cell: `fraction arm seed auc epochs_run`, tab separated.
    pub fn write_tsv<W: Write>(&self, mut sink: W) -> Result<()> {
        let io = |e| Error::io("<grid sink>", e);
        writeln!(sink, "fraction\tarm\tseed\tauc\tepochs_run").map_err(io)?;
        for c in &self.cells {
            writeln!(sink, "{}\t{}\t{}\t{:.6}\t{}", c.fraction, c.arm, c.seed, c.auc, c.epochs_run).map_err(io)?;
        }
        Ok(())
    }

    /// Human-readable table: one line per `(fraction, arm)` with mean ± std.
    pub fn render_summary(&self) -> String {
        let mut out = String::from("fraction  arm     seeds  mean_auc  std_auc\n");
        for r in self.summary() {
            out.push_str(&format!(
                "{:<8}  {:<6}  {:>5}  {:.4}    {:.4}\n",
                r.fraction, r.arm.name(), r.seeds, r.mean_auc, r.std_auc
            ));
        }
        out
    }
}

/// Interaction data plus the skill graph used by the `ours` arm.
pub struct ExperimentData<'a> {
    pub records: &'a [InteractionRecord],
    pub graph: &'a SkillGraph,
}

/// Runs the experiment grid with optional per-cell progress reporting.
pub struct Runner<'a> {
    data: ExperimentData<'a>,
    config: &'a ExperimentConfig,
    tables: BTreeMap<(Arm, u64), EmbeddingTable>,
    progress: Option<Box<dyn FnMut(&CellResult) + 'a>>,
}

impl<'a> Runner<'a> {
    pub fn new(data: ExperimentData<'a>, config: &'a ExperimentConfig) -> Result<Self> {
        config.validate()?;
        if data.graph.node_count() != config.model.n_problems {
            return Err(Error::Config(format!(
                "skill graph has {} nodes but the model expects {} problems",
                data.graph.node_count(),
                config.model.n_problems
            )));
        }
        Ok(Runner { data, config, tables: BTreeMap::new(), progress: None })
    }

    pub fn on_cell(mut self, f: impl FnMut(&CellResult) + 'a) -> Self {
        self.progress = Some(Box::new(f));
        self
    }

    fn table(&mut self, arm: Arm, seed: u64) -> Result<Option<&EmbeddingTable>> {
        if arm == Arm::NoProj {
            return Ok(None);
        }
        if !self.tables.contains_key(&(arm, seed)) {
            let walk = WalkConfig { seed, dim: self.config.model.skill_dim, ..self.config.walk.clone() };
            let graph = match arm {
                Arm::Random => random_skill_graph(self.data.graph.node_count(), self.data.graph.edge_count(), seed)?,
                _ => self.data.graph.clone(),
            };
            let table = skill2vec(&graph, &walk)?.table;
            self.tables.insert((arm, seed), table);
        }
        Ok(self.tables.get(&(arm, seed)))
    }

    fn batches(&self, fraction: f64, seed: u64) -> Result<(Vec<Batch>, Vec<Batch>)> {
        let spec = SplitSpec { seed, subsample: fraction, ..self.config.split.clone() };
        let (train, eval) = split_records(self.data.records, &spec)?;
        let m = &self.config.model;
        let pad = 2 * m.n_problems + 1;
        let bs = self.config.train.batch_size;
        let train = make_batches(&build_sequences(&train, m.max_len), m.n_problems, m.max_len, bs, pad)?;
        let eval = make_batches(&build_sequences(&eval, m.max_len), m.n_problems, m.max_len, bs, pad)?;
        if train.is_empty() {
            return Err(Error::InvalidArgument(format!("fraction {fraction} leaves no training sequences")));
        }
        if eval.is_empty() {
            return Err(Error::InvalidArgument("eval partition has no sequences of length ≥ 2".into()));
        }
        Ok((train, eval))
    }

    pub fn run_cell(&mut self, fraction: f64, arm: Arm, seed: u64) -> Result<CellResult> {
        let (train_b, eval_b) = self.batches(fraction, seed)?;
        let mut tc = TrainConfig { seed, ..self.config.train.clone() };
        if arm == Arm::NoProj {
            tc.lambda = 0.0;
        }
        let table = self.table(arm, seed)?.cloned();
        let mut model = KtModel::<f32>::init(&self.config.model, seed)?;
        let result = train(&mut model, &train_b, &eval_b, table.as_ref(), &tc)?;
        let auc = result.final_auc.ok_or(Error::AucUndefined)?;
        let cell = CellResult { fraction, arm, seed, auc, epochs_run: result.epochs_run(), result };
        if let Some(f) = self.progress.as_mut() {
            f(&cell);
        }
        Ok(cell)
    }

    /// Every `fraction × arm × seed` cell, in that nesting order.
    pub fn run_grid(&mut self, fractions: &[f64], arms: &[Arm]) -> Result<ResultsGrid> {
        if fractions.is_empty() || arms.is_empty() {
            return Err(Error::Config("experiment needs at least one fraction and one arm".into()));
        }
        let mut grid = ResultsGrid::default();
        for &fraction in fractions {
            for &arm in arms {
                for seed in self.config.seeds.clone() {
                    grid.cells.push(self.run_cell(fraction, arm, seed)?);
                }
            }
        }
        Ok(grid)
    }
}

/// The three ablation arms on the full training set.
pub fn run_ablation_suite(data: ExperimentData<'_>, config: &ExperimentConfig) -> Result<ResultsGrid> {
    Runner::new(data, config)?.run_grid(&[1.0], &Arm::ALL)
}

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.05, 0.1, 0.5, 1.0];

/// With and without the projection loss at each training fraction.
pub fn run_limited_data_study(
    data: ExperimentData<'_>,
    fractions: &[f64],
    config: &ExperimentConfig,
) -> Result<ResultsGrid> {
    Runner::new(data, config)?.run_grid(fractions, &[Arm::Ours, Arm::NoProj])
}
