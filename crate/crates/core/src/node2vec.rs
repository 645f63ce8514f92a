//! Skill2Vec: second-order biased random walks over the skill graph followed
//! by skip-gram training with negative sampling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::SkillGraph;

/// Walk and skip-gram settings. Defaults follow the published experiments
/// (walk length 128, p = q = 1, 300 000 walks, window 4, 25 dimensions) plus
/// the usual word2vec optimization conventions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub walk_length: usize,
    pub num_walks: usize,
    pub p: f64,
    pub q: f64,
    pub window: usize,
    pub dim: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            walk_length: 128,
            num_walks: 300_000,
            p: 1.0,
            q: 1.0,
            window: 4,
            dim: 25,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.walk_length < 2 {
            return fail("walk_length must be at least 2");
        }
        if !(self.p > 0.0 && self.p.is_finite()) || !(self.q > 0.0 && self.q.is_finite()) {
            return fail("p and q must be positive");
        }
        if self.dim < 1 {
            return fail("dim must be at least 1");
        }
        if self.window < 1 {
            return fail("window must be at least 1");
        }
        if self.num_walks < 1 || self.epochs < 1 {
            return fail("num_walks and epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        Ok(())
    }
}

/// Next-step distribution from `cur` given the previous node, as
/// `(neighbor, probability)` pairs in adjacency order. Unnormalized weights
/// are `1/p` for returning to `prev`, 1 for neighbors of `prev`, `1/q`
/// otherwise. Without a previous node the step is uniform. Empty when `cur`
/// is isolated.
pub fn node2vec_transition(
    graph: &SkillGraph,
    prev: Option<usize>,
    cur: usize,
    p: f64,
    q: f64,
) -> Vec<(usize, f64)> {
    let weights = transition_weights(graph, prev, cur, p, q);
    let total: f64 = weights.iter().sum();
    graph
        .neighbors(cur)
        .iter()
        .zip(weights)
        .map(|(&n, w)| (n, w / total))
        .collect()
}

fn transition_weights(graph: &SkillGraph, prev: Option<usize>, cur: usize, p: f64, q: f64) -> Vec<f64> {
    let neighbors = graph.neighbors(cur);
    match prev {
        None => vec![1.0; neighbors.len()],
        Some(prev) => neighbors
            .iter()
            .map(|&x| {
                if x == prev {
                    1.0 / p
                } else if graph.is_adjacent(x, prev) {
                    1.0
                } else {
                    1.0 / q
                }
            })
            .collect(),
    }
}

/// Walks; node ids are stored as `u32`.
pub type WalkCorpus = Vec<Vec<u32>>;

/// Generates `num_walks` walks. Start nodes cycle round-robin over the
/// non-isolated nodes in id order, so every start is used either
/// `⌊num_walks / k⌋` or one more time.
pub fn generate_walks(graph: &SkillGraph, config: &WalkConfig) -> Result<WalkCorpus> {
    config.validate()?;
    let starts: Vec<usize> = (0..graph.node_count()).filter(|&v| graph.degree(v) > 0).collect();
    if starts.is_empty() {
        return Err(Error::NoWalkableNodes);
    }
    let unbiased = config.p == 1.0 && config.q == 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut corpus = Vec::with_capacity(config.num_walks);
    for w in 0..config.num_walks {
        let start = starts[w % starts.len()];
        let mut walk = Vec::with_capacity(config.walk_length);
        walk.push(start as u32);
        let mut prev: Option<usize> = None;
        let mut cur = start;
        while walk.len() < config.walk_length {
            let neighbors = graph.neighbors(cur);
            if neighbors.is_empty() {
                break;
            }
            let next = if unbiased || prev.is_none() {
                neighbors[rng.random_range(0..neighbors.len())]
            } else {
                let weights = transition_weights(graph, prev, cur, config.p, config.q);
                let dist = WeightedIndex::new(&weights).expect("positive weights");
                neighbors[dist.sample(&mut rng)]
            };
            walk.push(next as u32);
            prev = Some(cur);
            cur = next;
        }
        corpus.push(walk);
    }
    Ok(corpus)
}

/// Outcome of skip-gram training.
#[derive(Clone, Debug)]
pub struct SkipGramReport {
    pub table: EmbeddingTable,
    /// Mean negative-sampling loss per positive pair, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sigmoid(x: f32) -> f64 {
    let x = x as f64;
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Skip-gram with negative sampling over `node_count` ids. For each center
/// `c` and context `x` within `window` positions, ascends
/// `log σ(u_c·v_x) + Σ_neg log σ(−u_c·v_neg)` with negatives drawn from the
/// unigram distribution raised to 3/4. The learning rate decays linearly over
/// all epochs. Returns the center-side vectors.
pub fn train_skipgram(corpus: &WalkCorpus, node_count: usize, config: &WalkConfig) -> Result<SkipGramReport> {
    config.validate()?;
    let total_tokens: usize = corpus.iter().map(Vec::len).sum();
    if total_tokens == 0 {
        return Err(Error::InvalidArgument("skip-gram corpus is empty".into()));
    }
    let dim = config.dim;
    let mut counts = vec![0f64; node_count];
    for &tok in corpus.iter().flatten() {
        let t = tok as usize;
        if t >= node_count {
            return Err(Error::Range {
                id: t,
                limit: node_count,
                context: "in walk corpus".into(),
            });
        }
        counts[t] += 1.0;
    }
    let noise = WeightedIndex::new(counts.iter().map(|c| c.powf(0.75))).expect("non-empty corpus");

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let bound = 0.5 / dim as f32;
    let mut input: Vec<f32> = (0..node_count * dim).map(|_| rng.random_range(-bound..bound)).collect();
    let mut output = vec![0f32; node_count * dim];
    let mut grad_center = vec![0f32; dim];

    let lr0 = config.learning_rate as f32;
    let schedule = (config.epochs * total_tokens) as f32;
    let mut processed = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        let (mut loss_sum, mut pairs) = (0f64, 0usize);
        for walk in corpus {
            for (i, &center) in walk.iter().enumerate() {
                let lr = lr0 * (1.0 - processed as f32 / schedule).max(1e-4);
                processed += 1;
                let c = center as usize;
                let lo = i.saturating_sub(config.window);
                let hi = (i + config.window + 1).min(walk.len());
                for j in lo..hi {
                    if j == i {
                        continue;
                    }
                    let ctx = walk[j] as usize;
                    grad_center.iter_mut().for_each(|g| *g = 0.0);
                    let u = &input[c * dim..(c + 1) * dim];
                    for k in 0..=config.negatives {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0f32)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let v = &mut output[target * dim..(target + 1) * dim];
                        let dot: f32 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                        loss_sum -= if label > 0.5 { log_sigmoid(dot) } else { log_sigmoid(-dot) };
                        let g = (label - sigmoid(dot)) * lr;
                        for ((gc, vv), &uu) in grad_center.iter_mut().zip(v.iter_mut()).zip(u) {
                            *gc += g * *vv;
                            *vv += g * uu;
                        }
                    }
                    input[c * dim..(c + 1) * dim]
                        .iter_mut()
                        .zip(&grad_center)
                        .for_each(|(w, g)| *w += g);
                    pairs += 1;
                }
            }
        }
        epoch_losses.push(if pairs > 0 { loss_sum / pairs as f64 } else { 0.0 });
    }

    Ok(SkipGramReport {
        table: EmbeddingTable::from_vec(node_count, dim, input)?,
        epoch_losses,
    })
}

/// Full Skill2Vec pipeline: walks, skip-gram, then zero vectors for skills
/// that have no edges.
pub fn skill2vec(graph: &SkillGraph, config: &WalkConfig) -> Result<SkipGramReport> {
    let corpus = generate_walks(graph, config)?;
    let mut report = train_skipgram(&corpus, graph.node_count(), config)?;
    let isolated = graph.isolated_nodes();
    if !isolated.is_empty() {
        log::info!("{} isolated skills receive zero vectors: {:?}", isolated.len(), isolated);
    }
    for id in isolated {
        report.table.row_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(report)
}
