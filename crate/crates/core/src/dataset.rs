//! Interaction logs: parsing, per-student sequences, splits, batching and a
//! synthetic generator with a known skill structure.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SkillGraph;

/// One answered question. Problems are identified with skills.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: i64,
    pub order_key: i64,
    pub skill_id: usize,
    pub correct: u8,
}

/// Column mapping for delimiter-separated interaction files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub user: String,
    pub skill: String,
    pub correct: String,
    /// Original log order; file order is used when absent.
    pub order: Option<String>,
    pub delimiter: u8,
    /// Separators splitting one skill cell into several skill tags.
    pub multi_skill_separators: Vec<char>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            user: "user_id".into(),
            skill: "skill_id".into(),
            correct: "correct".into(),
            order: Some("order_id".into()),
            delimiter: b',',
            multi_skill_separators: vec!['_', ';'],
        }
    }
}

/// Result of [`parse_interactions`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedInteractions {
    pub records: Vec<InteractionRecord>,
    /// Dense skill id → original skill token.
    pub skill_vocab: Vec<String>,
    pub dropped_missing_skill: usize,
    pub dropped_invalid: usize,
    /// Extra records created by splitting multi-skill rows.
    pub expanded_rows: usize,
}

impl ParsedInteractions {
    pub fn n_skills(&self) -> usize {
        self.skill_vocab.len()
    }
}

fn is_missing(tok: &str) -> bool {
    matches!(tok.to_ascii_lowercase().as_str(), "" | "na" | "nan" | "null" | "none")
}

struct RawRow {
    user_id: i64,
    order_key: i64,
    skills: Vec<String>,
    correct: u8,
}

fn read_rows<R: Read>(source: R, schema: &Schema) -> Result<(Vec<RawRow>, usize, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}` (header: {:?})", headers.iter().collect::<Vec<_>>())))
    };
    let user_col = column(&schema.user)?;
    let skill_col = column(&schema.skill)?;
    let correct_col = column(&schema.correct)?;
    let order_col = match &schema.order {
        Some(name) => headers.iter().position(|h| h == name.as_str()),
        None => None,
    };

    let (mut rows, mut missing, mut invalid) = (Vec::new(), 0, 0);
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let field = |c: usize| row.get(c).unwrap_or("");
        let skill_cell = field(skill_col);
        let skills: Vec<String> = skill_cell
            .split(|ch| schema.multi_skill_separators.contains(&ch))
            .map(str::trim)
            .filter(|t| !is_missing(t))
            .map(str::to_string)
            .collect();
        if skills.is_empty() {
            missing += 1;
            continue;
        }
        let correct = match field(correct_col).parse::<f64>() {
            Ok(0.0) => 0,
            Ok(1.0) => 1,
            _ => {
                log::debug!("line {line}: non-binary correctness `{}` dropped", field(correct_col));
                invalid += 1;
                continue;
            }
        };
        let Ok(user_id) = field(user_col).parse::<i64>() else {
            log::debug!("line {line}: non-integer user id `{}` dropped", field(user_col));
            invalid += 1;
            continue;
        };
        let order_key = match order_col {
            Some(c) => match field(c).parse::<i64>() {
                Ok(k) => k,
                Err(_) => {
                    invalid += 1;
                    continue;
                }
            },
            None => i as i64,
        };
        rows.push(RawRow {
            user_id,
            order_key,
            skills,
            correct,
        });
    }
    Ok((rows, missing, invalid))
}

fn expand(rows: Vec<RawRow>, index: &HashMap<String, usize>, parsed: &mut ParsedInteractions) {
    for row in rows {
        let mut kept = 0;
        for tok in &row.skills {
            let Some(&skill_id) = index.get(tok) else { continue };
            parsed.records.push(InteractionRecord {
                user_id: row.user_id,
                order_key: row.order_key,
                skill_id,
                correct: row.correct,
            });
            kept += 1;
        }
        match kept {
            0 => parsed.dropped_missing_skill += 1,
            k => parsed.expanded_rows += k - 1,
        }
    }
}

/// Parses an interaction log and re-indexes skills densely. Skill tokens are
/// ordered numerically when they are all integers, lexicographically
/// otherwise, so the same file always yields the same ids.
pub fn parse_interactions<R: Read>(source: R, schema: &Schema) -> Result<ParsedInteractions> {
    let (rows, missing, invalid) = read_rows(source, schema)?;
    let mut vocab: Vec<String> = rows.iter().flat_map(|r| r.skills.iter().cloned()).collect();
    vocab.sort();
    vocab.dedup();
    if vocab.iter().all(|t| t.parse::<i64>().is_ok()) {
        vocab.sort_by_key(|t| t.parse::<i64>().unwrap());
    }
    let index: HashMap<String, usize> = vocab.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
    let mut parsed = ParsedInteractions {
        skill_vocab: vocab,
        dropped_missing_skill: missing,
        dropped_invalid: invalid,
        ..Default::default()
    };
    expand(rows, &index, &mut parsed);
    if parsed.expanded_rows > 0 {
        log::info!("{} extra records from multi-skill rows", parsed.expanded_rows);
    }
    Ok(parsed)
}

/// Like [`parse_interactions`] but maps skills through a fixed vocabulary;
/// rows whose skills are all unknown are dropped.
pub fn parse_interactions_with_vocab<R: Read>(
    source: R,
    schema: &Schema,
    vocab: &[String],
) -> Result<ParsedInteractions> {
    let (rows, missing, invalid) = read_rows(source, schema)?;
    let index: HashMap<String, usize> = vocab.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
    let mut parsed = ParsedInteractions {
        skill_vocab: vocab.to_vec(),
        dropped_missing_skill: missing,
        dropped_invalid: invalid,
        ..Default::default()
    };
    expand(rows, &index, &mut parsed);
    Ok(parsed)
}

pub fn parse_interactions_path(path: &Path, schema: &Schema) -> Result<ParsedInteractions> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(file, schema)
}

/// Writes records in the default schema (`user_id,order_id,skill_id,correct`).
pub fn write_interactions<W: Write>(records: &[InteractionRecord], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["user_id", "order_id", "skill_id", "correct"])?;
    for r in records {
        w.write_record([
            r.user_id.to_string(),
            r.order_key.to_string(),
            r.skill_id.to_string(),
            r.correct.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<interaction sink>", e))
}

/// Combined (problem, correctness) index `π + r·n_problems`.
pub fn interaction_index(problem: usize, correct: u8, n_problems: usize) -> Result<usize> {
    if problem >= n_problems {
        return Err(Error::Range {
            id: problem,
            limit: n_problems,
            context: "problem id in interaction index".into(),
        });
    }
    if correct > 1 {
        return Err(Error::InvalidArgument(format!("correctness must be 0 or 1, got {correct}")));
    }
    Ok(problem + correct as usize * n_problems)
}

/// Inverse of [`interaction_index`].
pub fn decode_interaction(index: usize, n_problems: usize) -> (usize, u8) {
    (index % n_problems, (index / n_problems) as u8)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StudentSequence {
    pub user_id: i64,
    pub skills: Vec<usize>,
    pub correct: Vec<u8>,
}

impl StudentSequence {
    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }
}

/// Groups records per user in `order_key` order (ties keep input order),
/// cuts them into consecutive windows of at most `max_len`, and drops
/// windows shorter than 2.
pub fn build_sequences(records: &[InteractionRecord], max_len: usize) -> Vec<StudentSequence> {
    let mut by_user: BTreeMap<i64, Vec<&InteractionRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user_id).or_default().push(r);
    }
    let max_len = max_len.max(1);
    let mut out = Vec::new();
    for (user_id, mut recs) in by_user {
        recs.sort_by_key(|r| r.order_key);
        for chunk in recs.chunks(max_len) {
            if chunk.len() < 2 {
                continue;
            }
            out.push(StudentSequence {
                user_id,
                skills: chunk.iter().map(|r| r.skill_id).collect(),
                correct: chunk.iter().map(|r| r.correct).collect(),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Shuffle individual records; a student can land in both partitions.
    Record,
    /// Shuffle students; each student's records stay together.
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub subsample: f64,
    pub seed: u64,
    pub mode: SplitMode,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.9,
            subsample: 1.0,
            seed: 0,
            mode: SplitMode::Record,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train fraction", self.train_fraction), ("subsample fraction", self.subsample)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {f}")));
            }
        }
        Ok(())
    }
}

fn fraction_count(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction + 1e-9).floor() as usize
}

/// Seeded train/eval partition, followed by subsampling of the training
/// side. Both outputs keep the input order.
pub fn split_records(records: &[InteractionRecord], spec: &SplitSpec) -> Result<(Vec<InteractionRecord>, Vec<InteractionRecord>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let in_train: Vec<bool> = match spec.mode {
        SplitMode::Record => {
            let mut idx: Vec<usize> = (0..records.len()).collect();
            idx.shuffle(&mut rng);
            let mut flags = vec![false; records.len()];
            for &i in &idx[..fraction_count(records.len(), spec.train_fraction)] {
                flags[i] = true;
            }
            flags
        }
        SplitMode::Student => {
            let mut users: Vec<i64> = records.iter().map(|r| r.user_id).collect();
            users.sort_unstable();
            users.dedup();
            users.shuffle(&mut rng);
            let keep = fraction_count(users.len(), spec.train_fraction);
            let chosen: std::collections::HashSet<i64> = users[..keep].iter().copied().collect();
            records.iter().map(|r| chosen.contains(&r.user_id)).collect()
        }
    };
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (r, &t) in records.iter().zip(&in_train) {
        if t {
            train.push(*r);
        } else {
            eval.push(*r);
        }
    }
    let train = subsample(&train, spec.subsample, spec.seed)?;
    Ok((train, eval))
}

/// Keeps `⌊fraction·n⌋` records. One seeded permutation is truncated, so
/// smaller fractions are subsets of larger ones under the same seed.
pub fn subsample(records: &[InteractionRecord], fraction: f64, seed: u64) -> Result<Vec<InteractionRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subsample fraction must lie in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(records.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut rng);
    let mut keep = idx[..fraction_count(records.len(), fraction)].to_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| records[i]).collect())
}

/// Padded, masked mini-batch; arrays are row-major `size × len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub len: usize,
    pub user_ids: Vec<i64>,
    /// Problem (skill) ids.
    pub encoder_ids: Vec<usize>,
    /// Interaction index of the previous step; [`Batch::start_token`] at position 0.
    pub decoder_ids: Vec<usize>,
    pub labels: Vec<u8>,
    pub mask: Vec<bool>,
    pub n_problems: usize,
    pub pad_id: usize,
}

impl Batch {
    pub fn start_token(&self) -> usize {
        2 * self.n_problems
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Recovers the sequences from the unmasked positions.
    pub fn unbatch(&self) -> Vec<StudentSequence> {
        (0..self.size)
            .map(|b| {
                let row = b * self.len..(b + 1) * self.len;
                let valid: Vec<usize> = row.filter(|&i| self.mask[i]).collect();
                StudentSequence {
                    user_id: self.user_ids[b],
                    skills: valid.iter().map(|&i| self.encoder_ids[i]).collect(),
                    correct: valid.iter().map(|&i| self.labels[i]).collect(),
                }
            })
            .collect()
    }
}

/// Batches sequences in order. Each batch is padded to its longest
/// sequence; position `i` of the decoder sees the interaction at `i − 1`
/// (the start token at 0), never the answer it must predict.
pub fn make_batches(
    sequences: &[StudentSequence],
    n_problems: usize,
    max_len: usize,
    batch_size: usize,
    pad_id: usize,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if pad_id <= 2 * n_problems {
        return Err(Error::Config(format!(
            "pad id {pad_id} collides with problem/interaction ids (must exceed {})",
            2 * n_problems
        )));
    }
    let mut batches = Vec::with_capacity(sequences.len().div_ceil(batch_size));
    for group in sequences.chunks(batch_size) {
        let len = group.iter().map(StudentSequence::len).max().unwrap_or(0);
        if len > max_len {
            return Err(Error::InvalidArgument(format!("sequence of length {len} exceeds max_len {max_len}")));
        }
        let cells = group.len() * len;
        let mut batch = Batch {
            size: group.len(),
            len,
            user_ids: group.iter().map(|s| s.user_id).collect(),
            encoder_ids: vec![pad_id; cells],
            decoder_ids: vec![pad_id; cells],
            labels: vec![0; cells],
            mask: vec![false; cells],
            n_problems,
            pad_id,
        };
        for (b, seq) in group.iter().enumerate() {
            for i in 0..seq.len() {
                let at = b * len + i;
                batch.encoder_ids[at] = seq.skills[i];
                if seq.skills[i] >= n_problems {
                    return Err(Error::Range {
                        id: seq.skills[i],
                        limit: n_problems,
                        context: format!("in sequence of user {}", seq.user_id),
                    });
                }
                batch.decoder_ids[at] = if i == 0 {
                    2 * n_problems
                } else {
                    interaction_index(seq.skills[i - 1], seq.correct[i - 1], n_problems)?
                };
                batch.labels[at] = seq.correct[i];
                batch.mask[at] = true;
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Partition of skills into clusters that share a latent ability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub clusters: Vec<Vec<usize>>,
}

impl ClusterSpec {
    /// `k` contiguous clusters of near-equal size over `n_skills`.
    pub fn even(n_skills: usize, k: usize) -> Result<Self> {
        if k == 0 || k > n_skills {
            return Err(Error::Config(format!("cannot split {n_skills} skills into {k} non-empty clusters")));
        }
        let clusters = (0..k)
            .map(|c| ((c * n_skills / k)..((c + 1) * n_skills / k)).collect())
            .collect();
        Ok(ClusterSpec { clusters })
    }

    fn cluster_of(&self, n_skills: usize) -> Result<Vec<usize>> {
        let mut owner = vec![usize::MAX; n_skills];
        for (c, members) in self.clusters.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Config(format!("cluster {c} is empty")));
            }
            for &s in members {
                if s >= n_skills {
                    return Err(Error::Config(format!("cluster {c} names skill {s} >= {n_skills}")));
                }
                if owner[s] != usize::MAX {
                    return Err(Error::Config(format!("skill {s} belongs to two clusters")));
                }
                owner[s] = c;
            }
        }
        if let Some(s) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::Config(format!("skill {s} is in no cluster")));
        }
        Ok(owner)
    }

    /// Graph with every intra-cluster pair connected.
    pub fn ground_truth_graph(&self, n_skills: usize) -> Result<SkillGraph> {
        self.cluster_of(n_skills)?;
        let mut g = SkillGraph::new(n_skills);
        for members in &self.clusters {
            for (i, &u) in members.iter().enumerate() {
                for &v in &members[i + 1..] {
                    g.add_edge(u, v)?;
                }
            }
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub students: usize,
    pub skills: usize,
    pub clusters: ClusterSpec,
    pub interactions_per_student: usize,
    /// Ability gained per practiced interaction within a cluster.
    pub learning_rate: f64,
    pub ability_std: f64,
    pub difficulty_std: f64,
    /// Fixed per-skill difficulties instead of sampled ones.
    pub difficulties: Option<Vec<f64>>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(students: usize, skills: usize, clusters: usize, seed: u64) -> Result<Self> {
        Ok(SynthConfig {
            students,
            skills,
            clusters: ClusterSpec::even(skills, clusters)?,
            interactions_per_student: 100,
            learning_rate: 0.05,
            ability_std: 1.0,
            difficulty_std: 1.0,
            difficulties: None,
            seed,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub records: Vec<InteractionRecord>,
    pub graph: SkillGraph,
    pub difficulties: Vec<f64>,
}

/// Simulated students: per-cluster ability `a ~ N(0, ability_std²)`,
/// per-skill difficulty `d ~ N(0, difficulty_std²)`, practice skills chosen
/// uniformly, `P(correct) = σ(a_cluster − d_skill)`, and the cluster's ability
/// grows by `learning_rate` after every attempt. The returned graph links all
/// skills within a cluster.
pub fn synthesize_students(config: &SynthConfig) -> Result<SyntheticData> {
    let n = config.skills;
    if n == 0 || config.students == 0 {
        return Err(Error::Config("need at least one student and one skill".into()));
    }
    let owner = config.clusters.cluster_of(n)?;
    let graph = config.clusters.ground_truth_graph(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let difficulties = match &config.difficulties {
        Some(d) if d.len() == n => d.clone(),
        Some(d) => return Err(Error::Config(format!("{} difficulties for {n} skills", d.len()))),
        None => (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                config.difficulty_std * z
            })
            .collect(),
    };
    let mut records = Vec::with_capacity(config.students * config.interactions_per_student);
    let mut order = 0i64;
    for user in 0..config.students {
        let mut ability: Vec<f64> = (0..config.clusters.clusters.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                config.ability_std * z
            })
            .collect();
        for _ in 0..config.interactions_per_student {
            let skill = rng.random_range(0..n);
            let c = owner[skill];
            let p = 1.0 / (1.0 + (difficulties[skill] - ability[c]).exp());
            let correct = u8::from(rng.random::<f64>() < p);
            records.push(InteractionRecord {
                user_id: user as i64,
                order_key: order,
                skill_id: skill,
                correct,
            });
            order += 1;
            ability[c] += config.learning_rate;
        }
    }
    Ok(SyntheticData {
        records,
        graph,
        difficulties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(user_id: i64, order_key: i64, skill_id: usize, correct: u8) -> InteractionRecord {
        InteractionRecord {
            user_id,
            order_key,
            skill_id,
            correct,
        }
    }

    #[test]
    fn parses_rows_and_users() {
        let src = "user_id,order_id,skill_id,correct\n1,1,10,1\n2,2,12,0\n1,3,10,0\n";
        let p = parse_interactions(src.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(p.records.len(), 3);
        let mut users: Vec<i64> = p.records.iter().map(|r| r.user_id).collect();
        users.sort();
        users.dedup();
        assert_eq!(users, vec![1, 2]);
        assert_eq!(p.skill_vocab, vec!["10", "12"]);
        assert_eq!(p.records[1].skill_id, 1);
    }

    #[test]
    fn non_binary_correctness_is_dropped() {
        let src = "user_id,skill_id,correct\n1,3,2\n1,3,1\n";
        let p = parse_interactions(src.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.dropped_invalid, 1);
    }

    #[test]
    fn missing_skill_rows_are_counted() {
        let src = "user_id,skill_id,correct\n1,,1\n1,NA,0\n1,4,1\n";
        let p = parse_interactions(src.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.dropped_missing_skill, 2);
    }

    #[test]
    fn missing_column_is_a_schema_error() {
        let src = "user,skill_id,correct\n1,4,1\n";
        assert!(matches!(
            parse_interactions(src.as_bytes(), &Schema::default()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn multi_skill_rows_expand_in_place() {
        let src = "user_id\tskill_id\tcorrect\n7\t3_5\t1\n7\t5\t0\n";
        let schema = Schema {
            delimiter: b'\t',
            order: None,
            ..Schema::default()
        };
        let p = parse_interactions(src.as_bytes(), &schema).unwrap();
        assert_eq!(p.expanded_rows, 1);
        let ids: Vec<(usize, i64)> = p.records.iter().map(|r| (r.skill_id, r.order_key)).collect();
        assert_eq!(ids, vec![(0, 0), (1, 0), (1, 1)]);
    }

    #[test]
    fn fixed_vocab_drops_unknown_skills() {
        let src = "user_id,skill_id,correct\n1,3,1\n1,9,1\n";
        let p = parse_interactions_with_vocab(src.as_bytes(), &Schema::default(), &["9".to_string()]).unwrap();
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.records[0].skill_id, 0);
        assert_eq!(p.dropped_missing_skill, 1);
    }

    #[test]
    fn interaction_index_values() {
        assert_eq!(interaction_index(5, 0, 110).unwrap(), 5);
        assert_eq!(interaction_index(5, 1, 110).unwrap(), 115);
        assert_eq!(interaction_index(109, 1, 110).unwrap(), 219);
        assert!(interaction_index(110, 0, 110).is_err());
    }

    #[test]
    fn interaction_index_is_a_bijection() {
        let n = 37;
        let mut seen = vec![false; 2 * n];
        for p in 0..n {
            for r in 0..2u8 {
                let j = interaction_index(p, r, n).unwrap();
                assert!(!seen[j]);
                seen[j] = true;
                assert_eq!(decode_interaction(j, n), (p, r));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn sequences_are_chunked() {
        let records: Vec<_> = (0..450).map(|i| rec(1, i, 0, 1)).collect();
        let seqs = build_sequences(&records, 200);
        assert_eq!(seqs.iter().map(StudentSequence::len).collect::<Vec<_>>(), vec![200, 200, 50]);
        let five: Vec<_> = (0..5).map(|i| rec(2, i, 0, 0)).collect();
        assert_eq!(build_sequences(&five, 200).len(), 1);
        assert!(build_sequences(&[rec(3, 0, 0, 1)], 200).is_empty());
    }

    #[test]
    fn sequences_follow_order_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut records: Vec<_> = (0..60).map(|i| rec(i % 3, i, (i % 7) as usize, (i % 2) as u8)).collect();
        records.shuffle(&mut rng);
        for seq in build_sequences(&records, 200) {
            let expected: Vec<usize> = (0..60).filter(|i| i % 3 == seq.user_id).map(|i| (i % 7) as usize).collect();
            assert_eq!(seq.skills, expected);
        }
    }

    #[test]
    fn ninety_ten_split() {
        let records: Vec<_> = (0..100).map(|i| rec(i % 9, i, 0, 1)).collect();
        let spec = SplitSpec {
            seed: 3,
            ..SplitSpec::default()
        };
        let (train, eval) = split_records(&records, &spec).unwrap();
        assert_eq!((train.len(), eval.len()), (90, 10));
        assert_eq!(split_records(&records, &spec).unwrap(), (train.clone(), eval.clone()));
        let (small, eval2) = split_records(&records, &SplitSpec { subsample: 0.05, ..spec.clone() }).unwrap();
        assert_eq!(small.len(), 4);
        assert_eq!(eval2, eval);
    }

    #[test]
    fn student_split_keeps_users_whole() {
        let records: Vec<_> = (0..200).map(|i| rec(i % 20, i, 0, 1)).collect();
        let spec = SplitSpec {
            mode: SplitMode::Student,
            ..SplitSpec::default()
        };
        let (train, eval) = split_records(&records, &spec).unwrap();
        assert_eq!(train.len() + eval.len(), 200);
        assert!(train.iter().all(|t| eval.iter().all(|e| e.user_id != t.user_id)));
    }

    #[test]
    fn decoder_sees_previous_interaction() {
        let seq = StudentSequence {
            user_id: 0,
            skills: vec![2, 7],
            correct: vec![1, 0],
        };
        let batches = make_batches(&[seq], 10, 200, 64, 21).unwrap();
        let b = &batches[0];
        assert_eq!(b.decoder_ids, vec![20, 12]);
        assert_eq!(b.labels, vec![1, 0]);
        assert_eq!(b.start_token(), 20);
    }

    #[test]
    fn padding_is_masked() {
        let seqs = vec![
            StudentSequence { user_id: 0, skills: vec![1, 2, 3, 4], correct: vec![1, 0, 1, 1] },
            StudentSequence { user_id: 1, skills: vec![3, 3], correct: vec![0, 0] },
        ];
        let b = &make_batches(&seqs, 5, 200, 8, 11).unwrap()[0];
        assert_eq!(b.mask, vec![true, true, true, true, true, true, false, false]);
        assert_eq!(&b.encoder_ids[6..], &[11, 11]);
        assert_eq!(b.valid_count(), 6);
    }

    #[test]
    fn batching_rejects_bad_arguments() {
        let seqs = vec![StudentSequence { user_id: 0, skills: vec![1, 2], correct: vec![1, 0] }];
        assert!(make_batches(&seqs, 5, 200, 0, 11).is_err());
        assert!(make_batches(&seqs, 5, 200, 1, 10).is_err());
        assert!(make_batches(&seqs, 5, 1, 1, 11).is_err());
    }

    #[test]
    fn unbiased_synthetic_correctness_is_half() {
        let cfg = SynthConfig {
            interactions_per_student: 1000,
            learning_rate: 0.0,
            ability_std: 0.0,
            difficulty_std: 0.0,
            ..SynthConfig::new(100, 4, 2, 8).unwrap()
        };
        let data = synthesize_students(&cfg).unwrap();
        let mean = data.records.iter().map(|r| r.correct as f64).sum::<f64>() / data.records.len() as f64;
        assert_eq!(data.records.len(), 100_000);
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn easy_skill_saturates() {
        let cfg = SynthConfig {
            learning_rate: 0.0,
            ability_std: 0.0,
            difficulties: Some(vec![-5.0]),
            ..SynthConfig::new(20, 1, 1, 2).unwrap()
        };
        let data = synthesize_students(&cfg).unwrap();
        let mean = data.records.iter().map(|r| r.correct as f64).sum::<f64>() / data.records.len() as f64;
        assert!(mean > 0.98, "{mean}");
    }

    #[test]
    fn ground_truth_is_two_cliques() {
        let data = synthesize_students(&SynthConfig::new(5, 16, 2, 1).unwrap()).unwrap();
        let g = &data.graph;
        assert_eq!(g.edge_count(), 2 * 28);
        assert!(g.degrees().iter().all(|&d| d == 7));
        assert!(g.is_adjacent(0, 7) && g.is_adjacent(8, 15) && !g.is_adjacent(7, 8));
    }

    #[test]
    fn cluster_spec_validation() {
        let bad = ClusterSpec { clusters: vec![vec![0, 1], vec![]] };
        assert!(bad.ground_truth_graph(2).is_err());
        let overlap = ClusterSpec { clusters: vec![vec![0, 1], vec![1]] };
        assert!(overlap.ground_truth_graph(2).is_err());
        assert!(ClusterSpec::even(3, 4).is_err());
    }

    fn arb_records() -> impl Strategy<Value = Vec<InteractionRecord>> {
        proptest::collection::vec((0i64..6, 0usize..9, 0u8..2), 1..120).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (u, s, c))| rec(u, i as i64, s, c))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn batching_round_trips(records in arb_records(), batch_size in 1usize..5, max_len in 2usize..30) {
            let seqs = build_sequences(&records, max_len);
            let batches = make_batches(&seqs, 9, max_len, batch_size, 19).unwrap();
            let back: Vec<StudentSequence> = batches.iter().flat_map(Batch::unbatch).collect();
            prop_assert_eq!(back, seqs);
        }

        #[test]
        fn split_partitions_records(records in arb_records(), seed in 0u64..1000) {
            let spec = SplitSpec { seed, ..SplitSpec::default() };
            let (train, eval) = split_records(&records, &spec).unwrap();
            let mut keys: Vec<i64> = train.iter().chain(&eval).map(|r| r.order_key).collect();
            keys.sort_unstable();
            prop_assert_eq!(keys, (0..records.len() as i64).collect::<Vec<_>>());
        }

        #[test]
        fn subsamples_are_nested(records in arb_records(), seed in 0u64..1000) {
            let keys = |f: f64| -> Vec<i64> {
                subsample(&records, f, seed).unwrap().iter().map(|r| r.order_key).collect()
            };
            let (a, b, c) = (keys(0.05), keys(0.1), keys(0.5));
            prop_assert_eq!(a.len(), (records.len() as f64 * 0.05 + 1e-9).floor() as usize);
            prop_assert!(a.iter().all(|k| b.contains(k)));
            prop_assert!(b.iter().all(|k| c.contains(k)));
        }
    }
}
