//! Acceptance criteria, one PASS/FAIL/SKIP line each.
//!
//! Runs as a plain binary (`harness = false`) so the report is always
//! printed. The process fails when a hard criterion fails. The two
//! directional replication checks compare seed means whose differences sit
//! within seed noise on desk-scale synthetic data; their outcome is
//! reported but does not fail the run.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use kt_core::dataset::{build_sequences, make_batches, synthesize_students, Batch, StudentSequence};
use kt_core::experiment::{ExperimentData, Runner};
use kt_core::gradcheck::relative_error;
use kt_core::graph::SkillGraph;
use kt_core::metrics::auc;
use kt_core::model::Mode;
use kt_core::node2vec::skill2vec;
use kt_core::train::{evaluate, train};
use kt_core::{
    Arm, EmbeddingTable, ExperimentConfig, KtModel, ModelConfig, Real, SplitSpec, SynthConfig, Tensor, TrainConfig,
    WalkConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL_F64: f64 = 1e-6;
const GRAD_TOL_F32: f64 = 1e-3;
const GRAD_FLOOR: f64 = 1e-4;
const GRAD_PROBES: usize = 20;
const AUC_ORACLE_TOL: f64 = 1e-12;
const AUC_INSTANCES: usize = 200;
const CLIQUE_GAP_MIN: f64 = 0.2;
const CAUSAL_TOL: f64 = 1e-6;
const CAUSAL_PERTURBATIONS: usize = 100;
const OVERFIT_AUC_MIN: f64 = 0.95;
const GRID_SEEDS: u64 = 5;

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn check(ok: bool, detail: String) -> Outcome {
    Outcome { status: if ok { Status::Pass } else { Status::Fail }, detail }
}

// ---------------------------------------------------------------- 1

fn mini_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        skill_dim: 4,
        max_len: 4,
        feedforward_dim: 16,
        dropout: 0.1,
        projection_hidden: None,
        ..ModelConfig::new(5)
    }
}

fn mini_batch() -> Batch {
    let seqs = vec![
        StudentSequence { user_id: 0, skills: vec![0, 3, 1, 4], correct: vec![1, 0, 0, 1] },
        StudentSequence { user_id: 1, skills: vec![2, 2, 0, 1], correct: vec![0, 1, 1, 0] },
    ];
    make_batches(&seqs, 5, 4, 2, 11).unwrap().remove(0)
}

fn mini_table() -> EmbeddingTable {
    EmbeddingTable::from_vec(5, 4, (0..20).map(|i| ((i * 37 % 11) as f32 - 5.0) / 4.0).collect()).unwrap()
}

fn cast<A: Real, B: Real>(model: &KtModel<A>) -> KtModel<B> {
    let named = model
        .params()
        .names()
        .iter()
        .zip(model.params().tensors())
        .map(|(n, t)| {
            let data = t.data().iter().map(|v| B::from_f64_lossy(v.to_f64_lossy())).collect();
            (n.clone(), Tensor::new(t.shape(), data).unwrap())
        })
        .collect();
    KtModel::from_named_tensors(model.config(), named).unwrap()
}

const LAMBDA: f64 = 1.0;
const DROPOUT_SEED: u64 = 17;

fn objective(model: &KtModel<f64>, b: &Batch, t: &EmbeddingTable) -> f64 {
    let (pass, l) = model.loss(b, Some(t), LAMBDA, Mode::Train, DROPOUT_SEED).unwrap();
    pass.tape.value(l.total).item().unwrap()
}

/// Analytic gradients in both precisions against central differences of
/// the 64-bit objective at the same (32-bit representable) parameters.
fn gradient_correctness() -> Outcome {
    let (b, t) = (mini_batch(), mini_table());
    let m32: KtModel<f32> = cast(&KtModel::<f64>::init(&mini_config(), 3).unwrap());
    let m64: KtModel<f64> = cast(&m32);

    let (pass64, l64) = m64.loss(&b, Some(&t), LAMBDA, Mode::Train, DROPOUT_SEED).unwrap();
    let g64 = pass64.tape.backward(l64.total).unwrap();
    let (pass32, l32) = m32.loss(&b, Some(&t), LAMBDA, Mode::Train, DROPOUT_SEED).unwrap();
    let g32 = pass32.tape.backward(l32.total).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = m64.params().len();
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    let h = 1e-5;
    for _ in 0..GRAD_PROBES {
        let pi = rng.random_range(0..n);
        let ci = rng.random_range(0..m64.params().tensors()[pi].numel());
        let mut m = m64.clone();
        m.params_mut().tensors_mut()[pi].data_mut()[ci] += h;
        let up = objective(&m, &b, &t);
        m.params_mut().tensors_mut()[pi].data_mut()[ci] -= 2.0 * h;
        let down = objective(&m, &b, &t);
        let fd = (up - down) / (2.0 * h);
        worst64 = worst64.max(relative_error(g64.wrt(pass64.params[pi]).data()[ci], fd, GRAD_FLOOR));
        worst32 = worst32.max(relative_error(g32.wrt(pass32.params[pi]).data()[ci] as f64, fd, GRAD_FLOOR));
    }
    check(
        worst64 < GRAD_TOL_F64 && worst32 < GRAD_TOL_F32,
        format!(
            "{GRAD_PROBES} probes, max rel. error 64-bit {worst64:.2e} (< {GRAD_TOL_F64:e}), 32-bit {worst32:.2e} (< {GRAD_TOL_F32:e})"
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Pairwise count: a positive above a negative scores 1, a tie scores ½.
fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                total += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    total / pairs
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut with_ties = 0;
    for _ in 0..AUC_INSTANCES {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(2..=10);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            with_ties += 1;
        }
        worst = worst.max((auc(&scores, &labels).unwrap() - brute_force_auc(&scores, &labels)).abs());
    }
    check(
        worst <= AUC_ORACLE_TOL,
        format!("{AUC_INSTANCES} instances ({with_ties} with ties), max |diff| {worst:.1e} (≤ {AUC_ORACLE_TOL:e})"),
    )
}

// ---------------------------------------------------------------- 3

fn two_cliques() -> SkillGraph {
    let mut edges = Vec::new();
    for base in [0, 8] {
        for u in base..base + 8 {
            for v in u + 1..base + 8 {
                edges.push((u, v));
            }
        }
    }
    edges.push((7, 8));
    SkillGraph::from_edges(16, &edges).unwrap()
}

fn clique_gap(table: &EmbeddingTable) -> f64 {
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0, 0.0, 0);
    for u in 0..16 {
        for v in u + 1..16 {
            if (u < 8) == (v < 8) {
                intra += table.cosine(u, v);
                n_intra += 1;
            } else {
                inter += table.cosine(u, v);
                n_inter += 1;
            }
        }
    }
    intra / n_intra as f64 - inter / n_inter as f64
}

fn structure_recovery() -> Outcome {
    let graph = two_cliques();
    let gaps: Vec<f64> = (0..5)
        .map(|seed| {
            let walk = WalkConfig { num_walks: 2000, walk_length: 40, dim: 16, seed, ..WalkConfig::default() };
            clique_gap(&skill2vec(&graph, &walk).unwrap().table)
        })
        .collect();
    let passed = gaps.iter().filter(|&&g| g >= CLIQUE_GAP_MIN).count();
    let shown: Vec<String> = gaps.iter().map(|g| format!("{g:.3}")).collect();
    check(passed == 5, format!("intra − inter cosine per seed [{}], {passed}/5 ≥ {CLIQUE_GAP_MIN}", shown.join(", ")))
}

// ---------------------------------------------------------------- 4

fn causal_integrity() -> Outcome {
    const N: usize = 12;
    const LEN: usize = 16;
    let cfg = ModelConfig {
        d_model: 32,
        n_heads: 2,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        feedforward_dim: 64,
        max_len: LEN,
        ..ModelConfig::new(N)
    };
    let model = KtModel::<f32>::init(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seqs: Vec<StudentSequence> = (0..4)
        .map(|u| StudentSequence {
            user_id: u,
            skills: (0..LEN).map(|_| rng.random_range(0..N)).collect(),
            correct: (0..LEN).map(|_| rng.random_range(0..2)).collect(),
        })
        .collect();
    let predict = |s: &[StudentSequence]| {
        let b = make_batches(s, N, LEN, s.len(), 2 * N + 1).unwrap().remove(0);
        model.predict(&b).unwrap().probs
    };
    let base = predict(&seqs);
    let mut worst = 0.0f64;
    let mut moved_after = 0;
    for _ in 0..CAUSAL_PERTURBATIONS {
        let row = rng.random_range(0..seqs.len());
        let i = rng.random_range(0..LEN - 1);
        let mut changed = seqs.clone();
        // Rewrite a random non-empty set of later interactions.
        for j in i + 1..LEN {
            if j == i + 1 || rng.random_bool(0.3) {
                changed[row].skills[j] = (changed[row].skills[j] + rng.random_range(1..N)) % N;
                changed[row].correct[j] ^= u8::from(rng.random_bool(0.5));
            }
        }
        let p = predict(&changed);
        for (r, (row_new, row_old)) in p.chunks(LEN).zip(base.chunks(LEN)).enumerate() {
            let upto = if r == row { i + 1 } else { LEN };
            for k in 0..upto {
                worst = worst.max((row_new[k] - row_old[k]).abs() as f64);
            }
        }
        if p[row * LEN + i + 1] != base[row * LEN + i + 1] {
            moved_after += 1;
        }
    }
    check(
        worst < CAUSAL_TOL,
        format!(
            "{CAUSAL_PERTURBATIONS} perturbations, max |Δr̂| at or before i {worst:.1e} (< {CAUSAL_TOL:e}); \
             {moved_after} moved r̂ at i+1"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn overfit_capacity() -> Outcome {
    let data = synthesize_students(&SynthConfig { interactions_per_student: 100, ..SynthConfig::new(50, 16, 2, 0).unwrap() })
        .unwrap();
    let seqs = build_sequences(&data.records, 100);
    let cfg = ModelConfig {
        d_model: 32,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        feedforward_dim: 128,
        max_len: 100,
        ..ModelConfig::new(16)
    };
    let b = make_batches(&seqs, 16, 100, 10, 33).unwrap();
    let mut model = KtModel::<f32>::init(&cfg, 0).unwrap();
    let tc = TrainConfig {
        epochs: 300,
        lambda: 0.0,
        learning_rate: 2e-4,
        patience: 0,
        batch_size: 10,
        eval_every: 50,
        ..TrainConfig::default()
    };
    let result = train(&mut model, &b, &b, None, &tc).unwrap();
    let train_auc = evaluate(&model, &b).unwrap();
    check(
        train_auc >= OVERFIT_AUC_MIN,
        format!(
            "50×100 synthetic, λ=0, {} epochs: train AUC {train_auc:.4} (≥ {OVERFIT_AUC_MIN})",
            result.epochs_run()
        ),
    )
}

// ---------------------------------------------------------------- 6, 7

fn replication_grid() -> kt_core::ResultsGrid {
    let data = synthesize_students(&SynthConfig { interactions_per_student: 20, ..SynthConfig::new(2000, 40, 4, 100).unwrap() })
        .unwrap();
    let config = ExperimentConfig {
        model: ModelConfig {
            d_model: 32,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            feedforward_dim: 128,
            max_len: 20,
            skill_dim: 16,
            ..ModelConfig::new(40)
        },
        train: TrainConfig { epochs: 40, learning_rate: 1e-3, lambda: 1.0, batch_size: 32, patience: 5, ..TrainConfig::default() },
        walk: WalkConfig { num_walks: 4000, walk_length: 40, ..WalkConfig::default() },
        split: SplitSpec { train_fraction: 0.8, ..SplitSpec::default() },
        seeds: (0..GRID_SEEDS).collect(),
    };
    let mut runner = Runner::new(ExperimentData { records: &data.records, graph: &data.graph }, &config).unwrap();
    let mut grid = runner.run_grid(&[1.0], &Arm::ALL).unwrap();
    grid.cells.extend(runner.run_grid(&[0.05], &[Arm::Ours, Arm::NoProj]).unwrap().cells);
    grid
}

fn table_ordering(grid: &kt_core::ResultsGrid) -> Outcome {
    let mean = |arm| grid.mean_auc(1.0, arm).unwrap();
    let (ours, noproj, random) = (mean(Arm::Ours), mean(Arm::NoProj), mean(Arm::Random));
    check(
        ours >= noproj && ours >= random,
        format!("mean eval AUC over {GRID_SEEDS} seeds: ours {ours:.4}, noproj {noproj:.4}, random {random:.4}"),
    )
}

fn margin_growth(grid: &kt_core::ResultsGrid) -> Outcome {
    let small = grid.paired_margin(0.05, Arm::Ours, Arm::NoProj).unwrap();
    let full = grid.paired_margin(1.0, Arm::Ours, Arm::NoProj).unwrap();
    check(small >= full, format!("ours − noproj paired margin: 5% {small:+.5}, 100% {full:+.5}"))
}

// ---------------------------------------------------------------- 8

fn assist09() -> Outcome {
    Outcome {
        status: Status::Skip,
        detail: "ASSIST09 skill-builder file and expert edge list are not available offline".into(),
    }
}

// ---------------------------------------------------------------- 9

fn skillkt(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_skillkt"))
        .args(args)
        .current_dir(dir)
        .env_remove("SKILLKT_OUT_DIR")
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    assert!(out.status.success(), "skillkt {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Runs every command, re-runs it from its echoed config into a second
/// directory and compares the outputs byte for byte.
fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let small = [
        "--n-skills", "8", "--dim", "4", "--num-walks", "300", "--walk-length", "10", "--d-model", "16",
        "--encoder-layers", "1", "--decoder-layers", "1", "--max-len", "20", "--batch-size", "16", "--epochs", "3",
    ];
    let runs: Vec<(&str, Vec<&str>, &[&str])> = vec![
        (
            "synth",
            vec!["synth", "--students", "60", "--skills", "8", "--clusters", "2", "--interactions", "20", "--seed", "5"],
            &["interactions.csv", "skills.edges"],
        ),
        (
            "embed",
            vec!["embed", "--edges", "../synth/skills.edges", "--n-skills", "8", "--dim", "4", "--num-walks", "300"],
            &["skill2vec.txt", "embed.json"],
        ),
        (
            "train",
            [&["train", "--interactions", "../synth/interactions.csv", "--embeddings", "../embed/skill2vec.txt", "--seed", "7"][..], &small]
                .concat(),
            &["metrics.tsv", "metrics.json", "model.ckpt"],
        ),
        (
            "eval",
            vec!["eval", "--checkpoint", "../train/model.ckpt", "--interactions", "../synth/interactions.csv"],
            &["eval.json"],
        ),
        (
            "experiment",
            [
                &["experiment", "--interactions", "../synth/interactions.csv", "--edges", "../synth/skills.edges",
                  "--fractions", "0.5,1", "--seeds", "2"][..],
                &small,
            ]
            .concat(),
            &["grid.tsv", "summary.json", "summary.txt"],
        ),
    ];
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for (name, args, files) in runs {
        let first = d.join(name);
        std::fs::create_dir(&first).unwrap();
        skillkt(&first, &[&args[..], &["--out-dir", "."]].concat());
        let echoed = first.join(format!("{name}_config.txt"));
        let second = d.join(format!("{name}_again"));
        std::fs::create_dir(&second).unwrap();
        // Relative paths in the echo resolve from a sibling directory.
        skillkt(&second, &[name, "--config", echoed.to_str().unwrap(), "--out-dir", "."]);
        for f in files {
            compared += 1;
            if std::fs::read(first.join(f)).unwrap() != std::fs::read(second.join(f)).unwrap() {
                mismatched.push(format!("{name}/{f}"));
            }
        }
    }
    check(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("5 commands re-run from echoed config, {compared} artifacts byte-identical")
        } else {
            format!("differing artifacts: {}", mismatched.join(", "))
        },
    )
}

// ----------------------------------------------------------------

fn report(id: &str, name: &str, hard: bool, run: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = run();
    let tag = match (outcome.status, hard) {
        (Status::Pass, _) => "PASS",
        (Status::Skip, _) => "SKIP",
        (Status::Fail, true) => "FAIL",
        (Status::Fail, false) => "FAIL (reported)",
    };
    println!("[{tag}] {id} {name}: {} [{:.1}s]", outcome.detail, started.elapsed().as_secs_f64());
    !(hard && outcome.status == Status::Fail)
}

fn main() {
    // `cargo test -- <filter>` passes arguments; run only the matching criteria.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| f == id);

    println!("acceptance criteria");
    let mut ok = true;
    if wanted("1") {
        ok &= report("1", "gradient correctness", true, gradient_correctness);
    }
    if wanted("2") {
        ok &= report("2", "AUC oracle equivalence", true, auc_oracle);
    }
    if wanted("3") {
        ok &= report("3", "Node2Vec structure recovery", true, structure_recovery);
    }
    if wanted("4") {
        ok &= report("4", "causal integrity", true, causal_integrity);
    }
    if wanted("5") {
        ok &= report("5", "overfit capacity", true, overfit_capacity);
    }
    if wanted("6") || wanted("7") {
        let started = Instant::now();
        let grid = replication_grid();
        println!("      replication grid: {} cells in {:.0}s", grid.cells.len(), started.elapsed().as_secs_f64());
        for line in grid.render_summary().lines() {
            println!("      {line}");
        }
        ok &= report("6", "directional ablation ordering", false, || table_ordering(&grid));
        ok &= report("7", "directional limited-data margin", false, || margin_growth(&grid));
    }
    if wanted("8") {
        ok &= report("8", "ASSIST09 stretch", false, assist09);
    }
    if wanted("9") {
        ok &= report("9", "determinism", true, determinism);
    }
    if !ok {
        std::process::exit(1);
    }
}
