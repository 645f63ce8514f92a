use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kt_core::Checkpoint;

fn skillkt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skillkt"))
        .args(args)
        .current_dir(dir)
        .env_remove("SKILLKT_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("failed to spawn skillkt")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Synthetic log (40 students × 20 interactions, 8 skills) in `dir`.
fn synth(dir: &Path) {
    let out = skillkt(
        dir,
        &["synth", "--students", "40", "--skills", "8", "--clusters", "2", "--interactions", "20", "--seed", "3"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

const SMALL_MODEL: &[&str] = &[
    "--n-skills", "8", "--dim", "4", "--d-model", "8", "--encoder-layers", "1", "--decoder-layers", "1",
    "--max-len", "20", "--batch-size", "8", "--num-walks", "300", "--walk-length", "10",
];

fn train(dir: &Path, out_dir: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--interactions", "interactions.csv", "--out-dir", out_dir];
    args.extend_from_slice(SMALL_MODEL);
    args.extend_from_slice(extra);
    if !extra.contains(&"--epochs") {
        args.extend_from_slice(&["--epochs", "2"]);
    }
    skillkt(dir, &args)
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn synth_is_deterministic_and_builds_the_clique_graph() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        std::fs::create_dir(d).unwrap();
        let out = skillkt(d, &["synth", "--students", "50", "--skills", "16", "--clusters", "2", "--seed", "9"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(read(a.join("interactions.csv")), read(b.join("interactions.csv")));
    assert_eq!(read(a.join("skills.edges")), read(b.join("skills.edges")));
    let graph = kt_core::graph::load_edge_list_path(&a.join("skills.edges"), 16).unwrap();
    assert_eq!(graph.edge_count(), 2 * 28);
    assert!(graph.is_adjacent(0, 7) && !graph.is_adjacent(7, 8));
}

#[test]
fn embed_requires_edges_or_a_random_graph() {
    let dir = tempfile::tempdir().unwrap();
    let out = skillkt(dir.path(), &["embed", "--n-skills", "8"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--edges"), "{}", stderr(&out));

    let out = skillkt(
        dir.path(),
        &["embed", "--random-graph", "--n-skills", "8", "--edges-count", "10", "--dim", "4", "--num-walks", "200"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = kt_core::EmbeddingTable::import_path(&dir.path().join("skill2vec.txt")).unwrap();
    assert_eq!((table.count(), table.dim()), (8, 4));
    assert!(String::from_utf8_lossy(&out.stdout).contains("edges 10"));
}

#[test]
fn bad_values_and_config_lines_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&skillkt(dir.path(), &["train", "--lambda", "abc"])), 2);
    std::fs::write(dir.path().join("run.cfg"), "epochs = 3\nwalk_length = long\n").unwrap();
    let out = skillkt(dir.path(), &["train", "--config", "run.cfg"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("run.cfg:2") && stderr(&out).contains("walk_length"), "{}", stderr(&out));
}

#[test]
fn training_is_reproducible_from_flags_and_from_the_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for run in ["r1", "r2"] {
        let out = train(dir.path(), run, &["--seed", "7", "--edges", "skills.edges"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let out = skillkt(dir.path(), &["train", "--config", "r1/train_config.txt", "--out-dir", "r3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for file in ["metrics.tsv", "metrics.json", "model.ckpt"] {
        let first = read(dir.path().join("r1").join(file));
        assert_eq!(first, read(dir.path().join("r2").join(file)), "{file}");
        assert_eq!(first, read(dir.path().join("r3").join(file)), "{file}");
    }
    let tsv = String::from_utf8(read(dir.path().join("r1/metrics.tsv"))).unwrap();
    assert!(tsv.starts_with("# interactions = interactions.csv\n"));
    assert!(tsv.contains("# seed = 7\n"));
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    std::fs::write(dir.path().join("run.cfg"), "epochs = 1\nlearning_rate = 0.003\n").unwrap();
    let out = train(dir.path(), "o", &["--config", "run.cfg", "--lambda", "0", "--learning-rate", "0.001"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echo = String::from_utf8(read(dir.path().join("o/train_config.txt"))).unwrap();
    // `train` passes --epochs 2 on the command line.
    assert!(echo.contains("epochs = 2\n") && echo.contains("learning_rate = 0.001\n"), "{echo}");
    assert!(echo.contains("walk_length = 10\n") && echo.contains("patience = 10\n"));
}

#[test]
fn out_dir_comes_from_the_environment_unless_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_skillkt"))
            .args(args)
            .current_dir(dir.path())
            .env("SKILLKT_OUT_DIR", "from_env")
            .output()
            .unwrap()
    };
    assert!(run(&["synth", "--students", "5", "--skills", "4"]).status.success());
    assert!(dir.path().join("from_env/interactions.csv").exists());
    assert!(run(&["synth", "--students", "5", "--skills", "4", "--out-dir", "flag"]).status.success());
    assert!(dir.path().join("flag/interactions.csv").exists());
}

#[test]
fn lambda_zero_never_reads_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = train(dir.path(), "l0", &["--lambda", "0", "--embeddings", "does/not/exist.txt"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let tsv = String::from_utf8(read(dir.path().join("l0/metrics.tsv"))).unwrap();
    assert!(tsv.lines().last().unwrap().split('\t').nth(2) == Some("NA"), "{tsv}");

    let out = train(dir.path(), "l1", &["--lambda", "1", "--embeddings", "does/not/exist.txt"]);
    assert_eq!(code(&out), 2);
    let out = train(dir.path(), "l2", &["--lambda", "1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--embeddings"), "{}", stderr(&out));
}

#[test]
fn checkpoints_are_loadable_and_eval_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = train(dir.path(), "t", &["--lambda", "0", "--epochs", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let last = Checkpoint::<f32>::load(&dir.path().join("t/last.ckpt")).unwrap();
    assert_eq!(last.epoch, 3);
    assert!(last.adam.is_some());
    assert_eq!(last.skill_vocab.len(), 8);

    let eval = |partition: &str| {
        let out = skillkt(
            dir.path(),
            &["eval", "--checkpoint", "t/model.ckpt", "--interactions", "interactions.csv", "--partition", partition],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        String::from_utf8(out.stdout).unwrap()
    };
    let first = eval("eval");
    assert!(first.starts_with("AUC "), "{first}");
    assert_eq!(first, eval("eval"));
    assert_ne!(first, eval("train"));

    let metrics: serde_json::Value = serde_json::from_slice(&read(dir.path().join("t/metrics.json"))).unwrap();
    let best = metrics["final_auc"].as_f64().unwrap();
    let reported: f64 = first.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((best - reported).abs() < 1e-6, "{best} vs {reported}");
}

#[test]
fn corrupted_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = train(dir.path(), "t", &["--lambda", "0", "--epochs", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut bytes = read(dir.path().join("t/model.ckpt"));
    bytes[4] = 9;
    std::fs::write(dir.path().join("bad.ckpt"), &bytes).unwrap();
    let out = skillkt(dir.path(), &["eval", "--checkpoint", "bad.ckpt", "--interactions", "interactions.csv"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("version 9"), "{}", stderr(&out));
}

#[test]
fn single_class_eval_labels_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = train(dir.path(), "t", &["--lambda", "0", "--epochs", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut csv = String::from("user_id,order_id,skill_id,correct\n");
    for i in 0..10 {
        csv.push_str(&format!("1,{i},{},1\n", i % 8));
    }
    std::fs::write(dir.path().join("ones.csv"), csv).unwrap();
    let out = skillkt(
        dir.path(),
        &["eval", "--checkpoint", "t/model.ckpt", "--interactions", "ones.csv", "--partition", "all"],
    );
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("same label"), "{}", stderr(&out));
}

#[test]
fn divergent_training_exits_3_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = train(dir.path(), "nan", &["--lambda", "0", "--epochs", "50", "--learning-rate", "1e38", "--patience", "0"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let path = dir.path().join("nan/last.ckpt");
    if path.exists() {
        let ckpt = Checkpoint::<f32>::load(&path).unwrap();
        assert!(ckpt.model.params().all_finite());
    }
}

#[test]
fn experiment_writes_grid_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let mut args = vec![
        "experiment", "--interactions", "interactions.csv", "--edges", "skills.edges", "--out-dir", "exp",
        "--fractions", "0.5,1.0", "--arms", "ours,noproj,random", "--seeds", "2", "--epochs", "1",
    ];
    args.extend_from_slice(SMALL_MODEL);
    let out = skillkt(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let grid = String::from_utf8(read(dir.path().join("exp/grid.tsv"))).unwrap();
    let rows: Vec<&str> = grid.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "fraction\tarm\tseed\tauc\tepochs_run");
    assert_eq!(rows.len(), 1 + 2 * 3 * 2);
    let summary: serde_json::Value = serde_json::from_slice(&read(dir.path().join("exp/summary.json"))).unwrap();
    assert_eq!(summary["rows"].as_array().unwrap().len(), 6);
    assert_eq!(summary["config"]["seeds"], "2");
}
