use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn negstream(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_negstream"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = negstream(args, cwd);
    assert_eq!(
        code(&out),
        0,
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Saves a default world to `w` and a config using it with two shift phases.
fn setup(dir: &Path) {
    ok(&["gen-world", "--output", "w"], dir);
    fs::write(
        dir.join("exp.toml"),
        "world_dir = \"w\"\n[plan.ordering.temporal-shift]\nphases = [[0, 1], [2, 3]]\n",
    )
    .unwrap();
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_owned).collect()
}

fn metrics(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["--help"], dir.path());
    ok(&["--version"], dir.path());
    ok(&["run-stream", "--help"], dir.path());
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    for out in ["a", "b"] {
        ok(&["run-stream", "--config", "exp.toml", "--output", out], d);
        ok(&["mine-negatives", "--config", "exp.toml", "--output", out], d);
    }
    for file in ["results.csv", "metrics.json", "negatives.csv"] {
        assert_eq!(fs::read(d.join("a").join(file)).unwrap(), fs::read(d.join("b").join(file)).unwrap(), "{file}");
    }
    ok(&["run-stream", "--config", "exp.toml", "--output", "c", "--seed", "9"], d);
    assert_ne!(fs::read(d.join("a/results.csv")).unwrap(), fs::read(d.join("c/results.csv")).unwrap());
}

#[test]
fn regenerated_world_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-world", "--output", "w1", "--seed", "3"], d);
    ok(&["gen-world", "--output", "w2", "--seed", "3"], d);
    for entry in fs::read_dir(d.join("w1")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(d.join("w1").join(&name)).unwrap(), fs::read(d.join("w2").join(&name)).unwrap());
    }
}

#[test]
fn checkpoint_chaining_matches_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(&["run-stream", "--config", "exp.toml", "--output", "full", "--checkpoint-out", "full.json"], d);
    ok(&["run-stream", "--config", "exp.toml", "--output", "p0", "--phase", "0", "--checkpoint-out", "p0.json"], d);
    ok(
        &[
            "run-stream", "--config", "exp.toml", "--output", "p1", "--phase", "1", "--checkpoint-in", "p0.json",
            "--checkpoint-out", "p1.json",
        ],
        d,
    );

    // phase 1 starts from the bank phase 0 ended with
    let p0 = data_rows(&d.join("p0/results.csv"));
    let p1 = data_rows(&d.join("p1/results.csv"));
    let p0_bank: usize = p0.last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
    let cp: serde_json::Value = metrics(&d.join("p0.json"));
    assert_eq!(cp["bank"]["entries"].as_array().unwrap().len(), p0_bank);

    let chained: Vec<String> = p0.into_iter().chain(p1).collect();
    assert_eq!(chained, data_rows(&d.join("full/results.csv")));
    assert_eq!(fs::read(d.join("p1.json")).unwrap(), fs::read(d.join("full.json")).unwrap());
}

#[test]
fn no_dynamic_keeps_the_bank_empty() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(&["run-stream", "--config", "exp.toml", "--output", "o", "--no-dynamic", "--format", "json-lines"], d);
    let text = fs::read_to_string(d.join("o/results.jsonl")).unwrap();
    assert!(!text.is_empty());
    for line in text.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(row["bank_size_after"], 0);
        assert_eq!(row["initial_score"], row["final_score"]);
    }
    let m = metrics(&d.join("o/metrics.json"));
    assert_eq!(m["dynamic"], false);
    assert_eq!(m["runs"][0]["summary"]["bank_size"], 0);
}

#[test]
fn sweep_writes_one_report_per_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-world", "--output", "w"], d);
    fs::write(d.join("sweep.toml"), "world_dir = \"w\"\n[sweep]\nratios = [[1, 1], [1, 3], [3, 1]]\n").unwrap();
    ok(&["run-stream", "--config", "sweep.toml", "--output", "o"], d);
    let m = metrics(&d.join("o/metrics.json"));
    let runs = m["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 3);
    for (run, [a, b]) in runs.iter().zip([[1, 1], [1, 3], [3, 1]]) {
        assert_eq!(run["id_ratio"], a);
        assert_eq!(run["ood_ratio"], b);
        let file = run["results"].as_str().unwrap();
        assert_eq!(file, format!("results-{a}x{b}.csv"));
        let rows = data_rows(&d.join("o").join(file));
        let n_id = rows.iter().filter(|r| r.contains(",id,")).count();
        let n_ood = rows.len() - n_id;
        assert_eq!(n_id * b, n_ood * a, "{file}");
    }
    // checkpoints make no sense across independent sweep runs
    let out = negstream(&["run-stream", "--config", "sweep.toml", "--output", "o", "--checkpoint-out", "cp.json"], d);
    assert_eq!(code(&out), 1);
}

#[test]
fn mined_negatives_are_sorted_by_distance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    ok(&["mine-negatives", "--config", "exp.toml", "--output", "o"], d);
    let rows = data_rows(&d.join("o/negatives.csv"));
    assert_eq!(rows.len(), 50);
    let dist: Vec<f64> = rows.iter().map(|r| r.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(dist.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);

    // argument and configuration errors
    assert_eq!(code(&negstream(&["run-stream", "--bogus"], d)), 1);
    assert_eq!(code(&negstream(&["frobnicate"], d)), 1);
    assert_eq!(code(&negstream(&["run-stream"], d)), 1);
    fs::write(d.join("typo.toml"), "[engine]\nbetta = 0.3\n").unwrap();
    assert_eq!(code(&negstream(&["run-stream", "--config", "typo.toml", "--output", "o"], d)), 1);
    fs::write(d.join("big.toml"), "world_dir = \"w\"\n[engine]\nstatic_count = 100000\n").unwrap();
    let out = negstream(&["mine-negatives", "--config", "big.toml", "--output", "o"], d);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
    assert_eq!(code(&negstream(&["run-stream", "--config", "exp.toml", "--output", "o", "--phase", "7"], d)), 1);

    // I/O and file format errors
    assert_eq!(code(&negstream(&["run-stream", "--config", "missing.toml", "--output", "o"], d)), 2);
    fs::write(d.join("nowhere.toml"), "world_dir = \"nowhere\"\n").unwrap();
    assert_eq!(code(&negstream(&["run-stream", "--config", "nowhere.toml", "--output", "o"], d)), 2);
    fs::write(d.join("w/encoder.json"), "{ not json").unwrap();
    assert_eq!(code(&negstream(&["run-stream", "--config", "exp.toml", "--output", "o"], d)), 2);
    fs::write(d.join("junk.json"), "[]").unwrap();
    assert_eq!(
        code(&negstream(&["run-stream", "--output", "o", "--checkpoint-in", "junk.json"], d)),
        2
    );

    // failed checks and invariant violations
    ok(&["grad-check", "--points", "5"], d);
    ok(&["verify-theorem", "--trials", "20", "--groups", "2,3"], d);
    fs::write(d.join("strict.toml"), "[grad_check]\ntolerance = 1e-30\n").unwrap();
    assert_eq!(code(&negstream(&["grad-check", "--config", "strict.toml", "--points", "3"], d)), 3);
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["run-stream", "--output", "a", "--checkpoint-out", "cp.json"], d);
    fs::write(d.join("small.toml"), "[engine]\ncapacity = 5\n").unwrap();
    let out = negstream(&["run-stream", "--config", "small.toml", "--output", "b", "--checkpoint-in", "cp.json"], d);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
