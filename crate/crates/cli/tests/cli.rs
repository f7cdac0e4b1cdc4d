//! End-to-end tests of the `eflanding` binary: reproducibility, replay,
//! config validation and the counterexample experiment.

use std::path::Path;
use std::process::{Command, Output};

fn eflanding(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eflanding"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Strips the wall-clock column (the one field excluded from
/// reproducibility guarantees) from a metrics CSV.
fn without_wall(csv: &str) -> String {
    csv.lines()
        .map(|line| {
            if line.starts_with('#') || line.starts_with("iter") {
                line.to_string()
            } else {
                let cols: Vec<&str> = line.split(',').collect();
                let mut kept: Vec<&str> = cols[..5].to_vec();
                kept.extend_from_slice(&cols[6..]);
                kept.join(",")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn data_rows(csv: &str) -> Vec<String> {
    csv.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("iter") && !l.is_empty())
        .map(|l| l.to_string())
        .collect()
}

#[test]
fn identical_configs_reproduce_bitwise() {
    let args = [
        "run",
        "--experiment",
        "pca-deterministic",
        "--n",
        "20",
        "--p",
        "2",
        "--l",
        "15",
        "--nodes",
        "2",
        "--compressor",
        "top-k",
        "--compressor-ratio",
        "0.1",
        "--gamma",
        "0.2",
        "--iters",
        "40",
        "--seed",
        "7",
    ];
    let a = eflanding(&args);
    let b = eflanding(&args);
    assert!(a.status.success());
    assert_eq!(without_wall(&stdout(&a)), without_wall(&stdout(&b)));
}

#[test]
fn different_seeds_differ() {
    let base = [
        "run",
        "--experiment",
        "pca-stochastic",
        "--n",
        "10",
        "--p",
        "2",
        "--l",
        "8",
        "--nodes",
        "2",
        "--gamma",
        "0.05",
        "--eta",
        "0.5",
        "--sigma-noise",
        "1.0",
        "--iters",
        "20",
    ];
    let mut a_args = base.to_vec();
    a_args.extend_from_slice(&["--seed", "1"]);
    let mut b_args = base.to_vec();
    b_args.extend_from_slice(&["--seed", "2"]);
    let a = eflanding(&a_args);
    let b = eflanding(&b_args);
    assert!(a.status.success() && b.status.success());
    assert_ne!(data_rows(&stdout(&a)), data_rows(&stdout(&b)));
}

#[test]
fn save_then_replay_is_bitwise_equal() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("desk.bin");
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "experiment = \"pca-deterministic\"\n\
         n = 24\np = 3\nl = 10\nnodes = 4\n\
         compressor = \"top-k\"\ncompressor_ratio = 0.1\n\
         gamma = 0.2\niters = 50\nseed = 11\n",
    )
    .unwrap();
    let gen = eflanding(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(Path::new(&data).exists());

    let direct = eflanding(&["run", "--config", config.to_str().unwrap()]);
    let replayed = eflanding(&[
        "replay",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(direct.status.success() && replayed.status.success());
    let d = stdout(&direct);
    let r = stdout(&replayed);
    assert_eq!(data_rows(&without_wall(&d)), data_rows(&without_wall(&r)));
}

#[test]
fn replay_rejects_mismatched_dims() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("desk.bin");
    let gen = eflanding(&[
        "gen-data",
        "--n",
        "24",
        "--p",
        "3",
        "--l",
        "10",
        "--nodes",
        "4",
        "--seed",
        "11",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(gen.status.success());
    let bad = eflanding(&[
        "replay",
        "--n",
        "20",
        "--p",
        "3",
        "--l",
        "10",
        "--nodes",
        "4",
        "--seed",
        "11",
        "--gamma",
        "0.2",
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("header"));
}

#[test]
fn counterexample_stagnates_without_error_feedback() {
    let out = eflanding(&[
        "run",
        "--experiment",
        "counterexample",
        "--compressor",
        "top-k",
        "--compressor-k",
        "1",
        "--error-feedback",
        "false",
        "--iters",
        "100",
    ]);
    assert!(out.status.success());
    let rows = data_rows(&stdout(&out));
    assert_eq!(rows.len(), 101);
    let first_gap = rows[0].split(',').nth(1).unwrap().to_string();
    for row in &rows {
        assert_eq!(row.split(',').nth(1).unwrap(), first_gap, "iterate moved");
    }
}

#[test]
fn counterexample_converges_with_error_feedback() {
    let out = eflanding(&[
        "run",
        "--experiment",
        "counterexample",
        "--compressor",
        "top-k",
        "--compressor-k",
        "1",
        "--iters",
        "500",
    ]);
    assert!(out.status.success());
    let rows = data_rows(&stdout(&out));
    let last = rows.last().unwrap();
    let rgrad: f64 = last.split(',').nth(3).unwrap().parse().unwrap();
    assert!(rgrad < 1e-12, "final squared gradient norm {rgrad}");
}

#[test]
fn zero_iterations_emit_only_the_initial_record() {
    let out = eflanding(&[
        "run",
        "--experiment",
        "pca-deterministic",
        "--n",
        "10",
        "--p",
        "2",
        "--l",
        "5",
        "--nodes",
        "2",
        "--gamma",
        "0.1",
        "--iters",
        "0",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("0,"));
}

#[test]
fn config_echo_carries_resolved_auto_values() {
    let out = eflanding(&[
        "run",
        "--experiment",
        "pca-deterministic",
        "--n",
        "16",
        "--p",
        "2",
        "--l",
        "10",
        "--nodes",
        "2",
        "--gamma",
        "auto",
        "--iters",
        "5",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    let gamma_line = text
        .lines()
        .find(|l| l.starts_with("# gamma = "))
        .expect("gamma echoed");
    let value: f64 = gamma_line
        .trim_start_matches("# gamma = ")
        .parse()
        .unwrap();
    assert!(value > 0.0 && value < 1.0);
    assert!(text.lines().any(|l| l.starts_with("# mu = ")));
    assert!(text.lines().any(|l| l.starts_with("# grad_bound = ")));
}

#[test]
fn unknown_keys_and_bad_values_fail() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "no_such_key = 3\n").unwrap();
    let out = eflanding(&["run", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success());

    let out = eflanding(&["run", "--lambda=-2.0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
}

#[test]
fn penalty_divergence_sets_exit_code() {
    let out = eflanding(&[
        "run",
        "--experiment",
        "pca-deterministic",
        "--algorithm",
        "penalty",
        "--penalty-lambda",
        "1000.0",
        "--gamma",
        "0.01",
        "--n",
        "20",
        "--p",
        "2",
        "--l",
        "10",
        "--nodes",
        "2",
        "--iters",
        "200",
        "--seed",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2), "divergence exit code");
}

#[test]
fn estimate_prints_constants() {
    let out = eflanding(&[
        "estimate",
        "--n",
        "16",
        "--p",
        "2",
        "--l",
        "10",
        "--nodes",
        "2",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    for key in ["gamma_safe", "mu", "merit_smooth_lm", "grad_bound", "mu_lower_bound"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key} missing");
    }
}

#[test]
fn block_toy_runs_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("block.toml");
    let output = dir.path().join("block.csv");
    std::fs::write(
        &config,
        "experiment = \"block-toy\"\n\
         blocks = [[12, 2], [10, 1]]\nfree_dim = 4\nnodes = 2\n\
         compressor = \"top-k\"\ncompressor_ratio = 0.2\n\
         gamma = 0.1\niters = 400\nseed = 5\n",
    )
    .unwrap();
    let out = eflanding(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&output).unwrap();
    let rows = data_rows(&text);
    let last_violation: f64 = rows.last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!(last_violation < 1e-6);
}

#[test]
fn unconstrained_baseline_runs() {
    let out = eflanding(&[
        "run",
        "--experiment",
        "unconstrained-baseline",
        "--n",
        "50",
        "--compressor",
        "top-k",
        "--compressor-k",
        "5",
        "--gamma",
        "0.5",
        "--iters",
        "300",
        "--seed",
        "2",
    ]);
    assert!(out.status.success());
    let rows = data_rows(&stdout(&out));
    let first: f64 = rows[0].split(',').nth(1).unwrap().parse().unwrap();
    let last: f64 = rows.last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(last < 1e-6 * first, "no descent: {first} -> {last}");
}
