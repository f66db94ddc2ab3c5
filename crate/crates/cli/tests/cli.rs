use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cluster_alloc::assignment::AssignmentProblem;
use cluster_alloc::neuro::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cluster-alloc"))
}

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(out.status.success(), "command failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn train(out: &Path, seed: u64) {
    run(bin().arg("--out").arg(out).arg("train").arg("--config").arg(tiny_config()).args(["--seed", &seed.to_string()]));
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn train_rerun_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(a.path(), 7);
    train(b.path(), 7);
    for file in ["metrics.jsonl", "report.jsonl", "checkpoint.json", "config.toml"] {
        let (x, y) = (a.path().join("train-seed7").join(file), b.path().join("train-seed7").join(file));
        assert_eq!(read(&x), read(&y), "{file} differs between reruns");
    }
}

#[test]
fn different_seeds_give_different_metrics() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), 1);
    train(dir.path(), 2);
    assert_ne!(read(dir.path().join("train-seed1/metrics.jsonl")), read(dir.path().join("train-seed2/metrics.jsonl")));
}

#[test]
fn metrics_are_versioned_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), 0);
    let text = String::from_utf8(read(dir.path().join("train-seed0/metrics.jsonl"))).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["record"], "header");
    assert_eq!(lines[0]["format_version"], 1);
    assert_eq!(lines.len(), 3, "header plus one record per iteration");
    assert!(lines[1]["mean_episode_reward"].is_f64());
    assert!(lines[1]["actor_contraction"].is_f64());
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    run(bin()
        .env("CLUSTER_ALLOC_OUT", dir.path())
        .arg("expert-rollout")
        .arg("--config")
        .arg(tiny_config()));
    assert!(dir.path().join("expert-seed0/trace.jsonl").exists());
}

#[test]
fn eval_and_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), 4);
    let ck = dir.path().join("train-seed4/checkpoint.json");
    let eval = |seed: &str| {
        run(bin().arg("--out").arg(dir.path()).arg("eval").arg("--checkpoint").arg(&ck).args(["--episodes", "2", "--seed", seed, "--trace"]));
        (read(dir.path().join(format!("eval-seed{seed}/report.jsonl"))), read(dir.path().join(format!("eval-seed{seed}/trace.jsonl"))))
    };
    let first = eval("9");
    let second = eval("9");
    assert_eq!(first, second, "eval rerun must be byte-identical");

    let trace = dir.path().join("eval-seed9/trace.jsonl");
    run(bin().arg("--out").arg(dir.path()).arg("analyze").arg("--trace").arg(&trace).args(["--window", "5"]));
    let clusters = String::from_utf8(read(dir.path().join("analysis-seed9/clusters.jsonl"))).unwrap();
    let episodes: Vec<Value> = clusters.lines().skip(1).map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(episodes.len(), 2);
    for ep in &episodes {
        let mut members: Vec<u64> = ep["clusters"].as_array().unwrap().iter().flat_map(|c| c.as_array().unwrap().iter().map(|v| v.as_u64().unwrap())).collect();
        members.sort();
        assert_eq!(members, vec![0, 1, 2], "clusters partition the agents");
    }
}

#[test]
fn expert_rollout_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        run(bin().arg("--out").arg(d.path()).arg("expert-rollout").arg("--config").arg(tiny_config()).args(["--episodes", "2", "--seed", "5"]));
    }
    assert_eq!(read(a.path().join("expert-seed5/trace.jsonl")), read(b.path().join("expert-seed5/trace.jsonl")));
}

#[test]
fn solve_matches_library_solver() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..10 {
        let (n, m, r) = (rng.random_range(2..=5), rng.random_range(1..=3), rng.random_range(1..=2));
        let m = m.min(n);
        let grid = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cols).map(|_| rng.random_range(0.1..2.0)).collect()).collect()
        };
        let (d, s, q) = (grid(&mut rng, n, m), grid(&mut rng, n, r), grid(&mut rng, m, r));
        let path = dir.path().join(format!("p{k}.json"));
        std::fs::write(&path, json!({ "distances": d, "supply": s, "demand": q }).to_string()).unwrap();
        let out = run(bin().arg("solve").arg("--problem").arg(&path));
        let got: Value = serde_json::from_slice(&out.stdout).unwrap();

        let mat = |rows: &Vec<Vec<f64>>| Mat::from_shape_vec((rows.len(), rows[0].len()), rows.concat()).unwrap();
        let sol = AssignmentProblem::new(mat(&d), mat(&s), mat(&q)).unwrap().solve_exact().unwrap();
        let expected: Vec<Vec<u8>> = sol.assignment.to_binary().rows().into_iter().map(|r| r.to_vec()).collect();
        assert_eq!(got["assignment"], json!(expected));
        assert_eq!(got["objective"].as_f64().unwrap(), sol.objective);
    }
}

#[test]
fn solve_rejects_ragged_input() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"distances":[[0,1],[1]],"supply":[[1],[1]],"demand":[[1],[1]]}"#).unwrap();
    let out = bin().arg("solve").arg("--problem").arg(&path).output().unwrap();
    assert!(!out.status.success());
}
