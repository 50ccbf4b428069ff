//! End-to-end CLI behavior: stage composition, determinism, exit codes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_driftflow"))
}

const SMALL_CONFIG: &str = r#"
[model]
kind = "separable_linear"
b0 = "neg x0"
d_fast = 2
sigma = 0.1
n_scale = 100.0
fast_mean = [0.4, 0.0]

[data]
x0 = [2.0]
horizon = 1.0
dt = 1e-3
observation_delta = 0.01

[train]
mode = "mle"
lambda = 0.0
l_samples = 10
[train.optimizer]
iterations = 8
batch_size = 50

[eval]
oracle_samples = 4000
eval_l_samples = 50
law_times = [0.5]
law_paths = 40
law_dt = 0.01
compare_horizon = 2.0
compare_dt = 0.01
split_time = 1.0
drift_table_points = 81

[seeds]
master = 9
"#;

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
                if rel != "run_info.json" {
                    files.push((rel, std::fs::read(&path).unwrap()));
                }
            }
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

#[test]
fn staged_subcommands_reproduce_run_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();

    let full = dir.path().join("full");
    let status = bin().args(["run", "--config"]).arg(&config).arg("--out").arg(&full).status().unwrap();
    assert!(status.success());

    let staged = dir.path().join("staged");
    for sub in ["simulate", "train-mle", "evaluate", "compare-laws"] {
        let status =
            bin().args([sub, "--config"]).arg(&config).arg("--out").arg(&staged).status().unwrap();
        assert!(status.success(), "{sub} failed");
    }

    assert_eq!(tree_bytes(&full), tree_bytes(&staged));
}

#[test]
fn equal_seeds_give_byte_identical_runs_and_seed_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for out in [&a, &b] {
        let status = bin().args(["run", "--config"]).arg(&config).arg("--out").arg(out).status().unwrap();
        assert!(status.success());
    }
    let status = bin()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&c)
        .args(["--seed", "123"])
        .status()
        .unwrap();
    assert!(status.success());

    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    assert_ne!(tree_bytes(&a), tree_bytes(&c));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nkind = \"solvent\"\nunknown_field = 3\n").unwrap();
    let status = bin()
        .args(["run", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // B > M0 rejected before any compute.
    let oversized = dir.path().join("oversized.toml");
    std::fs::write(
        &oversized,
        "[data]\nhorizon = 1.0\n[train.optimizer]\nbatch_size = 500\n",
    )
    .unwrap();
    let out = bin()
        .args(["run", "--config"])
        .arg(&oversized)
        .arg("--out")
        .arg(dir.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("500") && msg.contains("100"), "{msg}");

    // Evaluating an empty directory is a missing artifact.
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let status = bin()
        .args(["evaluate", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("nowhere"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
}

#[test]
fn train_subcommand_requires_matching_mode() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let out_dir = dir.path().join("out");
    let status =
        bin().args(["simulate", "--config"]).arg(&config).arg("--out").arg(&out_dir).status().unwrap();
    assert!(status.success());
    let status =
        bin().args(["train-vi", "--config"]).arg(&config).arg("--out").arg(&out_dir).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn reproduce_table1_emits_rows_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    // Solvent base at a small scale.
    std::fs::write(
        &config,
        r#"
[model]
kind = "solvent"
n_particles = 3

[data]
x0 = [1.0]
horizon = 1.0
dt = 1e-4
observation_delta = 0.01

[train]
l_samples = 10
[train.optimizer]
iterations = 5
batch_size = 50

[eval]
oracle_samples = 3000
eval_l_samples = 50
law_times = []
compare_horizon = 2.0
compare_dt = 0.01
split_time = 1.0
drift_table_points = 81

[seeds]
master = 3
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("table");
    let out = bin()
        .args(["reproduce-table1", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .args(["--cells", "1:3:50,1:3:100"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("reports/table1.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("d,N,n,M0,mse"));
    assert_eq!(table.lines().count(), 3);
}
