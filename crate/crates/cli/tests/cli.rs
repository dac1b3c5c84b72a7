use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn exitlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exitlab"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn pde_writes_four_csvs_with_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let o = exitlab(&["--out", "o", "pde"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("o");
    for name in ["u_n.csv", "large_solution.csv", "kernels.csv", "refinement.csv"] {
        let text = fs::read_to_string(dir.join(name)).unwrap();
        assert!(text.starts_with("# config_hash="), "{name}");
        assert!(text.lines().count() > 3, "{name}");
    }
    let csvs = fs::read_dir(&dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "csv").count();
    assert_eq!(csvs, 4);
}

#[test]
fn tiny_grid_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.json"), r#"{"grid_size": 8}"#).unwrap();
    let o = exitlab(&["--config", "c.json", "pde"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid_size"));
}

#[test]
fn empty_config_file_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.json"), "").unwrap();
    let o = exitlab(&["--config", "c.json", "pde"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = exitlab(&["verify", "--suite", "nope"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown suite"));
}

#[test]
fn thirteen_atoms_is_a_resource_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.json"), r#"{"nu_counts": [13, 0]}"#).unwrap();
    let o = exitlab(&["--config", "c.json", "--replicates", "1", "backbone"], tmp.path());
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("resource error") && err.contains("at most 12"), "{err}");
}

#[test]
fn zero_replicates_gives_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let o = exitlab(&["--out", "o", "--replicates", "0", "simulate", "--which", "chain"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(tmp.path().join("o/simulate_chain_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(summary.lines().nth(1).unwrap().starts_with("stage,"));
    assert_eq!(fs::read_to_string(tmp.path().join("o/simulate_chain.jsonl")).unwrap(), "");
}

#[test]
fn fixed_seed_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let o = exitlab(&["--out", "o", "--replicates", "30", "--seed", "7", "simulate", "--which", "killed"], tmp.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let jsonl = fs::read(tmp.path().join("o/simulate_killed.jsonl")).unwrap();
        let csv = fs::read(tmp.path().join("o/simulate_killed_summary.csv")).unwrap();
        runs.push((jsonl, csv));
    }
    assert!(!runs[0].0.is_empty());
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn backbone_and_condition_run_small() {
    let tmp = tempfile::tempdir().unwrap();
    let o = exitlab(&["--out", "o", "--replicates", "5", "backbone"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let z = fs::read_to_string(tmp.path().join("o/backbone_z.jsonl")).unwrap();
    assert_eq!(z.lines().count(), 5);
    let o = exitlab(&["--out", "o", "--replicates", "20", "condition"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = fs::read_to_string(tmp.path().join("o/condition_samples.jsonl")).unwrap();
    assert_eq!(s.lines().count(), 20);
}
