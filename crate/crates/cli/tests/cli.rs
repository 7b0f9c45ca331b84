use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const STANDARD: &str = r#"{"blocks":[{"n":1,"B":0,"K":0},{"n":2,"B":0,"K":0.5},{"n":1,"B":0,"K":0}],"J":[1,1]}"#;

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str], spec: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pseudochain"))
        .args(args)
        .arg("--spec")
        .arg(spec)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(output: &Output) {
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

/// Data rows of a CSV with `#` comments and one header line.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("# config_hash="));
    text.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn simulate_starts_at_unit_survival() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir, "spec.json", STANDARD);
    let out = dir.path().join("sim.csv");
    ok(&run(&["simulate", "--tmax", "2", "--points", "21"], &spec, &out));
    let rows = rows(&out);
    assert_eq!(rows.len(), 21);
    let first: Vec<f64> = rows[0].iter().map(|x| x.parse().unwrap()).collect();
    assert_eq!(&first[..5], &[0.0, 1.0, 0.0, 1.0, 0.0]);
    assert_eq!(first[5], 1.0);
}

#[test]
fn linear_spec_survival_columns_agree() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir, "spec.json", r#"{"blocks":[{"n":1,"B":0.2,"K":0},{"n":1,"B":-0.1,"K":0},{"n":1,"B":0,"K":0}],"J":[0.8,1.3]}"#);
    let out = dir.path().join("sim.csv");
    ok(&run(&["simulate"], &spec, &out));
    for row in rows(&out) {
        let v: Vec<f64> = row.iter().map(|x| x.parse().unwrap()).collect();
        assert!((v[1] - v[3]).abs() < 1e-12 && (v[2] - v[4]).abs() < 1e-12);
    }
}

#[test]
fn missing_spec_fails_without_output() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sim.csv");
    let output = run(&["simulate"], &dir.path().join("absent.json"), &out);
    assert_eq!(output.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn invalid_spec_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir, "spec.json", r#"{"blocks":[{"n":2,"B":0,"K":1},{"n":1,"B":0,"K":0}],"J":[1]}"#);
    let out = dir.path().join("sim.csv");
    let output = run(&["simulate"], &spec, &out);
    assert_eq!(output.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn oversized_register_is_a_cap_error() {
    let dir = TempDir::new().unwrap();
    let blocks: Vec<String> = (0..40).map(|_| r#"{"n":1,"B":0,"K":0}"#.to_string()).collect();
    let couplings = vec!["1"; 39].join(",");
    let spec = write(&dir, "spec.json", &format!(r#"{{"blocks":[{}],"J":[{couplings}]}}"#, blocks.join(",")));
    let out = dir.path().join("sim.csv");
    let output = run(&["simulate"], &spec, &out);
    assert_eq!(output.status.code(), Some(3), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(!out.exists());
}

#[test]
fn tomography_of_uniform_chain() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir, "spec.json", r#"{"blocks":[{"n":1,"B":0,"K":0},{"n":1,"B":0,"K":0},{"n":1,"B":0,"K":0}],"J":[1,1]}"#);
    let out = dir.path().join("tomo.json");
    ok(&run(&["tomography"], &spec, &out));
    let report = json(&out);
    assert!(report["config_hash"].as_str().unwrap().len() == 64);
    for j in floats(&report["J"]) {
        assert!((j - 1.0).abs() < 1e-6);
    }
    for b in floats(&report["B_eff"]) {
        assert!(b.abs() < 1e-6);
    }
}

#[test]
fn tomography_of_a_single_spin_gives_its_field() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir, "spec.json", r#"{"blocks":[{"n":1,"B":0.3,"K":0}],"J":[]}"#);
    let out = dir.path().join("tomo.json");
    ok(&run(&["tomography"], &spec, &out));
    let report = json(&out);
    assert!(floats(&report["J"]).is_empty());
    let b = floats(&report["B_eff"]);
    assert_eq!(b.len(), 1);
    assert!((b[0] - 0.3).abs() < 1e-6);
}

#[test]
fn sampled_reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir, "spec.json", STANDARD);
    let args = ["tomography", "--mode", "sampled", "--shots", "10000", "--seed", "5"];
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    ok(&run(&args, &spec, &a));
    ok(&run(&args, &spec, &b));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.path().join("c.json");
    ok(&run(&["tomography", "--mode", "sampled", "--shots", "10000", "--seed", "6"], &spec, &c));
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn infer_recovers_the_standard_fixture() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir, "spec.json", STANDARD);
    let out = dir.path().join("infer.json");
    ok(&run(&["infer"], &spec, &out));
    let report = json(&out);
    assert_eq!(report["status"], "resolved");
    let blocks = report["estimate"]["blocks"].as_array().unwrap();
    let sizes: Vec<u64> = blocks.iter().map(|b| b["n"].as_u64().unwrap()).collect();
    assert_eq!(sizes, vec![1, 2, 1]);
    assert!((blocks[1]["K"].as_f64().unwrap() - 0.5).abs() < 1e-6);
    assert_eq!(report["verification"]["confirmed"], true);
}

#[test]
fn infer_on_a_linear_chain_finds_no_blocks() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir, "spec.json", r#"{"blocks":[{"n":1,"B":0.1,"K":0},{"n":1,"B":0,"K":0},{"n":1,"B":-0.2,"K":0}],"J":[1,0.7]}"#);
    let out = dir.path().join("infer.json");
    ok(&run(&["infer"], &spec, &out));
    let report = json(&out);
    assert_eq!(report["status"], "resolved");
    assert!(report["estimate"]["blocks"].as_array().unwrap().iter().all(|b| b["n"] == 1));
}

#[test]
fn infer_reports_a_size_bound_that_is_too_small() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir, "spec.json", r#"{"blocks":[{"n":1,"B":0,"K":0},{"n":3,"B":0,"K":0.3},{"n":1,"B":0,"K":0}],"J":[1,1]}"#);
    let out = dir.path().join("infer.json");
    ok(&run(&["infer", "--size-bound", "2"], &spec, &out));
    assert_eq!(json(&out)["status"], "ambiguous_structure");
}

#[test]
fn flush_with_empty_prior_stays_at_zero() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir, "spec.json", STANDARD);
    let out = dir.path().join("flush.csv");
    ok(&run(&["flush", "--occupancy", "0", "--rounds", "12"], &spec, &out));
    let rows = rows(&out);
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() == 0.0));
}

#[test]
fn flush_trace_has_one_row_per_round_and_reruns_identically() {
    let dir = TempDir::new().unwrap();
    let spec = write(
        &dir,
        "spec.json",
        r#"{"blocks":[{"n":1,"B":0,"K":0},{"n":2,"B":0,"K":0},{"n":1,"B":0,"K":0}],"J":[1,1],
            "trap":{"block":1,"occupancy":0.5,"occupied":true,"rounds":7}}"#,
    );
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    ok(&run(&["flush", "--mode", "sampled", "--seed", "3"], &spec, &a));
    ok(&run(&["flush", "--mode", "sampled", "--seed", "3"], &spec, &b));
    assert_eq!(rows(&a).len(), 7);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    // an occupied trap never produces a detection at t*
    assert!(rows(&a).iter().all(|r| r[1] == "1"));
    ok(&run(&["flush", "--rounds", "4"], &spec, &a));
    assert_eq!(rows(&a).len(), 4);
}

#[test]
fn run_file_supplies_options_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir, "spec.json", STANDARD);
    let config = write(&dir, "run.json", &format!(r#"{{"spec":{:?},"tmax":1.0,"points":5}}"#, spec.display().to_string()));
    let out = dir.path().join("sim.csv");
    let output = Command::new(env!("CARGO_BIN_EXE_pseudochain"))
        .args(["simulate", "--points", "9", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    ok(&output);
    let rows = rows(&out);
    assert_eq!(rows.len(), 9);
    assert_eq!(rows[8][0].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn oracle_dumps_exact_coefficients() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir, "spec.json", r#"{"blocks":[{"n":1,"B":0,"K":0},{"n":2,"B":0,"K":0},{"n":1,"B":0,"K":0}],"J":[1,1]}"#);
    let out = dir.path().join("oracle.json");
    ok(&run(&["oracle", "--order", "4"], &spec, &out));
    let dump = json(&out);
    assert_eq!(dump["return_moments"]["pseudo"][4], "8");
    assert_eq!(dump["return_moments"]["model"][4], "4");
    assert_eq!(dump["two_excitation_value"], "4");
    assert_eq!(dump["g_x"]["pseudo"][0], "1");
}
