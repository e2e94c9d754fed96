use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_headstage"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "headstage {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Generates a recording and its dataset in `dir`.
fn prepare(dir: &Path, duration: &str, seed: &str) {
    run(dir, &["generate", "--out", "rec.spkr", "--annotations", "ann.csv", "--duration-s", duration, "--seed", seed]);
    run(dir, &["build-dataset", "--in", "rec.spkr", "--annotations", "ann.csv", "--out", "data.jsonl"]);
}

/// A minute of data balances down to ~150 training waveforms, about three
/// updates per epoch, so the chain uses a larger step size.
const SHORT_RUN_CONFIG: &str = "[train.adam]\nlr = 0.005\n";

#[test]
fn full_chain_on_one_minute() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), SHORT_RUN_CONFIG).unwrap();
    prepare(d, "60", "3");
    run(d, &["-c", "c.toml", "train", "--data", "data.jsonl", "--topology", "40,16,7,5,4,3", "--rf", "0.01", "--out", "model.json", "--log", "train.jsonl"]);
    run(d, &["quantize", "--model", "model.json", "--calib", "data.jsonl", "--out", "qmodel.json"]);
    run(d, &["run", "--in", "rec.spkr", "--model", "qmodel.json", "--out", "events.spke", "--stats", "stats.json"]);
    run(d, &["postprocess", "--in", "events.spke", "--dead-zone-ms", "4", "--out", "events_pp.spke"]);
    run(d, &["metrics", "--events", "events_pp.spke", "--annotations", "ann.csv", "--out", "metrics.json"]);
    run(d, &["report", "--stats", "stats.json", "--out", "report.json"]);

    let overall = json(d.join("metrics.json"))["overall_accuracy"].as_f64().unwrap();
    assert!(overall >= 0.95, "overall accuracy {overall}");
    let report = json(d.join("report.json"));
    assert!(report["battery_days"].as_f64().unwrap() > 1.0);
    let log = std::fs::read_to_string(d.join("train.jsonl")).unwrap();
    assert!(log.lines().count() >= 1);
}

#[test]
fn default_report_battery_band() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &["report", "--out", "report.json"]);
    let r = json(dir.path().join("report.json"));
    let days = r["battery_days"].as_f64().unwrap();
    assert!((3.0..=6.0).contains(&days), "{days}");
    assert_eq!(r["battery_voltage_v"].as_f64(), Some(1.5));
    assert_eq!(r["battery_voltage_assumed"].as_bool(), Some(true));
    assert_eq!(r["storage_bytes"].as_u64(), Some(34_560_000));
}

#[test]
fn reference_grid_reports_expected_complexities() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d, "60", "5");
    run(d, &["dse", "--data", "data.jsonl", "--grid", "table3", "--out", "dse.csv", "--select", "pick.json"]);
    let mut rdr = csv::Reader::from_path(d.join("dse.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    let col = header.iter().position(|h| h == "complexity").unwrap();
    let got: Vec<u64> = rdr.records().map(|r| r.unwrap()[col].parse().unwrap()).collect();
    assert_eq!(got, vec![86, 86, 181, 241, 378, 426, 761, 819, 1690]);
    let pick = json(d.join("pick.json"));
    assert!(pick["cs_ci_low"].as_f64().unwrap() > 0.9);
}

#[test]
fn outputs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = "[train]\nepochs = 8\n[dse]\nfolds = 3\n";
    for d in [a.path(), b.path()] {
        std::fs::write(d.join("c.toml"), cfg).unwrap();
        prepare(d, "20", "9");
        run(d, &["-c", "c.toml", "train", "--data", "data.jsonl", "--out", "model.json"]);
        run(d, &["quantize", "--model", "model.json", "--calib", "data.jsonl", "--out", "qmodel.json"]);
        run(d, &["run", "--in", "rec.spkr", "--model", "qmodel.json", "--out", "events.spke", "--stats", "stats.json"]);
    }
    run(a.path(), &["-c", "c.toml", "dse", "--data", "data.jsonl", "--out", "dse.csv", "--jobs", "1"]);
    run(b.path(), &["-c", "c.toml", "dse", "--data", "data.jsonl", "--out", "dse.csv", "--jobs", "4"]);
    for f in ["rec.spkr", "ann.csv", "data.jsonl", "model.json", "qmodel.json", "events.spke", "stats.json", "dse.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn exit_codes_by_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let missing = bin().current_dir(d).args(["run", "--in", "nope.spkr", "--model", "m.json", "--out", "e.spke"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));

    std::fs::write(d.join("bad.toml"), "[detector]\nunknown_key = 1\n").unwrap();
    let invalid = bin().current_dir(d).args(["-c", "bad.toml", "report", "--out", "r.json"]).output().unwrap();
    assert_eq!(invalid.status.code(), Some(1));
    assert!(!invalid.stderr.is_empty());

    std::fs::write(d.join("neg.toml"), "[resources]\nbattery_voltage_v = -1.0\n").unwrap();
    let negative = bin().current_dir(d).args(["-c", "neg.toml", "report", "--out", "r.json"]).output().unwrap();
    assert_eq!(negative.status.code(), Some(1));

    // A floor nobody can clear leaves the grid search without survivors.
    prepare(d, "20", "1");
    std::fs::write(d.join("hard.toml"), "[train]\nepochs = 3\n[dse]\nfolds = 2\ncs_accuracy_floor = 1.0\n").unwrap();
    let infeasible = bin()
        .current_dir(d)
        .args(["-c", "hard.toml", "dse", "--data", "data.jsonl", "--out", "dse.csv"])
        .output()
        .unwrap();
    assert_eq!(infeasible.status.code(), Some(3), "{}", String::from_utf8_lossy(&infeasible.stderr));
}

#[test]
fn help_documents_config_keys() {
    let out = bin().arg("--help").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["detector.alpha_thresh", "train.ortho_lambda", "resources.battery_voltage_v", "postprocess.dead_zone_ms"] {
        assert!(text.contains(key), "{key} missing from --help");
    }
}
