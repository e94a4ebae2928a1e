use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn raid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = raid(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn prepare(root: &Path) -> std::path::PathBuf {
    let raw = root.join("raw");
    let data = root.join("data");
    ok(&["synth", "--out", s(&raw), "--users", "120", "--items", "80", "--per-user", "15", "--seed", "3"]);
    ok(&[
        "ingest",
        "--ratings",
        s(&raw.join("ratings.dat")),
        "--users",
        s(&raw.join("users.dat")),
        "--out",
        s(&data),
        "--seed",
        "3",
    ]);
    data
}

const QUICK: [&str; 10] = ["--e1", "2", "--e2", "2", "--dim", "8", "--support-size", "32", "--batch-size", "128"];

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend(QUICK);
    args.extend(extra);
    ok(&args);
}

#[test]
fn full_pipeline_produces_sorted_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = prepare(tmp.path());
    let runs = [("none", vec!["--defense", "none"]), ("raid", vec!["--defense", "raid"]), ("dp", vec!["--defense", "dp", "--sigma", "0.1"])];
    for (dir, extra) in &runs {
        let out = tmp.path().join(dir);
        train(&data, &out, extra);
        for f in ["run.json", "checkpoint.bin", "train_log.csv"] {
            assert!(out.join(f).is_file(), "{dir}/{f}");
        }
        ok(&["attack", "--run", s(&out)]);
        ok(&["eval", "--run", s(&out)]);
        let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
        assert_eq!(eval["seed"], 2);
        let attack: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("attack.json")).unwrap()).unwrap();
        let bacc = attack["report"]["bacc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&bacc));
    }
    let log = fs::read_to_string(tmp.path().join("raid/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    let report = tmp.path().join("report");
    let out = raid(&["report", s(&tmp.path().join("raid")), s(&tmp.path().join("none")), s(&tmp.path().join("dp")), "--out", s(&report)]);
    assert!(out.status.success());
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["DP", "Original", "RAID"]);
    assert!(csv.starts_with("method,F1,BAcc,HR@5,HR@10,HR@15,HR@20,NDCG@5"));
    assert!(report.join("report.md").is_file());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = prepare(tmp.path());
    let manifest = fs::read(data.join("manifest.json")).unwrap();
    let again = tmp.path().join("again");
    ok(&[
        "ingest",
        "--ratings",
        s(&tmp.path().join("raw/ratings.dat")),
        "--users",
        s(&tmp.path().join("raw/users.dat")),
        "--out",
        s(&again),
        "--seed",
        "3",
    ]);
    assert_eq!(fs::read(again.join("manifest.json")).unwrap(), manifest);

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&data, &a, &["--defense", "raid"]);
    train(&data, &b, &["--defense", "raid"]);
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
}

#[test]
fn zero_eta_raid_equals_no_defense() {
    let tmp = tempfile::tempdir().unwrap();
    let data = prepare(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&data, &a, &["--defense", "raid", "--eta", "0"]);
    train(&data, &b, &["--defense", "none"]);
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
}

#[test]
fn bad_input_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.dat");
    let out = raid(&["ingest", "--ratings", s(&missing), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.dat"));

    let out = raid(&["attack", "--run", s(&tmp.path().join("nowhere"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = raid(&["train", "--data", s(tmp.path()), "--out", s(&tmp.path().join("r")), "--defense", "dp"]);
    assert_eq!(out.status.code(), Some(2));

    let out = raid(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let data = prepare(tmp.path());
    let out_dir = tmp.path().join("boom");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&out_dir), "--mu", "1e200", "--e1", "1", "--e2", "0", "--dim", "4"];
    args.push("--defense");
    args.push("none");
    let out = raid(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("checkpoint.bin").is_file());
}
