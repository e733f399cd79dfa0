use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use spinewarp::cli::RUN_ARTIFACTS;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spinewarp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn spinewarp")
}

fn stderr_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not a JSON error record: {text}"))
}

/// One fractured phantom shared by the tests below.
fn phantom_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let dir = root.join("ph");
        let out = run(&[
            "phantom",
            "--seed",
            "4",
            "--fracture",
            "L2",
            "--height-factor",
            "0.6",
            "--write-atlas",
            "--output",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero_without_touching_disk() {
    let cwd = tempfile::tempdir().unwrap();
    for sub in [&["--help"][..], &["run", "--help"], &["phantom", "--help"], &["evaluate", "--help"]] {
        let out = bin().args(sub).current_dir(cwd.path()).output().unwrap();
        assert!(out.status.success());
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
    assert_eq!(fs::read_dir(cwd.path()).unwrap().count(), 0);
}

#[test]
fn phantom_is_deterministic_and_marks_the_fracture() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let out = run(&["phantom", "--seed", "42", "--fracture", "L2", "--height-factor", "0.6", "-o", s(d)]);
        assert!(out.status.success());
    }
    for f in ["healthy_ct.nii.gz", "healthy_mask.nii.gz", "fractured_ct.nii.gz", "fractured_mask.nii.gz", "truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let truth: Value = serde_json::from_str(&fs::read_to_string(a.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["fractured_levels"], serde_json::json!(["L2"]));
    assert_eq!(truth["version"], 1);
    assert!(truth["centroids_mm"].is_object() && truth["volumes_ml"].is_object());

    let c = tmp.path().join("c");
    assert!(run(&["phantom", "-o", s(&c)]).status.success());
    let truth: Value = serde_json::from_str(&fs::read_to_string(c.join("truth.json")).unwrap()).unwrap();
    let levels: Vec<&str> = truth["levels"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(levels, ["T10", "T11", "T12", "L1", "L2", "L3", "L4", "L5"]);
    assert!(!c.join("fractured_ct.nii.gz").exists());
}

#[test]
fn run_writes_artifacts_deterministically() {
    let ph = phantom_dir();
    let tmp = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for name in ["r1", "r2"] {
        let out_dir = tmp.path().join(name);
        let out = run(&[
            "run",
            "--ct",
            s(&ph.join("fractured_ct.nii.gz")),
            "--mask",
            s(&ph.join("fractured_mask.nii.gz")),
            "--fractured",
            "l2",
            "--atlas",
            s(&ph.join("atlas")),
            "--truth",
            s(&ph.join("truth.json")),
            "--export-field",
            "--output",
            s(&out_dir),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        for f in RUN_ARTIFACTS {
            assert!(out_dir.join(f).is_file(), "missing {f}");
        }
        assert!(out_dir.join("field.nii.gz").is_file());
        reports.push(out_dir);
    }
    for f in RUN_ARTIFACTS.iter().chain(&["field.nii.gz", "scatter.csv"]) {
        assert_eq!(
            fs::read(reports[0].join(f)).unwrap(),
            fs::read(reports[1].join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(reports[0].join("report.json")).unwrap()).unwrap();
    assert_eq!(report["volumes"][0]["level"], "L2");
    assert!(report["volumes"][0]["pre_ml"].as_f64().unwrap() > 0.0);
    assert!(report["cement_ml"].as_f64().unwrap() > 0.0);
    assert!(report["straightening"][0]["straightened_mm"].is_number());
    assert!(report["transforms"]["L1"].is_array());
    // no staging directory is left behind
    let leftovers: Vec<_> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with('.'))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");

    // refuses to clobber without --overwrite
    let again = run(&[
        "run",
        "--ct",
        s(&ph.join("fractured_ct.nii.gz")),
        "--mask",
        s(&ph.join("fractured_mask.nii.gz")),
        "--fractured",
        "L2",
        "--output",
        s(&reports[0]),
    ]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn config_file_and_flag_precedence() {
    let ph = phantom_dir();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    let out_dir = tmp.path().join("out");
    fs::write(
        &cfg,
        format!(
            "# run settings\nct = {}\nmask = {}\nfractured = L4\natlas = {}\noutput = {}\nablation = true\n",
            ph.join("fractured_ct.nii.gz").display(),
            ph.join("fractured_mask.nii.gz").display(),
            ph.join("atlas").display(),
            out_dir.display()
        ),
    )
    .unwrap();
    // the flag overrides the file's fractured level
    let out = run(&["run", "--config", s(&cfg), "--fractured", "L2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["volumes"][0]["level"], "L2");
    assert_eq!(report["ablation"], true);
    assert!(report["straightening"][0]["straightened_mm"].is_null());

    fs::write(&cfg, "colour = red\n").unwrap();
    let bad = run(&["run", "--config", s(&cfg)]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(stderr_record(&bad)["error"]["kind"], "bad_input");
}

#[test]
fn error_records_and_exit_codes() {
    let ph = phantom_dir();
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.nii.gz");
    let out = run(&[
        "run",
        "--ct",
        s(&ph.join("fractured_ct.nii.gz")),
        "--mask",
        s(&missing),
        "--fractured",
        "L2",
        "--output",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let rec = stderr_record(&out);
    assert_eq!(rec["error"]["path"], s(&missing));
    assert_eq!(rec["exit_code"], 2);
    assert!(!tmp.path().join("o").exists());

    let out = run(&[
        "run",
        "--ct",
        s(&ph.join("fractured_ct.nii.gz")),
        "--mask",
        s(&ph.join("fractured_mask.nii.gz")),
        "--fractured",
        "Q7",
        "--output",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = bin()
        .args(["phantom", "-o", s(&tmp.path().join("p"))])
        .env("SPINEWARP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["evaluate", s(tmp.path()), "--truth", s(&tmp.path().join("truth.json"))]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr_record(&out)["error"]["path"].as_str().unwrap().ends_with("truth.json"));
}

#[test]
fn evaluate_fills_truth_and_compares_ablation() {
    let ph = phantom_dir();
    let tmp = tempfile::tempdir().unwrap();
    let with = tmp.path().join("with");
    let without = tmp.path().join("without");
    let (ct, mask, atlas) = (ph.join("fractured_ct.nii.gz"), ph.join("fractured_mask.nii.gz"), ph.join("atlas"));
    for (dir, extra) in [(&with, None), (&without, Some("--ablation"))] {
        let mut args = vec![
            "run",
            "--ct",
            s(&ct),
            "--mask",
            s(&mask),
            "--fractured",
            "L2",
            "--atlas",
            s(&atlas),
            "--output",
            s(dir),
        ];
        args.extend(extra);
        let out = run(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let before: Value = serde_json::from_str(&fs::read_to_string(with.join("report.json")).unwrap()).unwrap();
    assert!(before["volumes"][0]["pre_ml"].is_null());
    assert!(before["cement_ml"].as_f64().unwrap() > 0.0);

    let out = run(&["evaluate", s(&with), "--truth", s(&ph.join("truth.json")), "--ablation-compare", s(&without)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Straightening") && stdout.contains("W/o straightening"));
    let ev: Value = serde_json::from_str(&fs::read_to_string(with.join("evaluation.json")).unwrap()).unwrap();
    let row = &ev["volumes"][0];
    let (pre, inpainted) = (row["pre_ml"].as_f64().unwrap(), row["inpainted_ml"].as_f64().unwrap());
    assert!((row["error_ml"].as_f64().unwrap() - (pre - inpainted)).abs() < 1e-9);
    assert!(row["re_pct"].as_f64().unwrap().abs() < 10.0);
    let table: Value = serde_json::from_str(&fs::read_to_string(with.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(table["rows"][0]["level"], "L2");
    assert!(table["rows"][0]["without_straightening"]["inpainted_ml"].is_number());

    // two runs of the same kind cannot be compared
    let out = run(&["evaluate", s(&with), "--truth", s(&ph.join("truth.json")), "--ablation-compare", s(&with)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn self_comparison_on_healthy_input() {
    let ph = phantom_dir();
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("self");
    let out = run(&[
        "run",
        "--ct",
        s(&ph.join("healthy_ct.nii.gz")),
        "--mask",
        s(&ph.join("healthy_mask.nii.gz")),
        "--fractured",
        "L2",
        "--atlas",
        s(&ph.join("atlas")),
        "--output",
        s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["evaluate", s(&out_dir), "--truth", s(&ph.join("truth.json"))]);
    assert!(out.status.success());
    let ev: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("evaluation.json")).unwrap()).unwrap();
    // straightening a healthy spine is a fixed point for the distances; the
    // erased-and-reestimated vertebra only matches within anatomical slack
    assert!(ev["straightening"][0]["re_pct"].as_f64().unwrap().abs() <= 2.0);
    assert!(ev["volumes"][0]["re_pct"].as_f64().unwrap().abs() <= 8.0);
}
