use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: [&str; 6] = ["--dim", "16", "--heads", "4", "--layers", "2"];

fn acdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acdnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = acdnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn records(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn of_kind<'a>(recs: &'a [Value], kind: &str) -> Vec<&'a Value> {
    recs.iter().filter(|r| r["kind"] == kind).collect()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct World {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

impl World {
    fn new(patients: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_owned();
        let data = root.join("data.jsonl");
        ok(&["gen-data", "--seed", "3", "--patients", &patients.to_string(), "--out", s(&data)]);
        Self { _dir: dir, root, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn train(&self, ckpt: &Path, epochs: usize, extra: &[&str]) -> Vec<Value> {
        let epochs = epochs.to_string();
        let mut args = vec!["train", "--dataset", s(&self.data), "--checkpoint", s(ckpt), "--epochs", &epochs];
        args.extend(SMALL);
        args.extend(extra);
        records(&ok(&args))
    }
}

#[test]
fn gen_data_is_deterministic_and_summarises() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let first = records(&ok(&["gen-data", "--seed", "7", "--out", s(&a)]));
    ok(&["gen-data", "--seed", "7", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let summary = of_kind(&first, "summary")[0];
    assert_eq!(summary["medicines"], 131);
    assert_eq!(summary["ddi_pairs"], 448);
    assert_eq!(summary["patients"], 600);
    assert_eq!(first[0]["kind"], "config");
    assert_eq!(first[0]["config"]["seed"], 7);

    let c = dir.path().join("c.jsonl");
    ok(&["gen-data", "--seed", "8", "--patients", "20", "--out", s(&c)]);
    assert_ne!(read(&a), read(&c));
}

#[test]
fn infeasible_ddi_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[generator]\nmedications = 10\nddi_pairs = 46\n").unwrap();
    let out = acdnet(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("x.jsonl"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("DDI pairs"), "{err}");
    assert!(!dir.path().join("x.jsonl").exists());
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\n[generator]\npatients = 12\nmean_visits = 3.0\n").unwrap();
    let out = records(&ok(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--seed",
        "9",
        "--out",
        s(&dir.path().join("d.jsonl")),
    ]));
    let echoed = &out[0]["config"];
    assert_eq!(echoed["seed"], 9);
    assert_eq!(echoed["generator"]["patients"], 12);
    assert_eq!(echoed["generator"]["mean_visits"], 3.0);
    assert_eq!(echoed["generator"]["medications"], 131);

    std::fs::write(&cfg, "seed = 5\nsede = 1\n").unwrap();
    let bad = acdnet(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("e.jsonl"))]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("sede"));
}

#[test]
fn unknown_variant_is_rejected() {
    let out = acdnet(&["ablate", "--variant", "w/o everything"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown variant"));
}

#[test]
fn train_eval_predict_round_trip() {
    let w = World::new(36);
    let ckpt = w.path("model.ckpt");
    let log = w.train(&ckpt, 2, &[]);
    assert_eq!(log[0]["kind"], "config");
    assert_eq!(log[0]["config"]["encoder"]["dim"], 16);
    assert_eq!(log[0]["config"]["generator"]["patients"], 36);
    let epochs = of_kind(&log, "epoch");
    assert_eq!(epochs.len(), 2);
    assert!(epochs.iter().all(|e| e["loss"].as_f64().unwrap().is_finite()));
    let done = of_kind(&log, "checkpoint")[0];
    let selected = done["provenance"]["selected_epoch"].as_u64().unwrap();
    assert!((1..=2).contains(&selected));

    let report_path = w.path("report.jsonl");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&w.data),
        "--rounds",
        "1",
        "--fraction",
        "1.0",
        "--out",
        s(&report_path),
    ]);
    let report = records(&read(&report_path));
    assert_eq!(report[0]["config"]["eval"]["rounds"], 1);
    let r = of_kind(&report, "report")[0];
    assert_eq!(r["split"], "test");
    for m in r["report"]["metrics"].as_array().unwrap() {
        assert_eq!(m["std"], 0.0, "{m}");
    }
    // Rerunning gives the same report; only the echoed output path differs.
    let again = ok(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&w.data), "--rounds", "1", "--fraction", "1.0"]);
    assert_eq!(again.lines().nth(1), read(&report_path).lines().nth(1));

    let boot = records(&ok(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&w.data), "--split", "train"]));
    let r = of_kind(&boot, "report")[0];
    assert_eq!(r["report"]["rounds"], 10);
    assert_eq!(r["report"]["metrics"].as_array().unwrap().len(), 9);
    assert!(r["summary"]["jaccard"].as_str().unwrap().contains(" ± "));

    let pred = records(&ok(&["predict", "--checkpoint", s(&ckpt), "--patients", s(&w.data), "--top", "5"]));
    let visits = of_kind(&pred, "visit");
    assert!(!visits.is_empty());
    for v in visits {
        let p = &v["prediction"];
        let predicted = p["predicted"].as_array().unwrap().len();
        assert!(predicted >= 1);
        assert_eq!(p["ranked"].as_array().unwrap().len(), 5);
        assert_eq!(p["scores"].as_array().unwrap().len(), 131);
        assert_eq!(p["o1"].as_array().unwrap().len(), 131);
        assert_eq!(p["o2"].as_array().unwrap().len(), 131);
        let part = &p["partition"];
        let n = |k: &str| part[k].as_array().unwrap().len();
        assert_eq!(n("correct") + n("unseen"), predicted);
        assert_eq!(v["counts"]["missed"], n("missed"));
    }
}

#[test]
fn predict_without_truth_prints_only_rankings() {
    let w = World::new(30);
    let ckpt = w.path("model.ckpt");
    w.train(&ckpt, 1, &[]);
    let patients = w.path("patients.jsonl");
    std::fs::write(
        &patients,
        "{\"kind\":\"patient\",\"id\":\"q1\",\"visits\":[{\"diagnoses\":[1,2],\"procedures\":[0]},{\"diagnoses\":[3],\"procedures\":[4],\"medications\":[]}]}\n\
         {\"kind\":\"patient\",\"id\":\"q2\",\"visits\":[{\"diagnoses\":[5],\"procedures\":[1],\"medications\":[0,1]}]}\n",
    )
    .unwrap();
    let out = records(&ok(&["predict", "--checkpoint", s(&ckpt), "--patients", s(&patients), "--patient", "q1"]));
    let visits = of_kind(&out, "visit");
    assert_eq!(visits.len(), 2);
    for v in &visits {
        assert_eq!(v["patient"], "q1");
        assert!(v["prediction"]["partition"].is_null());
        assert!(v["counts"].is_null());
        assert_eq!(v["prediction"]["ranked"].as_array().unwrap().len(), 10);
    }

    let missing = acdnet(&["predict", "--checkpoint", s(&ckpt), "--patients", s(&patients), "--patient", "zz"]);
    assert!(!missing.status.success());

    std::fs::write(&patients, "{\"kind\":\"patient\",\"id\":\"q3\",\"visits\":[{\"diagnoses\":[100],\"procedures\":[0]}]}\n").unwrap();
    let bad = acdnet(&["predict", "--checkpoint", s(&ckpt), "--patients", s(&patients)]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 1"));
}

#[test]
fn eval_against_a_different_vocabulary_fails_cleanly() {
    let w = World::new(30);
    let ckpt = w.path("model.ckpt");
    w.train(&ckpt, 1, &[]);
    let cfg = w.path("other.toml");
    std::fs::write(&cfg, "[generator]\nmedications = 40\nddi_pairs = 20\npatients = 20\n").unwrap();
    let other = w.path("other.jsonl");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&other)]);
    let report = w.path("report.jsonl");
    let out = acdnet(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&other), "--out", s(&report)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("incompatible"), "{err}");
    assert!(!report.exists());

    let pred = acdnet(&["predict", "--checkpoint", s(&ckpt), "--patients", s(&other)]);
    assert!(!pred.status.success());
    assert!(String::from_utf8_lossy(&pred.stderr).contains("incompatible"));

    let shape = acdnet(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&w.data), "--dim", "32"]);
    assert!(!shape.status.success());
}

#[test]
fn resumed_training_continues_the_same_log() {
    let w = World::new(30);
    let straight = w.train(&w.path("a.ckpt"), 3, &[]);
    let b = w.path("b.ckpt");
    let first = w.train(&b, 2, &[]);
    let rest = w.train(&b, 3, &["--resume"]);
    let epochs = |r: &[Value]| of_kind(r, "epoch").into_iter().cloned().collect::<Vec<_>>();
    let mut joined = epochs(&first);
    joined.extend(epochs(&rest));
    assert_eq!(joined, epochs(&straight));
    assert_eq!(
        of_kind(&rest, "checkpoint")[0]["provenance"],
        of_kind(&straight, "checkpoint")[0]["provenance"]
    );

    let changed = acdnet(&[
        "train", "--dataset", s(&w.data), "--checkpoint", s(&b), "--epochs", "4", "--resume", "--lr", "0.01",
        "--dim", "16", "--heads", "4", "--layers", "2",
    ]);
    assert!(!changed.status.success());
    assert!(String::from_utf8_lossy(&changed.stderr).contains("different configuration"));
}

#[test]
fn ablate_and_sweep_emit_one_row_each() {
    let w = World::new(24);
    let mut args = vec!["ablate", "--dataset", s(&w.data), "--epochs", "1", "--variant", "gru", "--variant", "only-o1"];
    args.extend(SMALL);
    let out = records(&ok(&args));
    let rows = of_kind(&out, "ablation");
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "gru", "only-o1"]);
    for r in &rows {
        for col in ["jaccard", "prauc", "f1", "ddi_rate", "avg_med"] {
            assert!(r[col]["mean"].is_f64(), "{col}");
            assert!(r[col]["std"].as_f64().unwrap() >= 0.0);
        }
    }

    let mut args = vec!["train", "--lambda-sweep", "--dataset", s(&w.data), "--epochs", "1"];
    args.extend(SMALL);
    let out = records(&ok(&args));
    let lambdas: Vec<f64> = of_kind(&out, "sweep").iter().map(|r| r["lambda"].as_f64().unwrap()).collect();
    assert_eq!(lambdas, [0.90, 0.95, 0.97, 0.99]);
}

#[test]
fn gradcheck_passes_and_catches_a_broken_backward() {
    let out = acdnet(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recs = records(&String::from_utf8(out.stdout).unwrap());
    let summary = of_kind(&recs, "summary")[0];
    assert!(summary["failed"].as_array().unwrap().is_empty());
    assert!(summary["worst"]["name"].as_str().unwrap().contains('/'));

    let out = acdnet(&["gradcheck", "--corrupt-matmul"]);
    assert!(!out.status.success());
    let recs = records(&String::from_utf8(out.stdout).unwrap());
    let failed = of_kind(&recs, "summary")[0]["failed"].as_array().unwrap().clone();
    assert!(failed.iter().any(|f| f == "primitive/matmul"));
}
