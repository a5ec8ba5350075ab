//! The `sws` binary end to end on a tiny dataset, plus exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sws(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sws")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(out: &Path, seed: &str) -> Output {
    sws(&["gen", "--seed", seed, "--scenes", "16", "--out", p(out)])
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&sws(&["--help"])), 0);
    assert_eq!(code(&sws(&["frobnicate"])), 1);
    assert_eq!(code(&sws(&["gen", "--scenes", "3"])), 1);
    let tmp = tempfile::tempdir().unwrap();
    let bad = sws(&[
        "labels",
        "--scenes",
        p(tmp.path()),
        "--depth",
        p(tmp.path()),
        "--bins",
        "3,x",
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(code(&bad), 1);
    let threads = Command::new(env!("CARGO_BIN_EXE_sws"))
        .env("SWS_THREADS", "zero")
        .args(["gen", "--out", p(&tmp.path().join("d"))])
        .output()
        .unwrap();
    assert_eq!(code(&threads), 1);
}

#[test]
fn missing_inputs_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let o = sws(&[
        "labels",
        "--scenes",
        p(&missing),
        "--depth",
        p(&missing),
        "--out",
        p(tmp.path()),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = sws(&["train", "--data", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(code(&o), 2);
    let o = sws(&[
        "audit",
        "--pred",
        p(&missing),
        "--gold",
        p(&missing),
        "--out",
        p(&tmp.path().join("a.json")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_and_labels_are_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&gen(&a, "3")), 0);
    assert_eq!(code(&gen(&b, "3")), 0);
    for f in ["qa.jsonl", "splits.json", "dataset.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    for d in [&a, &b] {
        let o = sws(&[
            "labels",
            "--scenes",
            p(&d.join("scenes")),
            "--depth",
            p(&d.join("depth")),
            "--out",
            p(&d.join("labels")),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(d.join("labels/manifest.json").is_file());
    }
    let mut names: Vec<_> = fs::read_dir(a.join("labels"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with(".srlb"))
        .collect();
    names.sort();
    assert_eq!(names.len(), 16);
    for n in names {
        assert_eq!(
            fs::read(a.join("labels").join(&n)).unwrap(),
            fs::read(b.join("labels").join(&n)).unwrap()
        );
    }

    let c = tmp.path().join("c");
    assert_eq!(code(&gen(&c, "4")), 0);
    assert_ne!(
        fs::read(a.join("qa.jsonl")).unwrap(),
        fs::read(c.join("qa.jsonl")).unwrap()
    );
}

#[test]
fn train_eval_audit_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, "11")), 0);
    let o = sws(&[
        "labels",
        "--scenes",
        p(&data.join("scenes")),
        "--depth",
        p(&data.join("depth")),
        "--bins",
        "15",
        "--out",
        p(&data.join("labels")),
    ]);
    assert_eq!(code(&o), 0);

    let run = tmp.path().join("run");
    let o = sws(&[
        "train",
        "--model-config",
        "sr",
        "--data",
        p(&data),
        "--epochs",
        "1",
        "--out",
        p(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "metrics.csv",
        "pred_test_iid.jsonl",
        "report_test_iid.json",
        "report_test_ood.json",
        "manifest.json",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let header = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(header.starts_with("epoch,split,vqa_acc,spatial_acc,sr_loss,vqa_loss,total_loss,consistency"));

    let pred = run.join("pred_test_iid.jsonl");
    let gold = data.join("qa.jsonl");
    let report = tmp.path().join("eval.json");
    let o = sws(&[
        "eval",
        "--pred",
        p(&pred),
        "--gold",
        p(&gold),
        "--labels",
        p(&data.join("labels")),
        "--bins",
        "15",
        "--report",
        p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(report.is_file());
    assert!(tmp.path().join("eval.json.manifest.json").is_file());

    let audit = tmp.path().join("audit.json");
    let o = sws(&[
        "audit",
        "--pred",
        p(&pred),
        "--gold",
        p(&gold),
        "--bins",
        "15",
        "--out",
        p(&audit),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&audit).unwrap()).unwrap();
    let rate = v["inconsistency_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));

    let table = tmp.path().join("table.csv");
    let o = sws(&[
        "report",
        "--inputs",
        p(&report),
        p(&run.join("report_test_ood.json")),
        "--format",
        "csv",
        "--out",
        p(&table),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&table).unwrap();
    assert!(csv.starts_with("split,method,"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(
        code(&sws(&[
            "report",
            "--inputs",
            p(&report),
            "--format",
            "xml",
            "--out",
            p(&table)
        ])),
        1
    );
}
