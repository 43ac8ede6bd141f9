use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn weaklabel(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weaklabel"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn weaklabel")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = weaklabel(&["generate", "--n", "854", "--seed", "7", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a/corpus.jsonl")).unwrap();
    let b = fs::read(dir.path().join("b/corpus.jsonl")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 854);
}

#[test]
fn delong_rejects_single_class_labels() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.csv"), "label,score_a,score_b\n1,0.9,0.8\n1,0.4,0.5\n1,0.7,0.1\n").unwrap();
    let o = weaklabel(&["delong", "--scores", "s.csv", "--out", "."], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("needs both classes present"), "{}", stderr(&o));
    assert!(!dir.path().join("delong.json").exists());
}

#[test]
fn delong_on_valid_scores() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("s.csv"),
        "label,score_a,score_b\n1,0.9,0.85\n1,0.8,0.6\n1,0.55,0.45\n1,0.4,0.35\n0,0.7,0.5\n0,0.55,0.6\n0,0.3,0.65\n0,0.1,0.2\n",
    )
    .unwrap();
    let o = weaklabel(&["delong", "--scores", "s.csv", "--out", "."], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("delong.json")).unwrap()).unwrap();
    assert!((v["p_two_sided"].as_f64().unwrap() - 0.20590321073206833).abs() < 1e-10);
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = weaklabel(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn bad_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.conf"), "no.such.key = 1\n").unwrap();
    let o = weaklabel(&["--config", "c.conf", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no.such.key"), "{}", stderr(&o));
}

#[test]
fn stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let ok = |args: &[&str]| {
        let o = weaklabel(args, dir.path());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    ok(&["generate", "--n", "1200", "--seed", "3"]);
    ok(&["split", "--corpus", "corpus.jsonl"]);
    ok(&["preprocess", "--corpus", "corpus.jsonl"]);
    ok(&["rules", "apply", "--corpus", "corpus.jsonl", "--plan", "split_plan.json"]);
    ok(&["train-labeler", "--corpus", "rule_labeled.jsonl", "--plan", "split_plan.json"]);
    ok(&["pseudo-label", "--corpus", "rule_labeled.jsonl", "--plan", "split_plan.json", "--model", "labeler_model.json"]);
    ok(&["train-image", "--corpus", "pseudo_labeled.jsonl", "--plan", "split_plan.json", "--seed", "0"]);
    for f in ["tokens.jsonl", "rule_decisions.jsonl", "labeler_log.json", "image_baseline_seed0.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn run_smoke() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("small.conf"),
        "generator.n_records = 1500\ncorpus.seed = 3\ntext.max_epochs = 40\nimage.max_epochs = 30\nseeds = 0, 1\nout = results\n",
    )
    .unwrap();
    let o = weaklabel(&["--config", "small.conf", "run"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("results");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"].as_array().unwrap().len(), 2);
    for label in ["normal", "abnormal", "arthroplasty"] {
        assert!(out.join(format!("roc/augmented_{label}.csv")).exists());
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("WAUC"));
}
