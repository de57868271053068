use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf")
}

fn claimrisk(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_claimrisk"))
        .arg("--config")
        .arg(config())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = claimrisk(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_pipeline(out: &Path) {
    for stage in ["synth", "prep", "pretrain", "finetune", "eval"] {
        ok(out, &[stage]);
    }
}

#[test]
fn pipeline_writes_eval_result_and_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path());
    run_pipeline(b.path());
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("eval/eval_result.json")).unwrap()).unwrap();
    let auc = result["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    for file in [
        "synth/claims_INP_v2011.csv",
        "prep/samples_train.csv",
        "prep/vocab.tsv",
        "pretrain/encoder.ckpt",
        "finetune/encoder.ckpt",
        "finetune/history.tsv",
        "eval/eval_result.json",
    ] {
        assert_eq!(std::fs::read(a.path().join(file)).unwrap(), std::fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("eval/manifest.json")).unwrap()).unwrap();
    assert!(manifest["inputs"]["finetune/encoder.ckpt"].is_string());
    assert!(manifest["outputs"]["eval/eval_result.json"].is_string());

    let samples = std::fs::read_to_string(a.path().join("prep/samples_test.csv")).unwrap();
    let mut lines = samples.lines();
    let col = lines.next().unwrap().split(',').position(|h| h == "beneficiary_id").unwrap();
    let id = lines.next().unwrap().split(',').nth(col).unwrap().to_string();
    ok(a.path(), &["explain", "--beneficiary", &id]);
    let html = std::fs::read_to_string(a.path().join(format!("explain/attention_{id}.html"))).unwrap();
    assert!(html.contains("attention-data"));
    let o = claimrisk(a.path(), &["explain", "--beneficiary", "NOBODY"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("NOBODY"));

    ok(a.path(), &["drift"]);
    ok(a.path(), &["audit"]);
    let audit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("audit/audit.json")).unwrap()).unwrap();
    assert!(!audit["deltas"].as_array().unwrap().is_empty());
    assert!(!audit["full"]["top3_frequency"].as_array().unwrap().is_empty());

    // tampering with an upstream checkpoint is caught downstream
    let ckpt = a.path().join("finetune/encoder.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    std::fs::write(&ckpt, bytes).unwrap();
    let o = claimrisk(a.path(), &["eval"]);
    assert!(!o.status.success());
    let msg = stderr(&o);
    assert!(msg.contains("hash mismatch") && msg.contains("encoder.ckpt"), "{msg}");
}

#[test]
fn eval_before_finetune_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth"]);
    ok(dir.path(), &["prep"]);
    let o = claimrisk(dir.path(), &["eval"]);
    assert!(!o.status.success());
    let msg = stderr(&o);
    assert!(msg.contains("missing artifact") && msg.contains("finetune"), "{msg}");
}

#[test]
fn prep_without_cohort_names_the_missing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = claimrisk(dir.path(), &["prep"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("manifest.json"));
}

#[test]
fn unknown_subcommand_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = claimrisk(dir.path(), &["train-everything"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("train-everything"));
}

#[test]
fn scale_reports_every_size() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth"]);
    ok(dir.path(), &["prep"]);
    ok(dir.path(), &["scale"]);
    let tsv = std::fs::read_to_string(dir.path().join("scale/scaling.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
    let o = claimrisk(dir.path(), &["scale", "--sizes", "900,400"]);
    assert!(!o.status.success());
}
