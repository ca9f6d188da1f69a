mod common;

use std::fs;
use std::path::Path;

use common::{code, homad, rerun_from_snapshot, s, small_config, toy, tree};
use homad::config::{RunConfig, SNAPSHOT_FILE};
use homad::dataset::{DatasetManifest, MANIFEST_FILE};

#[test]
fn synthesize_toy_is_valid_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = toy(dir.path(), "a");
    let b = toy(dir.path(), "b");
    let ds = a.join("dataset");
    let m = DatasetManifest::load(&ds.join(MANIFEST_FILE)).unwrap();
    m.validate().unwrap();
    m.validate_files(&ds).unwrap();
    assert_eq!(m.images.len(), 2 * (8 + 3 + 3));
    assert_eq!(tree(&a), tree(&b));
    let again = rerun_from_snapshot("synthesize", &a, &[]);
    assert_eq!(tree(&a), tree(&again));
}

#[test]
fn misaligned_variant_keeps_counts_and_source() {
    let dir = tempfile::tempdir().unwrap();
    let src = toy(dir.path(), "src").join("dataset");
    let before = tree(&src);
    let out = dir.path().join("mis");
    let o = homad(&["synthesize", "--source", s(&src), "--variant", "misaligned", "--out", s(&out), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sm = DatasetManifest::load(&src.join(MANIFEST_FILE)).unwrap();
    let mm = DatasetManifest::load(&out.join("dataset").join(MANIFEST_FILE)).unwrap();
    assert_eq!(sm.images.len(), mm.images.len());
    for (a, b) in sm.images.iter().zip(&mm.images) {
        assert_eq!((&a.class, &a.path, a.split, &a.label), (&b.class, &b.path, b.split, &b.label));
    }
    assert_eq!(tree(&src), before, "source untouched");
    let again = rerun_from_snapshot("synthesize", &out, &[]);
    assert_eq!(tree(&out), tree(&again));
}

#[test]
fn validation_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let src = toy(dir.path(), "src").join("dataset");
    let out = dir.path().join("x");
    for args in [
        vec!["evaluate", "--study", "table9", "--out", s(&out)],
        vec!["evaluate", "--scorer", "knn", "--out", s(&out)],
        vec!["synthesize", "--variant", "misaligned", "--out", s(&out)],
        vec!["synthesize", "--source", s(&src), "--out", s(&src)],
        vec!["align", "--out", s(&out)],
        vec!["align", "--source", s(&src), "--template-index", "99", "--out", s(&out)],
        vec!["align", "--source", s(&src), "--checkpoint", "/nonexistent/aligners", "--out", s(&out)],
        vec!["finetune", "--config", "/nonexistent.toml"],
        vec!["finetune", "--bogus-flag"],
    ] {
        let o = homad(&args);
        assert_eq!(code(&o), 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(!out.join("aligners").exists(), "nothing trained before validation");
}

#[test]
fn align_trains_applies_and_reapplies() {
    let dir = tempfile::tempdir().unwrap();
    let src = toy(dir.path(), "src").join("dataset");
    let cfg = small_config(dir.path());
    let out = dir.path().join("al");
    let o = homad(&["align", "--config", s(&cfg), "--source", s(&src), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = DatasetManifest::load(&out.join("dataset").join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.classes.len(), 1, "object classes only");
    assert_eq!(m.images.len(), 8 + 3 + 3);
    assert!(out.join("aligners").join("widget.json").is_file());

    let apply = dir.path().join("apply");
    let ck = out.join("aligners");
    let o = homad(&["align", "--config", s(&cfg), "--source", s(&src), "--checkpoint", s(&ck), "--out", s(&apply)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut trained = tree(&out.join("dataset"));
    trained.retain(|k, _| !k.starts_with("aligners"));
    assert_eq!(trained, tree(&apply.join("dataset")));

    let again = rerun_from_snapshot("align", &out, &[]);
    assert_eq!(tree(&out), tree(&again));
}

#[test]
fn finetune_selects_resumes_and_switches_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let full = dir.path().join("full");
    let o = homad(&["finetune", "--config", s(&cfg), "--class", "widget", "--out", s(&full)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cls = full.join("seed_0").join("widget");
    let sel: serde_json::Value = serde_json::from_slice(&fs::read(cls.join("selection.json")).unwrap()).unwrap();
    assert_eq!(sel["iterations"], serde_json::json!([10, 20]));
    assert_eq!(sel["protocol"], "validation");
    assert!(cls.join("selected.bin").is_file());

    // Interrupted after the first checkpoint, then resumed.
    let part = dir.path().join("part");
    let o = homad(&["finetune", "--config", s(&cfg), "--class", "widget", "--iterations", "10", "--out", s(&part)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = homad(&["finetune", "--config", s(&cfg), "--class", "widget", "--resume", "--out", s(&part)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpts = |root: &Path| tree(&root.join("seed_0").join("widget").join("checkpoints"));
    assert_eq!(ckpts(&part), ckpts(&full));
    assert_eq!(tree(&part), tree(&full));

    let ts = dir.path().join("test_set");
    let o = homad(&["finetune", "--config", s(&cfg), "--class", "widget", "--test-set-selection", "--out", s(&ts)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sel: serde_json::Value = serde_json::from_slice(
        &fs::read(ts.join("seed_0").join("widget").join("selection.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(sel["protocol"], "test_set");
    let snap = RunConfig::load(&ts.join(SNAPSHOT_FILE)).unwrap();
    assert_eq!(snap.selection.protocol, homad::config::SelectionProtocol::TestSet);
    let alias = dir.path().join("alias");
    let o = homad(&["finetune", "--config", s(&cfg), "--class", "widget", "--paper-protocol", "--out", s(&alias)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(tree(&alias), tree(&ts));

    let again = rerun_from_snapshot("finetune", &full, &[]);
    assert_eq!(tree(&full), tree(&again));
}

#[test]
fn evaluate_emits_artifacts_and_flags_failed_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("ev");
    let o = homad(&["evaluate", "--config", s(&cfg), "--scorer", "padim", "--scorer", "spade", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("results.json").is_file() && out.join("results.md").is_file());
    assert_eq!(fs::read_dir(out.join("heatmaps")).unwrap().count(), 4);
    let again = rerun_from_snapshot("evaluate", &out, &[]);
    assert_eq!(tree(&out), tree(&again));

    let bb = dir.path().join("bb");
    let o = homad(&["evaluate", "--config", s(&cfg), "--study", "backbone", "--scorer", "mahad", "--class", "widget", "--out", s(&bb)]);
    assert_eq!(code(&o), 2);
    let snap = RunConfig::load(&bb.join(SNAPSHOT_FILE)).unwrap();
    assert_eq!(snap.study, homad::eval::Study::Backbone, "snapshot records the study");
    let text = fs::read_to_string(bb.join("results.md")).unwrap();
    assert!(text.contains("failed"));
}
