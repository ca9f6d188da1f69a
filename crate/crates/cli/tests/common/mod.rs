#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use homad::config::{RunConfig, SNAPSHOT_FILE};

pub fn homad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

pub fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.dataset.toy.size = 32;
    cfg.dataset.toy.train_good = 8;
    cfg.dataset.toy.test_good = 3;
    cfg.dataset.toy.test_defect = 3;
    cfg.shl.iterations = 20;
    cfg.shl.checkpoint_every = 10;
    cfg.shl.batch_size = 2;
    cfg.aligner.iterations = 10;
    cfg.aligner.batch_size = 2;
    cfg.heatmaps = 1;
    let p = dir.join("base.toml");
    fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

pub fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            walk(root, &p, out);
        } else {
            out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
}

/// Every file under `dir`, with the snapshot dropped and run timings
/// blanked (they are the only non-reproducible output).
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut m = BTreeMap::new();
    walk(dir, dir, &mut m);
    m.remove(SNAPSHOT_FILE);
    if let Some(bytes) = m.get_mut("results.json") {
        let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
        for r in v.as_array_mut().unwrap() {
            r["wall_clock_s"] = 0.into();
        }
        *bytes = serde_json::to_vec(&v).unwrap();
    }
    m
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn rerun_from_snapshot(cmd: &str, out: &Path, extra: &[&str]) -> PathBuf {
    let again = out.with_extension("rerun");
    let snap = out.join(SNAPSHOT_FILE);
    let mut args = vec![cmd, "--config", s(&snap), "--out", s(&again)];
    args.extend_from_slice(extra);
    let o = homad(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    again
}

pub fn toy(dir: &Path, name: &str) -> PathBuf {
    let cfg = small_config(dir);
    let out = dir.join(name);
    let o = homad(&["synthesize", "--toy", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}
