#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tractfov::synth::default_spec;

pub fn tractfov(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tractfov")).current_dir(cwd).args(args).output().expect("spawn tractfov")
}

/// Runs a command that must succeed.
pub fn ok(cwd: &Path, args: &[&str]) -> Output {
    let out = tractfov(cwd, args);
    assert!(
        out.status.success(),
        "tractfov {args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// The default cohort with every bundle scaled down to a tenth.
pub fn write_small_spec(dir: &Path, seed: u64) -> PathBuf {
    let mut spec = default_spec(seed);
    for b in &mut spec.bundles {
        b.streamlines = (b.streamlines / 10).max(8);
    }
    let p = dir.join("spec.json");
    fs::write(&p, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();
    p
}

/// Small model flags for fast training.
pub const SMALL_MODEL: &[&str] =
    &["--epochs", "2", "--k-local", "4", "--k-global", "6", "--repr-dim", "8", "--head-widths", "16", "--batch-size", "64"];

/// SHA-256 of every file under `dir`, keyed by relative path.
pub fn digest_tree(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                let hash = Sha256::digest(fs::read(&p).unwrap());
                out.insert(rel, hash.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// gen → augment → train → classify → eval inside `root`, with relative paths
/// so that artifacts do not mention `root`.
pub fn pipeline(root: &Path, seed: u64, jobs: Option<usize>) {
    fs::create_dir_all(root).unwrap();
    let spec = write_small_spec(root, seed);
    let seed = seed.to_string();
    let jobs_s = jobs.map(|j| j.to_string());
    let run = |args: &[&str]| {
        let mut all: Vec<&str> = vec!["--seed", &seed];
        if let Some(j) = &jobs_s {
            all.extend(["--jobs", j]);
        }
        all.extend(args);
        ok(root, &all);
    };
    run(&["gen", "--spec", spec.file_name().unwrap().to_str().unwrap(), "--out", "cohort"]);
    run(&["augment", "--input", "cohort/train", "--out", "aug", "--planes", "2"]);
    let mut train = vec!["train", "--train", "aug", "--val", "cohort/val", "--out", "model"];
    train.extend(SMALL_MODEL);
    run(&train);
    run(&["classify", "--model", "model/model.json", "--input", "cohort/test", "--out", "pred"]);
    run(&["eval", "--pred", "pred", "--truth", "cohort/test", "--atlas", "cohort/atlas.jsonl", "--out", "eval"]);
}
