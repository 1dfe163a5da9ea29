#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

pub fn atv() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_atv-prune"));
    c.env_remove("ATV_THREADS");
    c
}

pub fn run(args: &[&str]) -> Output {
    atv().args(args).output().expect("spawn atv-prune")
}

pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "atv-prune {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A small generated model and calibration file.
pub struct Fixture {
    pub dir: TempDir,
    pub calib: PathBuf,
    pub model: PathBuf,
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub fn fixture(extra: &[&str]) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let calib = dir.path().join("calib.jsonl");
    let model = dir.path().join("calib.atvc");
    let mut flags = vec![
        ("--seed", "3"),
        ("--samples", "10"),
        ("--d-model", "16"),
        ("--n-visual", "12"),
        ("--n-text", "6"),
        ("--n-blocks", "2"),
        ("--n-heads", "2"),
    ];
    for pair in extra.chunks(2) {
        match flags.iter_mut().find(|(k, _)| *k == pair[0]) {
            Some(f) => f.1 = pair[1],
            None => flags.push((pair[0], pair[1])),
        }
    }
    let mut args = vec!["gen-synth", "--out", s(&calib)];
    args.extend(flags.iter().flat_map(|&(k, v)| [k, v]));
    ok(&args);
    Fixture { dir, calib, model }
}

pub fn sha256(path: &Path) -> Vec<u8> {
    use sha2::{Digest, Sha256};
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}
