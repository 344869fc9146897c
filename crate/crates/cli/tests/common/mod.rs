//! Helpers for driving the `dprune` binary against a scratch directory.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

pub const BIN: &str = env!("CARGO_BIN_EXE_dprune");

/// A three-class blobs task small enough for every command to finish in
/// well under a second per pruning iteration.
pub const TINY: &str = r#"
[task]
kind = "blobs"
classes = 3
per_class = 60
dim = 8
spread = 1.0
seed = 7
test_per_class = 20

[arch]
kind = "mlp"
hidden = [32]

[seeds]
init = 0
order = [1, 2]
distill = 3

[train]
lr = 0.1
momentum = 0.9
epochs = 4
batch_size = 32
early_stop = { min_delta = 1e-4, patience = 3 }

[syn_train]
lr = 0.1
momentum = 0.9
epochs = 30
batch_size = 30

[teacher]
count = 2
epochs = 3
snapshot_interval = 2

[distill]
ipc = 4
outer_steps = 10
inner_unroll = 3
syn_lr = 1.0
syn_momentum = 0.5
match_horizon = 1
init_mode = "random-real"
students = 2

[prune]
method = "imp"
fraction = 0.2
iterations = 3
rewind_epoch = 0
scope = "global"
syn_iters = 2

[analysis]
alpha_steps = 5
grid_n = 4
margin = 0.25
estimator = "hutchinson"
probes = 10
batch_size = 60
checkpoints = [1, 3]
"#;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    /// The run directory printed on the last stdout line.
    pub fn dir(&self) -> PathBuf {
        assert_eq!(self.code, 0, "command failed: {}", self.stderr);
        PathBuf::from(self.stdout.lines().last().expect("run directory on stdout").trim())
    }
}

impl From<Output> for Run {
    fn from(o: Output) -> Self {
        Run {
            code: o.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        }
    }
}

pub struct Sandbox {
    pub root: TempDir,
}

impl Sandbox {
    pub fn new() -> Self {
        Sandbox {
            root: tempfile::tempdir().expect("tempdir"),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    /// Writes `TINY` with `edits` applied as `("section.key", toml value)`.
    pub fn config(&self, name: &str, edits: &[(&str, &str)]) -> PathBuf {
        let mut doc: toml::Table = TINY.parse().expect("tiny config parses");
        for (key, value) in edits {
            let (section, field) = key.split_once('.').expect("section.key");
            let v: toml::Table = format!("v = {value}").parse().expect("edit value parses");
            doc[section].as_table_mut().expect("section table").insert(field.to_string(), v["v"].clone());
        }
        let path = self.path(name);
        std::fs::write(&path, toml::to_string(&doc).unwrap()).unwrap();
        path
    }

    pub fn run(&self, args: &[&str]) -> Run {
        Command::new(BIN).args(args).output().expect("spawn dprune").into()
    }
}

/// Every file under `dir` except the manifest, as relative path and bytes.
pub fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}
