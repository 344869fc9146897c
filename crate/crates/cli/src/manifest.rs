//! Run directories and their manifests.
//!
//! A run lives in `<out>/<subcommand>-<run id>/`. The run id is a hash of the
//! canonical JSON of everything that determines the outputs, so an identical
//! invocation maps to the same directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dprune::io::{read_json, write_atomic, write_json};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, SeedConfig};
use crate::error::{CliError, Context, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Running,
    Interrupted,
    Complete,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub subcommand: String,
    pub config: ExperimentConfig,
    pub seeds: SeedConfig,
    /// Digests of input artifacts and command-line settings folded into the id.
    pub inputs: BTreeMap<String, String>,
    /// Paths of input artifacts; informational, not part of the id.
    #[serde(default)]
    pub sources: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
    /// Produced files, relative to the run directory.
    pub artifacts: Vec<String>,
    pub status: Status,
    pub error: Option<String>,
    /// Summed over all invocations that worked on this run.
    pub wall_clock_secs: f64,
}

/// Hex sha256 of `value` serialized as JSON with sorted object keys.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    // serde_json::Value keeps object keys sorted.
    let v = serde_json::to_value(value).expect("config serializes");
    let mut h = Sha256::new();
    h.update(v.to_string().as_bytes());
    hex::encode(h.finalize())
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::missing(path, e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn run_id(subcommand: &str, config: &ExperimentConfig, inputs: &BTreeMap<String, String>) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        subcommand: &'a str,
        config: &'a ExperimentConfig,
        inputs: &'a BTreeMap<String, String>,
    }
    canonical_hash(&Key {
        subcommand,
        config,
        inputs,
    })[..16]
        .to_string()
}

pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
    started: Instant,
}

pub enum Opened {
    /// A complete run with every artifact present; nothing to do.
    Done(PathBuf),
    Fresh(RunDir),
    /// An interrupted or failed run whose directory was kept for resuming.
    Resumable(RunDir),
}

impl RunDir {
    pub fn open(
        out_dir: &Path,
        subcommand: &str,
        config: &ExperimentConfig,
        inputs: BTreeMap<String, String>,
        resume: bool,
    ) -> Result<Opened> {
        let id = run_id(subcommand, config, &inputs);
        let path = out_dir.join(format!("{subcommand}-{id}"));
        let manifest_path = path.join(MANIFEST);
        let previous: Option<RunManifest> = if manifest_path.exists() {
            Some(read_json(&manifest_path).context(|| "reading existing manifest".into())?)
        } else {
            None
        };
        if let Some(prev) = &previous {
            if prev.status == Status::Complete && prev.artifacts.iter().all(|a| path.join(a).exists()) {
                return Ok(Opened::Done(path));
            }
        }
        let keep = resume && previous.is_some();
        if !keep && path.exists() {
            std::fs::remove_dir_all(&path).map_err(|e| CliError::missing(&path, e.to_string()))?;
        }
        std::fs::create_dir_all(&path).map_err(|e| CliError::missing(&path, e.to_string()))?;
        let mut versions = BTreeMap::new();
        versions.insert("dprune".to_string(), env!("CARGO_PKG_VERSION").to_string());
        let manifest = RunManifest {
            run_id: id,
            subcommand: subcommand.to_string(),
            config: config.clone(),
            seeds: config.seeds.clone(),
            inputs,
            sources: BTreeMap::new(),
            versions,
            artifacts: vec![],
            status: Status::Running,
            error: None,
            wall_clock_secs: previous.filter(|_| keep).map_or(0.0, |p| p.wall_clock_secs),
        };
        let dir = RunDir {
            path,
            manifest,
            started: Instant::now(),
        };
        dir.save_manifest()?;
        Ok(if keep { Opened::Resumable(dir) } else { Opened::Fresh(dir) })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes an artifact atomically and lists it in the manifest.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.file(name), bytes).context(|| format!("writing {name}"))?;
        self.record(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        write_json(&self.file(name), value).context(|| format!("writing {name}"))?;
        self.record(name);
        Ok(())
    }

    /// Lists an artifact written by other means.
    pub fn record(&mut self, name: &str) {
        if !self.manifest.artifacts.iter().any(|a| a == name) {
            self.manifest.artifacts.push(name.to_string());
        }
    }

    fn save_manifest(&self) -> Result<()> {
        write_json(&self.file(MANIFEST), &self.manifest).context(|| "writing manifest".into())
    }

    pub fn finish(mut self, status: Status, error: Option<String>) -> Result<PathBuf> {
        self.manifest.status = status;
        self.manifest.error = error;
        self.manifest.wall_clock_secs += self.started.elapsed().as_secs_f64();
        self.save_manifest()?;
        Ok(self.path)
    }
}

pub fn read_manifest(run: &Path) -> Result<RunManifest> {
    let p = run.join(MANIFEST);
    if !p.exists() {
        return Err(CliError::missing(&p, "not a run directory"));
    }
    read_json(&p).context(|| format!("reading {}", p.display()))
}

/// Loads a run directory produced by `subcommand`, requiring it to be complete.
pub fn completed_run(run: &Path, subcommand: &str, hint: &str) -> Result<RunManifest> {
    let m = read_manifest(run).map_err(|_| CliError::missing(run.join(MANIFEST), hint.to_string()))?;
    if m.subcommand != subcommand {
        return Err(CliError::missing(
            run,
            format!("expected a {subcommand} run, found a {} run; {hint}", m.subcommand),
        ));
    }
    if m.status != Status::Complete {
        return Err(CliError::missing(run, format!("run is not complete; {hint}")));
    }
    Ok(m)
}

/// JSON-lines ledger. Ledgers are written whole at the end of a run, so a
/// resumed run produces the same bytes as an uninterrupted one.
pub fn ledger_bytes<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        out.extend(serde_json::to_vec(r).expect("ledger row serializes"));
        out.push(b'\n');
    }
    out
}
