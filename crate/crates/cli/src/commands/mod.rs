pub mod analyze;
pub mod compare;
pub mod distill;
pub mod prune;
pub mod sweep;

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::manifest::{Opened, RunDir, Status};
use crate::{Common, PruneFlags};

/// Loads the config and applies command-line overrides, then validates again.
pub fn load_config(common: &Common, flags: &PruneFlags) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    let p = &mut cfg.prune;
    if let Some(m) = flags.method {
        p.method = m;
    }
    if let Some(k) = flags.rewind_epoch {
        p.rewind_epoch = k;
    }
    if let Some(n) = flags.iterations {
        p.iterations = n;
    }
    if let Some(n) = flags.syn_iters {
        p.syn_iters = n;
    }
    if let Some(s) = &flags.syn {
        p.synthetic = Some(s.clone());
    }
    if let Some(s) = flags.init_seed {
        cfg.seeds.init = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs `body` in an opened run directory and records the outcome in its
/// manifest.
pub fn execute<F>(opened: Opened, body: F) -> Result<PathBuf>
where
    F: FnOnce(&mut RunDir, bool) -> Result<Status>,
{
    let (mut dir, resuming) = match opened {
        Opened::Done(path) => {
            eprintln!("run already complete: {}", path.display());
            return Ok(path);
        }
        Opened::Fresh(d) => (d, false),
        Opened::Resumable(d) => (d, true),
    };
    match body(&mut dir, resuming) {
        Ok(status) => dir.finish(status, None),
        Err(e) => {
            let msg = e.to_string();
            dir.finish(Status::Failed, Some(msg))?;
            Err(e)
        }
    }
}

/// A distill run directory holds its container under `synthetic/`.
pub fn synthetic_container(path: &Path) -> Result<PathBuf> {
    let nested = path.join("synthetic");
    let dir = if nested.join("manifest.json").exists() { nested } else { path.to_path_buf() };
    if !dir.join("manifest.json").exists() {
        return Err(CliError::missing(
            path,
            "no synthetic dataset here; run `dprune distill --config <file>` and pass its run directory with --syn",
        ));
    }
    Ok(dir)
}

/// Digest over a dataset container's payload files.
pub fn container_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in ["features.f32", "labels.i64", "manifest.json"] {
        let p = dir.join(name);
        let bytes = std::fs::read(&p).map_err(|e| CliError::missing(&p, e.to_string()))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn csv_line(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}
