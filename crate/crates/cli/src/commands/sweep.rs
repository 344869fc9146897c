use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Serialize;

use super::analyze::Analysis;
use super::execute;
use crate::error::{CliError, Result};
use crate::manifest::{read_manifest, RunDir, Status};
use crate::{Common, PruneFlags};

#[derive(Serialize)]
struct SeedRuns {
    seed: u64,
    prune: String,
    analyze: Option<String>,
}

#[derive(Serialize)]
struct MergedRow {
    seed: u64,
    run_id: String,
    row: serde_json::Value,
}

/// Runs the binary with `args` and returns the run directory it printed.
fn child(seed: u64, args: &[String]) -> Result<PathBuf> {
    let exe = std::env::current_exe().map_err(|e| CliError::missing("dprune executable", e.to_string()))?;
    let out = Command::new(exe)
        .args(args)
        .stderr(std::process::Stdio::inherit())
        .output()
        .map_err(|e| CliError::missing("dprune executable", e.to_string()))?;
    if !out.status.success() {
        return Err(CliError::Child {
            seed,
            code: out.status.code().unwrap_or(1),
        });
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let last = stdout.lines().last().unwrap_or_default().trim();
    Ok(PathBuf::from(last))
}

fn prune_args(common: &Common, flags: &PruneFlags, seed: u64) -> Vec<String> {
    let mut a = vec![
        "prune".to_string(),
        "--config".into(),
        common.config.display().to_string(),
        "--out-dir".into(),
        common.out_dir.display().to_string(),
        "--init-seed".into(),
        seed.to_string(),
    ];
    if let Some(m) = flags.method {
        a.push("--method".into());
        a.push(format!("{m:?}").to_lowercase());
    }
    for (flag, v) in [
        ("--rewind-epoch", flags.rewind_epoch.map(|v| v.to_string())),
        ("--iterations", flags.iterations.map(|v| v.to_string())),
        ("--syn-iters", flags.syn_iters.map(|v| v.to_string())),
        ("--syn", flags.syn.as_ref().map(|p| p.display().to_string())),
    ] {
        if let Some(v) = v {
            a.push(flag.into());
            a.push(v);
        }
    }
    a
}

fn ledger_rows(dir: &Path, seed: u64) -> Result<Vec<MergedRow>> {
    let run_id = read_manifest(dir)?.run_id;
    let path = dir.join("ledger.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::missing(&path, e.to_string()))?;
    text.lines()
        .map(|l| {
            let row = serde_json::from_str(l).map_err(|e| CliError::Parse {
                path: path.clone(),
                detail: e.to_string(),
            })?;
            Ok(MergedRow {
                seed,
                run_id: run_id.clone(),
                row,
            })
        })
        .collect()
}

pub fn run(common: &Common, flags: &PruneFlags, seeds: &[u64], analyses: Option<&[Analysis]>) -> Result<PathBuf> {
    let cfg = super::load_config(common, flags)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("seeds".to_string(), format!("{seeds:?}"));
    if let Some(a) = analyses {
        inputs.insert("analyses".to_string(), format!("{a:?}"));
    }
    if let Some(s) = &flags.syn {
        let c = super::synthetic_container(s)?;
        inputs.insert("synthetic".to_string(), super::container_digest(&c)?);
    }
    let mut hashed = cfg.clone();
    hashed.prune.synthetic = None;
    let opened = RunDir::open(&common.out_dir, "sweep", &hashed, inputs, false)?;
    execute(opened, |dir, _| {
        // One process chain per seed, all launched before any is awaited.
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let args = prune_args(common, flags, seed);
                let analyze_args = analyses.map(|a| {
                    vec![
                        "analyze".to_string(),
                        "--out-dir".into(),
                        common.out_dir.display().to_string(),
                        "--analyses".into(),
                        a.iter().map(|x| format!("{x:?}").to_lowercase()).collect::<Vec<_>>().join(","),
                    ]
                });
                std::thread::spawn(move || -> Result<SeedRuns> {
                    let prune = child(seed, &args)?;
                    let analyze = match analyze_args {
                        Some(mut a) => {
                            a.push("--record".into());
                            a.push(prune.display().to_string());
                            Some(child(seed, &a)?)
                        }
                        None => None,
                    };
                    Ok(SeedRuns {
                        seed,
                        prune: prune.display().to_string(),
                        analyze: analyze.map(|p| p.display().to_string()),
                    })
                })
            })
            .collect();
        let mut runs = Vec::new();
        for h in handles {
            runs.push(h.join().expect("sweep worker thread")?);
        }
        let mut merged = Vec::new();
        for r in &runs {
            merged.extend(ledger_rows(Path::new(&r.prune), r.seed)?);
            if let Some(a) = &r.analyze {
                merged.extend(ledger_rows(Path::new(a), r.seed)?);
            }
        }
        dir.write_json("runs.json", &runs)?;
        dir.write("ledger.jsonl", &crate::manifest::ledger_bytes(&merged))?;
        Ok(Status::Complete)
    })
}
