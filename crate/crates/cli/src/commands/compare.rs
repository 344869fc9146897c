use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dprune::analysis::{compare, ComparisonPoint, InstabilityReport};
use dprune::data::compression_ratio;
use dprune::io::read_json;
use dprune::prune::PruneRunRecord;
use serde::Serialize;

use super::{csv_line, execute};
use crate::error::{CliError, Context, Result};
use crate::manifest::{completed_run, file_digest, ledger_bytes, RunDir, RunManifest, Status};

struct Analyzed {
    manifest: RunManifest,
    record: PruneRunRecord,
    reports: Vec<InstabilityReport>,
}

fn load(dir: &Path) -> Result<Analyzed> {
    let manifest = completed_run(dir, "analyze", "run `dprune analyze --record <prune run>` with the lmc analysis first")?;
    Ok(Analyzed {
        manifest,
        record: read_json(&dir.join("record.json")).context(|| "reading record.json".into())?,
        reports: read_json(&dir.join("reports.json")).context(|| "reading reports.json".into())?,
    })
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

pub fn comparison_csv(points: &[ComparisonPoint]) -> String {
    let mut s = csv_line(
        &[
            "sparsity",
            "compression_ratio",
            "performance_ratio",
            "stability_ratio",
            "syn_accuracy",
            "imp_accuracy",
            "syn_barrier",
            "imp_barrier",
            "degenerate",
        ]
        .map(String::from),
    );
    for p in points {
        s.push_str(&csv_line(&[
            p.sparsity.to_string(),
            p.compression.map_or(String::new(), |c| c.ratio().to_string()),
            p.performance_ratio.to_string(),
            p.stability_ratio.to_string(),
            p.syn_accuracy.to_string(),
            p.imp_accuracy.to_string(),
            p.syn_barrier.to_string(),
            p.imp_barrier.to_string(),
            p.degenerate.to_string(),
        ]));
    }
    s
}

#[derive(Serialize)]
struct LedgerRow<'a> {
    kind: &'static str,
    #[serde(flatten)]
    point: &'a ComparisonPoint,
}

pub fn run(syn_dir: &Path, imp_dir: &Path, out_dir: &Path) -> Result<PathBuf> {
    let syn = load(syn_dir)?;
    let imp = load(imp_dir)?;
    let sparsities = |a: &Analyzed| {
        let mut v: Vec<f64> = a.reports.iter().map(|r| r.sparsity).collect();
        v.sort_by(f64::total_cmp);
        v.dedup_by(|x, y| same(*x, *y));
        v
    };
    let (ss, is) = (sparsities(&syn), sparsities(&imp));
    let shared: Vec<f64> = ss.iter().copied().filter(|s| is.iter().any(|t| same(*s, *t))).collect();
    if shared.is_empty() {
        return Err(CliError::missing(
            syn_dir,
            format!("no shared analyzed sparsity checkpoints; synthetic has {ss:?}, IMP has {is:?}"),
        ));
    }

    // Compression of the synthetic run's inner-loop set against the real set.
    let compression = match syn.record.syn_train_size {
        Some(n) if n > 0 => {
            let ipc = syn.manifest.config.distill.ipc;
            let classes = n / ipc;
            Some(compression_ratio(syn.record.real_train_size / classes.max(1), ipc).context(|| "compression".into())?)
        }
        _ => None,
    };

    let mut inputs = BTreeMap::new();
    for (name, dir) in [("syn", syn_dir), ("imp", imp_dir)] {
        inputs.insert(format!("{name}_reports"), file_digest(&dir.join("reports.json"))?);
        inputs.insert(format!("{name}_record"), file_digest(&dir.join("record.json"))?);
    }
    let opened = RunDir::open(out_dir, "compare", &syn.manifest.config, inputs, false)?;
    execute(opened, |dir, _| {
        dir.manifest.sources.insert("syn".into(), syn_dir.display().to_string());
        dir.manifest.sources.insert("imp".into(), imp_dir.display().to_string());
        let points = shared
            .iter()
            .map(|&s| {
                compare(&syn.record, &imp.record, &syn.reports, &imp.reports, s, compression)
                    .context(|| format!("comparing at sparsity {s}"))
            })
            .collect::<Result<Vec<_>>>()?;
        for p in &points {
            eprintln!(
                "sparsity {:.4}: performance {:.4} stability {:.4}{}",
                p.sparsity,
                p.performance_ratio,
                p.stability_ratio,
                if p.degenerate { " (degenerate)" } else { "" }
            );
        }
        dir.write("comparison.csv", comparison_csv(&points).as_bytes())?;
        let rows: Vec<LedgerRow> = points.iter().map(|point| LedgerRow { kind: "comparison", point }).collect();
        dir.write("ledger.jsonl", &ledger_bytes(&rows))?;
        Ok(Status::Complete)
    })
}
