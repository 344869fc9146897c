use std::collections::BTreeMap;
use std::path::PathBuf;

use dprune::analysis::{
    hessian_diag, landscape_grid, lmc_study, GridHeader, HessianSummary, InstabilityReport, MethodTag,
};
use dprune::io::read_json;
use dprune::model::ModelState;
use dprune::prune::{Phase, PruneRunRecord};
use dprune::train::train;
use serde::{Deserialize, Serialize};

use super::execute;
use crate::config::{AnalysisSection, ExperimentConfig};
use crate::error::{CliError, Context, Result};
use crate::manifest::{completed_run, file_digest, ledger_bytes, RunDir, Status};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Analysis {
    Lmc,
    Landscape,
    Hessian,
}

pub struct Request {
    pub record: PathBuf,
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub analyses: Vec<Analysis>,
    pub checkpoints: Option<Vec<usize>>,
    pub order_seeds: Option<Vec<u64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HessianRow {
    pub iteration: usize,
    pub sparsity: f64,
    pub method_tag: MethodTag,
    pub summary: HessianSummary,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum LedgerRow<'a> {
    Lmc {
        iteration: usize,
        sparsity: f64,
        method_tag: MethodTag,
        barrier_height: f64,
        endpoint_accs: [f64; 2],
        order_seeds: [u64; 2],
    },
    Landscape {
        iteration: usize,
        #[serde(flatten)]
        header: &'a GridHeader,
    },
    Hessian(&'a HessianRow),
}

fn method_tag(t: usize, phase: Phase) -> MethodTag {
    match (t, phase) {
        (0, _) => MethodTag::Dense,
        (_, Phase::Imp) => MethodTag::Imp,
        (_, Phase::Syn) => MethodTag::Synthetic,
    }
}

pub fn run(req: &Request) -> Result<PathBuf> {
    let hint = "run `dprune prune --config <file>` first and pass its run directory with --record";
    let prune_manifest = completed_run(&req.record, "prune", hint)?;
    let record_path = req.record.join("record.json");
    let record: PruneRunRecord = read_json(&record_path).context(|| "reading record.json".into())?;

    let mut cfg: ExperimentConfig = prune_manifest.config.clone();
    if let Some(path) = &req.config {
        let other = ExperimentConfig::load(path)?;
        cfg.analysis = other.analysis;
    }
    if let Some(c) = &req.checkpoints {
        cfg.analysis.checkpoints = c.clone();
    }
    if let Some(s) = &req.order_seeds {
        let [a, b] = s[..] else {
            return Err(CliError::config("--order-seeds", format!("expected two seeds, got {}", s.len())));
        };
        cfg.seeds.order = [a, b];
    }
    cfg.validate()?;
    let available: Vec<usize> = record.entries.iter().map(|e| e.iteration).collect();
    for &t in &cfg.analysis.checkpoints {
        if t >= record.entries.len() {
            return Err(CliError::missing(
                &record_path,
                format!("checkpoint t={t} not in the record; available iterations {available:?}"),
            ));
        }
    }

    let mut analyses = req.analyses.clone();
    analyses.sort_by_key(|a| *a as u8);
    analyses.dedup();
    let mut inputs = BTreeMap::new();
    inputs.insert("record".to_string(), file_digest(&record_path)?);
    inputs.insert("prune_run".to_string(), prune_manifest.run_id.clone());
    inputs.insert(
        "analyses".to_string(),
        analyses.iter().map(|a| format!("{a:?}").to_lowercase()).collect::<Vec<_>>().join(","),
    );
    let opened = RunDir::open(&req.out_dir, "analyze", &cfg, inputs, false)?;
    execute(opened, |dir, _| {
        dir.manifest.sources.insert("record".into(), req.record.display().to_string());
        let task = cfg.load_task()?;
        let arch = cfg.build_arch(task.train.example_shape(), task.train.class_count)?;
        let init = ModelState::init(&arch, cfg.seeds.init);
        let recipe = cfg.real_recipe();
        let a: &AnalysisSection = &cfg.analysis;
        let seeds = cfg.seeds.order;

        let mut reports: Vec<InstabilityReport> = Vec::new();
        let mut hessians: Vec<HessianRow> = Vec::new();
        let mut headers: Vec<(usize, GridHeader)> = Vec::new();
        let mut lmc_rows = Vec::new();
        for &t in &a.checkpoints {
            let entry = &record.entries[t];
            let tag = method_tag(t, entry.phase);
            let mask = &entry.mask;
            if analyses.contains(&Analysis::Lmc) {
                let r = lmc_study(&init, mask, &task.train, &task.test, &recipe, seeds, a.alpha_steps, tag)
                    .context(|| format!("lmc at t={t}"))?;
                eprintln!("t={t:>2} {tag:?} barrier {:.6}", r.barrier_height);
                dir.write(&format!("lmc-t{t:02}.csv"), r.to_csv().as_bytes())?;
                lmc_rows.push((t, r.sparsity, tag, r.barrier_height, r.endpoint_accs));
                reports.push(r);
            }
            let needs_branches = analyses.contains(&Analysis::Landscape) || analyses.contains(&Analysis::Hessian);
            if !needs_branches {
                continue;
            }
            let branch = |s: u64| {
                train(&init, mask, &task.train, &recipe.with_order_seed(s))
                    .map(|o| o.state)
                    .context(|| format!("training branch (order seed {s}) at t={t}"))
            };
            let first = branch(seeds[0])?;
            if analyses.contains(&Analysis::Landscape) {
                let second = branch(seeds[1])?;
                let g = landscape_grid(&first, &second, &task.train, a.grid_n, a.margin, a.landscape_seed)
                    .context(|| format!("landscape at t={t}"))?;
                dir.write(&format!("landscape-t{t:02}.csv"), g.to_csv().as_bytes())?;
                let header = g.header();
                dir.write_json(&format!("landscape-t{t:02}.json"), &header)?;
                eprintln!("t={t:>2} landscape: {} loss evaluations", header.evaluations);
                headers.push((t, header));
            }
            if analyses.contains(&Analysis::Hessian) {
                let diag = hessian_diag(
                    &first,
                    mask,
                    &task.train,
                    a.estimator,
                    a.probes,
                    a.batch_size,
                    a.hessian_seed,
                )
                .context(|| format!("hessian at t={t}"))?;
                let summary = HessianSummary::of(&diag, a.estimator, a.probes).context(|| "hessian summary".into())?;
                eprintln!("t={t:>2} {tag:?} hessian mean_abs {:.6}", summary.mean_abs);
                hessians.push(HessianRow {
                    iteration: t,
                    sparsity: entry.sparsity,
                    method_tag: tag,
                    summary,
                });
            }
        }

        dir.write_json("record.json", &record)?;
        dir.write_json("reports.json", &reports)?;
        dir.write_json("hessian.json", &hessians)?;
        let mut rows: Vec<LedgerRow> = lmc_rows
            .iter()
            .map(|&(iteration, sparsity, method_tag, barrier_height, endpoint_accs)| LedgerRow::Lmc {
                iteration,
                sparsity,
                method_tag,
                barrier_height,
                endpoint_accs,
                order_seeds: seeds,
            })
            .collect();
        rows.extend(headers.iter().map(|(t, h)| LedgerRow::Landscape { iteration: *t, header: h }));
        rows.extend(hessians.iter().map(LedgerRow::Hessian));
        dir.write("ledger.jsonl", &ledger_bytes(&rows))?;
        Ok(Status::Complete)
    })
}
