use std::collections::BTreeMap;
use std::path::PathBuf;

use dprune::data::{LabeledDataset, Role};
use dprune::io::read_json;
use dprune::model::ModelState;
use dprune::prune::{IterationRecord, Phase, PipelineInputs, PruneRunRecord, PruneRunner, RunnerState};
use serde::Serialize;

use super::{container_digest, csv_line, execute, synthetic_container};
use crate::config::PruneMethodArg;
use crate::error::{CliError, Context, Result};
use crate::manifest::{ledger_bytes, RunDir, Status};
use crate::{Common, PruneFlags};

/// Resume checkpoint, rewritten atomically after every iteration.
pub const STATE: &str = "state.json";

pub fn mask_name(t: usize) -> String {
    format!("masks/mask-t{t:02}.dpm")
}

#[derive(Serialize)]
struct LedgerRow<'a> {
    kind: &'static str,
    iteration: usize,
    phase: Phase,
    sparsity: f64,
    schedule_sparsity: f64,
    surviving_prunable: usize,
    inner_train_loss: f64,
    train_loss: f64,
    test_acc: f64,
    inner_examples_seen: u64,
    mask: &'a str,
}

pub fn record_csv(record: &PruneRunRecord) -> String {
    let mut s = csv_line(
        &[
            "iteration",
            "phase",
            "sparsity",
            "schedule_sparsity",
            "surviving_prunable",
            "inner_train_loss",
            "train_loss",
            "test_acc",
            "inner_examples_seen",
        ]
        .map(String::from),
    );
    for e in &record.entries {
        s.push_str(&csv_line(&[
            e.iteration.to_string(),
            e.phase.to_string(),
            e.sparsity.to_string(),
            e.schedule_sparsity.to_string(),
            e.surviving_prunable.to_string(),
            e.inner_train_loss.to_string(),
            e.train_loss.to_string(),
            e.test_acc.to_string(),
            e.inner_examples_seen.to_string(),
        ]));
    }
    s
}

fn ledger_row<'a>(e: &IterationRecord, mask: &'a str) -> LedgerRow<'a> {
    LedgerRow {
        kind: "prune-iteration",
        iteration: e.iteration,
        phase: e.phase,
        sparsity: e.sparsity,
        schedule_sparsity: e.schedule_sparsity,
        surviving_prunable: e.surviving_prunable,
        inner_train_loss: e.inner_train_loss,
        train_loss: e.train_loss,
        test_acc: e.test_acc,
        inner_examples_seen: e.inner_examples_seen,
        mask,
    }
}

pub fn run(common: &Common, flags: &PruneFlags, resume: bool, halt_after: Option<usize>) -> Result<PathBuf> {
    let mut cfg = super::load_config(common, flags)?;
    let method = cfg.prune.method;
    let mut inputs = BTreeMap::new();
    let mut source = None;
    if method.needs_synthetic() {
        let path = cfg.prune.synthetic.take().ok_or_else(|| {
            CliError::missing(
                "prune.synthetic",
                format!(
                    "the {} method needs a synthetic set; run `dprune distill --config <file>` and pass its run directory with --syn",
                    format!("{method:?}").to_lowercase()
                ),
            )
        })?;
        let container = synthetic_container(&path)?;
        inputs.insert("synthetic".to_string(), container_digest(&container)?);
        source = Some(container);
    } else {
        cfg.prune.synthetic = None;
    }
    let opened = RunDir::open(&common.out_dir, "prune", &cfg, inputs, resume)?;
    execute(opened, |dir, resuming| {
        if let Some(c) = &source {
            dir.manifest.sources.insert("synthetic".into(), c.display().to_string());
        }
        let task = cfg.load_task()?;
        let arch = cfg.build_arch(task.train.example_shape(), task.train.class_count)?;
        let syn: Option<LabeledDataset> = match &source {
            Some(c) => {
                let (ds, _) = LabeledDataset::load(c).context(|| format!("loading {}", c.display()))?;
                if ds.role != Role::Synthetic {
                    return Err(CliError::config("prune.synthetic", format!("dataset role is {}, not synthetic", ds.role)));
                }
                if ds.example_shape() != task.train.example_shape() || ds.class_count != task.train.class_count {
                    return Err(CliError::config("prune.synthetic", "synthetic set does not match the task"));
                }
                Some(ds)
            }
            None => None,
        };
        let init = ModelState::init(&arch, cfg.seeds.init);
        let real = cfg.real_recipe();
        let synr = cfg.syn_recipe();
        let pipeline = PipelineInputs {
            init: &init,
            real_train: &task.train,
            real_test: &task.test,
            syn_train: syn.as_ref(),
            real_recipe: &real,
            syn_recipe: &synr,
        };
        let p = &cfg.prune;
        let (phases, k) = match method {
            PruneMethodArg::Imp => (vec![(Phase::Imp, p.iterations)], p.rewind_epoch),
            PruneMethodArg::Distilled => (vec![(Phase::Syn, p.iterations)], 0),
            PruneMethodArg::Combined => (vec![(Phase::Syn, p.syn_iters), (Phase::Imp, p.iterations)], 0),
        };
        let state_path = dir.file(STATE);
        let mut runner = if resuming && state_path.exists() {
            let state: RunnerState = read_json(&state_path).context(|| "reading resume state".into())?;
            eprintln!("resuming after {} completed iterations", state.next_step());
            PruneRunner::resume(pipeline, state).context(|| "resuming".into())?
        } else {
            PruneRunner::new(pipeline, &phases, p.fraction, k, p.scope).context(|| "pipeline setup".into())?
        };

        let mut done_now = 0;
        while !runner.is_done() {
            if halt_after.is_some_and(|h| done_now >= h) {
                eprintln!("halting after {done_now} iterations; rerun with --resume");
                return Ok(Status::Interrupted);
            }
            let e = runner.step().context(|| "pruning".into())?;
            eprintln!(
                "t={:>2} {} sparsity {:.4} test acc {:.4}",
                e.iteration, e.phase, e.sparsity, e.test_acc
            );
            dprune::io::write_json(&state_path, runner.state()).context(|| "writing resume state".into())?;
            done_now += 1;
        }

        let record = runner.state().record.clone();
        let names: Vec<String> = record.entries.iter().map(|e| mask_name(e.iteration)).collect();
        for (e, name) in record.entries.iter().zip(&names) {
            e.mask
                .write_file(&dir.file(name), &arch, Some(&dir.manifest.run_id))
                .context(|| format!("writing {name}"))?;
            dir.record(name);
        }
        dir.write_json("record.json", &record)?;
        dir.write("record.csv", record_csv(&record).as_bytes())?;
        let rows: Vec<LedgerRow> = record.entries.iter().zip(&names).map(|(e, n)| ledger_row(e, n)).collect();
        dir.write("ledger.jsonl", &ledger_bytes(&rows))?;
        let _ = std::fs::remove_file(&state_path);
        Ok(Status::Complete)
    })
}
