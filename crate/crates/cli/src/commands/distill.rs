use std::collections::BTreeMap;
use std::path::PathBuf;

use dprune::data::{compression_ratio, CompressionRatio};
use dprune::distill::{
    distill, eval_distillate, initial_synthetic, record_teachers, student_accuracies, validation_gap, DistillEval,
    InitMode,
};
use serde::Serialize;

use super::{csv_line, execute};
use crate::error::{Context, Result};
use crate::manifest::{ledger_bytes, RunDir, Status};
use crate::{Common, PruneFlags};

#[derive(Debug, Serialize)]
struct DistillReport {
    kind: &'static str,
    compression: CompressionRatio,
    compression_ratio: f64,
    bank_digest: String,
    updates: usize,
    skipped: usize,
    final_loss: Option<f64>,
    distilled: DistillEval,
    /// Students trained on the real examples the distillation started from.
    baseline: DistillEval,
    validation_gap: Option<f64>,
}

pub fn run(common: &Common) -> Result<PathBuf> {
    let cfg = super::load_config(common, &PruneFlags::default())?;
    let opened = RunDir::open(&common.out_dir, "distill", &cfg, BTreeMap::new(), false)?;
    execute(opened, |dir, _| {
        let task = cfg.load_task()?;
        let arch = cfg.build_arch(task.train.example_shape(), task.train.class_count)?;
        let teacher = cfg.teacher_recipe();
        let bank = record_teachers(
            &task.train,
            &arch,
            &teacher,
            &cfg.seeds.teachers(cfg.teacher.count),
            cfg.teacher.snapshot_interval,
        )
        .context(|| "recording teachers".into())?;
        let dcfg = cfg.distill.config(cfg.seeds.distill);
        let out = distill(&task.train, &bank, &teacher, &dcfg).context(|| "distillation".into())?;
        let syn = out.dataset;

        let mut provenance = BTreeMap::new();
        provenance.insert("run_id".to_string(), dir.manifest.run_id.clone());
        provenance.insert("teacher_bank".to_string(), bank.digest());
        syn.save(&dir.file("synthetic"), Some(cfg.seeds.distill), provenance)
            .context(|| "saving synthetic set".into())?;
        for f in ["features.f32", "labels.i64", "manifest.json"] {
            dir.record(&format!("synthetic/{f}"));
        }

        let mut csv = csv_line(&["update".into(), "loss".into()]);
        for (i, l) in out.losses.iter().enumerate() {
            csv.push_str(&csv_line(&[i.to_string(), l.to_string()]));
        }
        dir.write("losses.csv", csv.as_bytes())?;

        let students = cfg.seeds.students(cfg.distill.students);
        let syn_recipe = cfg.syn_recipe();
        let distilled = eval_distillate(&syn, &task.test, &arch, &syn_recipe, &students)
            .context(|| "scoring the distillate".into())?;
        let start = initial_synthetic(&task.train, dcfg.ipc, InitMode::RandomReal, dcfg.seed)
            .context(|| "baseline subset".into())?;
        let baseline = student_accuracies(&start, &task.test, &arch, &syn_recipe, &students)
            .context(|| "scoring the baseline".into())?;
        let gap = match &task.val {
            Some(val) => Some(
                validation_gap(&task.train, &syn, val, &arch, &cfg.real_recipe(), &syn_recipe, students[0])
                    .context(|| "validation gap".into())?,
            ),
            None => None,
        };
        let compression =
            compression_ratio(task.train.per_class(), dcfg.ipc).context(|| "compression ratio".into())?;
        let report = DistillReport {
            kind: "distill",
            compression_ratio: compression.ratio(),
            compression,
            bank_digest: bank.digest(),
            updates: out.losses.len(),
            skipped: out.skipped,
            final_loss: out.losses.last().copied(),
            distilled,
            baseline,
            validation_gap: gap,
        };
        eprintln!(
            "distillate {:.4} vs baseline {:.4} (compression {}x)",
            report.distilled.mean, report.baseline.mean, report.compression_ratio
        );
        dir.write_json("eval.json", &report)?;
        dir.write("ledger.jsonl", &ledger_bytes(&[&report]))?;
        Ok(Status::Complete)
    })
}
