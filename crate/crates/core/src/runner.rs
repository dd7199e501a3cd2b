//! Command execution: drives the training module from a [`RunConfig`] and
//! emits the per-run artifacts (`config.resolved.json`, `metrics.csv`,
//! `cost.json`, `model.sqkd`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::{ablation_matrix, write_config, RunConfig};
use crate::distill::LossMode;
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::train::{evaluate_topk, pretrain_teacher, train_sqakd, CostReport, RunRecord};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.sqkd";
pub const METRICS_FILE: &str = "metrics.csv";
pub const COST_FILE: &str = "cost.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

fn write_metrics(path: &Path, record: &RunRecord) -> Result<()> {
    let mut out = String::from("epoch,train_loss,top1,top5,seconds\n");
    for e in &record.epochs {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.train_loss, e.top1, e.top5, e.seconds
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_cost(path: &Path, cost: &CostReport) -> Result<()> {
    let json = serde_json::to_string_pretty(cost)
        .map_err(|e| Error::Config(format!("cost report: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join(RESOLVED_CONFIG_FILE), write_config(cfg))?;
    Ok(cfg.out_dir.clone())
}

fn emit_run(
    cfg: &RunConfig,
    model: &Model,
    record: &mut RunRecord,
    cost: &CostReport,
) -> Result<()> {
    let dir = prepare_out_dir(cfg)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, model)?;
    record.final_checkpoint = Some(ckpt);
    write_metrics(&dir.join(METRICS_FILE), record)?;
    write_cost(&dir.join(COST_FILE), cost)?;
    Ok(())
}

/// Train a full-precision teacher with label cross-entropy and write its
/// artifacts.
pub fn run_pretrain(cfg: &RunConfig) -> Result<RunRecord> {
    let (train, test) = cfg.data.load()?;
    let train_cfg = cfg.train_config(crate::distill::LossConfig::ce_only());
    let (model, mut record) = pretrain_teacher(&train, &test, &cfg.model, &train_cfg)?;
    let cost = CostReport {
        n: 1,
        t_pre: record.total_seconds(),
        t_s: 0.0,
        t_t: 0.0,
        m_t: 0,
        m_s: 0,
        total: record.total_seconds(),
        reused_teacher: false,
    };
    emit_run(cfg, &model, &mut record, &cost)?;
    Ok(record)
}

fn load_teachers(cfg: &RunConfig) -> Result<Vec<Model>> {
    let mut teachers = Vec::new();
    for path in &cfg.teacher_checkpoints {
        let model = load_checkpoint(path)?;
        if model.config.is_quantized() {
            return Err(Error::InvalidArgument(format!(
                "teacher checkpoint {} is quantized; teachers are full-precision",
                path.display()
            )));
        }
        teachers.push(model);
    }
    Ok(teachers)
}

/// Quantization-aware training of the student per the config's loss mode,
/// distilling from the configured teacher checkpoints.
pub fn run_qat(cfg: &RunConfig) -> Result<(RunRecord, CostReport)> {
    let needs_teacher = cfg.loss.mode != LossMode::CeOnly;
    if needs_teacher && cfg.teacher_checkpoints.is_empty() {
        return Err(Error::InvalidArgument(
            "teacher required: set teacher_checkpoints for distillation losses".into(),
        ));
    }
    let (train, test) = cfg.data.load()?;
    let teachers = load_teachers(cfg)?;
    let teacher_refs: Vec<&Model> = teachers.iter().collect();
    let student_cfg = cfg.student_model_config()?;
    let train_cfg = cfg.train_config(cfg.loss.clone());
    // Teachers come from checkpoints, so their pretraining cost is reused.
    let (student, mut record, cost) =
        train_sqakd(&teacher_refs, &[], &train, &test, &student_cfg, &train_cfg)?;
    emit_run(cfg, &student, &mut record, &cost)?;
    Ok((record, cost))
}

/// Evaluate the checkpoint in the config's output directory on the test
/// split; returns top-1 and top-(min(5, classes)) accuracy.
pub fn run_eval(cfg: &RunConfig) -> Result<BTreeMap<usize, f64>> {
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    let model = load_checkpoint(&ckpt)?;
    let (_, test) = cfg.data.load()?;
    let k5 = test.class_count.min(5);
    evaluate_topk(&model, &test, &[1, k5])
}

/// Expand the config's ablation axes and run `qat` for every combination,
/// fanning out across worker threads (one run per worker, disjoint output
/// directories). Returns the output directory of each run.
pub fn run_ablate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let axes = cfg.ablate.clone().unwrap_or_default();
    let configs = ablation_matrix(cfg, &axes)?;
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(configs.len().max(1));

    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in configs.chunks(configs.len().div_ceil(workers)) {
            handles.push(scope.spawn(move || {
                chunk.iter().map(|c| run_qat(c).map(|_| ())).collect::<Vec<_>>()
            }));
        }
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    for r in results {
        r?;
    }
    Ok(configs.into_iter().map(|c| c.out_dir).collect())
}
