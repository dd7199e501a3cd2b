//! Training orchestration: teacher pretraining, quantization-aware
//! distillation of the student, top-k evaluation, and phase-cost accounting.
//!
//! Every run is fully determined by (config, seed, dataset). The `seconds`
//! column in run records comes from a deterministic work-proportional clock
//! (one tick of 1e-6 s per training sample) so that emitted artifacts are
//! byte-reproducible across invocations; cost reports aggregate the same
//! clock.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, batches, AugmentPolicy, Dataset};
use crate::distill::{ensemble_logits, total_loss, LossConfig, LossMode};
use crate::model::{build_model, clone_weights, Model, ModelConfig};
use crate::quant::GradientEstimator;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Deterministic clock: one training sample advances time by this much.
pub const SECONDS_PER_SAMPLE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay to zero over `total_steps`; 0 means "derive from
    /// epochs * steps per epoch".
    CosineDecay {
        #[serde(default)]
        total_steps: u64,
    },
    StepDecay { milestones: Vec<u64>, factor: f64 },
}

impl LrSchedule {
    fn lr_at(&self, base: f64, step: u64, auto_total: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::CosineDecay { total_steps } => {
                let total = if *total_steps == 0 { auto_total } else { *total_steps };
                if total == 0 {
                    return base;
                }
                let t = step.min(total) as f64 / total as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::StepDecay { milestones, factor } => {
                let hits = milestones.iter().filter(|&&m| step >= m).count() as i32;
                base * factor.powi(hits)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Clone the (first) teacher's latent weights into the student.
    FromTeacher,
    Random,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::FromTeacher
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    #[serde(default = "default_schedule")]
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub loss: LossConfig,
    #[serde(default = "default_estimator")]
    pub estimator: GradientEstimator,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default)]
    pub augment: AugmentPolicy,
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}

fn default_estimator() -> GradientEstimator {
    GradientEstimator::ste()
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        match self.optimizer {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => {
                if !(lr > 0.0) {
                    return Err(Error::InvalidArgument("learning rate must be positive".into()));
                }
            }
        }
        self.loss.validate()?;
        self.estimator.validate()
    }
}

/// Per-epoch metrics; `seconds` is the cumulative deterministic clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochStats>,
    pub final_checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn total_seconds(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.seconds)
    }

    pub fn final_top1(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.top1)
    }

    /// First epoch (1-based) whose test top-1 reaches `threshold`, or
    /// `epochs + 1` when it never does.
    pub fn first_epoch_reaching(&self, threshold: f64) -> usize {
        self.epochs
            .iter()
            .find(|e| e.top1 >= threshold)
            .map(|e| e.epoch)
            .unwrap_or(self.epochs.len() + 1)
    }
}

/// Phase-cost accounting: teacher pretraining (`N` teachers taking `T_pre`
/// total), student training (`M_s` phases of `T_s`), and joint teacher
/// training (`M_t` of `T_t`, zero here — the student trains alone).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T_pre")]
    pub t_pre: f64,
    #[serde(rename = "T_s")]
    pub t_s: f64,
    #[serde(rename = "T_t")]
    pub t_t: f64,
    #[serde(rename = "M_t")]
    pub m_t: usize,
    #[serde(rename = "M_s")]
    pub m_s: usize,
    pub total: f64,
    pub reused_teacher: bool,
}

/// Sum the phase costs: `total = sum(T_pre) + M_s * T_s`. An empty teacher
/// list means the run reused an existing checkpoint and pays nothing for
/// pretraining.
pub fn cost_report(teacher_records: &[RunRecord], student: &RunRecord) -> CostReport {
    let t_pre: f64 = teacher_records.iter().map(|r| r.total_seconds()).sum();
    let t_s = student.total_seconds();
    CostReport {
        n: teacher_records.len(),
        t_pre,
        t_s,
        t_t: 0.0,
        m_t: 0,
        m_s: 1,
        total: t_pre + t_s,
        reused_teacher: teacher_records.is_empty(),
    }
}

// ── Optimizer ───────────────────────────────────────────────────────────

struct Slot {
    momentum: Vec<f64>,
    second: Vec<f64>,
}

pub struct Optimizer {
    kind: OptimizerKind,
    slots: Vec<Slot>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &mut Model) -> Self {
        let mut slots = Vec::new();
        model.visit_params_mut(&mut |slice: &mut [f64]| {
            slots.push(Slot { momentum: vec![0.0; slice.len()], second: vec![0.0; slice.len()] });
        });
        Optimizer { kind, slots, t: 0 }
    }

    /// Apply one update; `grads` aligned with the model's canonical parameter
    /// order, `lr` already resolved through the schedule.
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let t = self.t;
        let kind = self.kind.clone();
        let mut idx = 0;
        let slots = &mut self.slots;
        model.visit_params_mut(&mut |slice: &mut [f64]| {
            let g = grads[idx].data();
            let slot = &mut slots[idx];
            match kind {
                OptimizerKind::Sgd { momentum, weight_decay, .. } => {
                    for i in 0..slice.len() {
                        let mut gi = g[i] + weight_decay * slice[i];
                        if momentum != 0.0 {
                            slot.momentum[i] = momentum * slot.momentum[i] + gi;
                            gi = slot.momentum[i];
                        }
                        slice[i] -= lr * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps, .. } => {
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    for i in 0..slice.len() {
                        slot.momentum[i] = beta1 * slot.momentum[i] + (1.0 - beta1) * g[i];
                        slot.second[i] = beta2 * slot.second[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = slot.momentum[i] / bc1;
                        let v_hat = slot.second[i] / bc2;
                        slice[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            idx += 1;
        });
    }

    fn base_lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

// ── Evaluation ──────────────────────────────────────────────────────────

/// Fraction of samples whose true label ranks in the top k logits; logit ties
/// break toward the lower class index.
pub fn evaluate_topk(
    model: &Model,
    data: &Dataset,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("evaluate_topk: empty k list".into()));
    }
    for &k in ks {
        if k == 0 || k > data.class_count {
            return Err(Error::InvalidArgument(format!(
                "k={k} out of range for {} classes",
                data.class_count
            )));
        }
    }
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(512) {
        let (imgs, labels) = data.gather(chunk);
        let logits = model.infer(&imgs)?;
        let classes = data.class_count;
        for (row, &label) in labels.iter().enumerate() {
            let scores = &logits.data()[row * classes..(row + 1) * classes];
            let own = scores[label];
            // Rank = better-scoring classes + equal-scoring lower indices.
            let rank = scores
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > own || (s == own && j < label))
                .count();
            for (&k, h) in hits.iter_mut() {
                if rank < k {
                    *h += 1;
                }
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|(k, h)| (k, h as f64 / data.len() as f64))
        .collect())
}

// ── Training loops ──────────────────────────────────────────────────────

struct EpochOutcome {
    loss_sum: f64,
    samples: usize,
}

/// One epoch of SGD over the training set. Teacher logits are recomputed per
/// batch (no gradients); labels are passed only when the loss mode reads
/// them.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    student: &mut Model,
    teachers: &[&Model],
    train: &Dataset,
    cfg: &TrainConfig,
    optimizer: &mut Optimizer,
    epoch: usize,
    global_step: &mut u64,
    total_steps: u64,
) -> Result<EpochOutcome> {
    let shuffle_seed = cfg.shuffle.then_some(cfg.seed);
    let mut aug_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xA5A5_5A5A_DEAD_BEEF);
    aug_rng.set_stream(epoch as u64);
    let needs_teacher = !matches!(cfg.loss.mode, LossMode::CeOnly);
    let needs_labels = !matches!(cfg.loss.mode, LossMode::KlOnly);

    let mut loss_sum = 0.0;
    let mut samples = 0;
    for (imgs, labels) in batches(train, cfg.batch_size, shuffle_seed, epoch) {
        let imgs = augment(&imgs, cfg.augment, &mut aug_rng)?;
        let teacher_logits = if needs_teacher {
            let per_teacher: Vec<Tensor> =
                teachers.iter().map(|t| t.infer(&imgs)).collect::<Result<_>>()?;
            Some(ensemble_logits(&per_teacher)?)
        } else {
            None
        };

        let tape = Tape::new();
        let bound = student.bind(&tape);
        let logits = bound.forward(&imgs, &cfg.estimator, *global_step)?;
        let loss = total_loss(
            &tape,
            &cfg.loss,
            teacher_logits.as_ref(),
            &logits,
            if needs_labels { Some(&labels) } else { None },
        )?;
        let grads_map = tape.backward(&loss)?;
        let grads: Vec<Tensor> =
            bound.leaves().iter().map(|leaf| grads_map.wrt(leaf)).collect();
        drop(bound);

        let lr = cfg.lr_schedule.lr_at(optimizer.base_lr(), *global_step, total_steps);
        optimizer.step(student, &grads, lr);
        *global_step += 1;

        loss_sum += loss.item() * labels.len() as f64;
        samples += labels.len();
    }
    Ok(EpochOutcome { loss_sum, samples })
}

fn evaluate_epoch(model: &Model, test: &Dataset) -> Result<(f64, f64)> {
    let k5 = test.class_count.min(5);
    let accs = evaluate_topk(model, test, &[1, k5])?;
    Ok((accs[&1], accs[&k5]))
}

fn train_model(
    model: &mut Model,
    teachers: &[&Model],
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    let steps_per_epoch = train.len().div_euclid(cfg.batch_size).max(1) as u64
        + (train.len() % cfg.batch_size != 0) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), model);
    let mut record = RunRecord::default();
    let mut global_step = 0u64;
    let mut clock = 0.0;
    for epoch in 0..cfg.epochs {
        let outcome = run_epoch(
            model,
            teachers,
            train,
            cfg,
            &mut optimizer,
            epoch,
            &mut global_step,
            total_steps,
        )?;
        clock += outcome.samples as f64 * SECONDS_PER_SAMPLE;
        let (top1, top5) = evaluate_epoch(model, test)?;
        record.epochs.push(EpochStats {
            epoch: epoch + 1,
            train_loss: outcome.loss_sum / outcome.samples as f64,
            top1,
            top5,
            seconds: clock,
        });
    }
    Ok(record)
}

/// Train a full-precision teacher with plain label cross-entropy.
pub fn pretrain_teacher(
    train: &Dataset,
    test: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Model, RunRecord)> {
    train_cfg.validate()?;
    if model_cfg.is_quantized() {
        return Err(Error::InvalidArgument(
            "pretrain_teacher requires an unquantized model config".into(),
        ));
    }
    if train_cfg.loss.mode != LossMode::CeOnly {
        return Err(Error::InvalidArgument(
            "pretrain_teacher trains with ce_only loss".into(),
        ));
    }
    let mut model = build_model(model_cfg, train_cfg.seed)?;
    let record = train_model(&mut model, &[], train, test, train_cfg)?;
    Ok((model, record))
}

/// Quantization-aware training of the student. For the KL modes the frozen
/// teachers supply (ensembled) soft targets and labels are never read; the
/// optimizer updates the latent weights and every quantizer parameter.
pub fn train_sqakd(
    teachers: &[&Model],
    teacher_records: &[RunRecord],
    train: &Dataset,
    test: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Model, RunRecord, CostReport)> {
    train_cfg.validate()?;
    if !model_cfg.is_quantized() {
        return Err(Error::InvalidArgument(
            "train_sqakd requires a quantized student config".into(),
        ));
    }
    let needs_teacher = !matches!(train_cfg.loss.mode, LossMode::CeOnly);
    if needs_teacher && teachers.is_empty() {
        return Err(Error::InvalidArgument("teacher required for distillation loss".into()));
    }
    for t in teachers {
        if t.config.num_classes != model_cfg.num_classes {
            return Err(Error::InvalidArgument("architecture mismatch".into()));
        }
    }

    let mut student = build_model(model_cfg, train_cfg.seed)?;
    if train_cfg.init == InitScheme::FromTeacher {
        let src = teachers
            .first()
            .ok_or_else(|| Error::InvalidArgument("teacher required for from_teacher init".into()))?;
        clone_weights(src, &mut student)?;
    }

    let record = train_model(&mut student, teachers, train, test, train_cfg)?;
    let cost = cost_report(teacher_records, &record);
    Ok((student, record, cost))
}
