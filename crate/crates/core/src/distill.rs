//! Distillation losses: label cross-entropy, temperature-softened KL
//! divergence against a frozen teacher, and their convex combination.
//!
//! Teacher logits enter as plain values only — no gradient ever flows to the
//! teacher. Both losses are registered on the tape with hand-derived backward
//! rules (softmax-difference form), checked against finite differences in the
//! tests.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    CeOnly,
    /// KL against the teacher only; labels are never consumed. The config
    /// layer also accepts `"sqakd"` for this mode.
    #[serde(alias = "sqakd")]
    KlOnly,
    Combined,
}

/// Loss-side knobs: mode, the CE/KL mixing weight, the softmax temperature,
/// and whether the KL term is rescaled by temperature squared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Weight of the KL term in `Combined`; unused otherwise.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Softmax temperature; must be positive.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Multiply the KL loss by `rho^2` so its gradient magnitude stays
    /// comparable across temperatures. On by default.
    #[serde(default = "default_rho2")]
    pub rho2_scaling: bool,
}

fn default_lambda() -> f64 {
    0.5
}

fn default_rho() -> f64 {
    4.0
}

fn default_rho2() -> bool {
    true
}

impl LossConfig {
    pub fn kl_only(rho: f64) -> Self {
        LossConfig { mode: LossMode::KlOnly, lambda: 1.0, rho, rho2_scaling: true }
    }

    pub fn ce_only() -> Self {
        LossConfig { mode: LossMode::CeOnly, lambda: 0.0, rho: 1.0, rho2_scaling: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature rho {} must be positive",
                self.rho
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda {} outside [0,1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Treat rank-1 logits as a single-row batch; anything else must be 2-d.
fn batch_dims(h: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match h.shape() {
        [k] => Ok((1, *k)),
        [b, k] => Ok((*b, *k)),
        other => Err(Error::InvalidArgument(format!(
            "{op} expects logits of shape [batch, classes], got {other:?}"
        ))),
    }
}

/// Row-wise log-softmax of `h / rho` with max subtraction.
fn log_softmax_rows(h: &Tensor, rho: f64, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &h.data()[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v / rho));
        let mut lse = 0.0;
        for &v in row {
            lse += (v / rho - max).exp();
        }
        let lse = lse.ln() + max;
        for (c, &v) in row.iter().enumerate() {
            out[r * cols + c] = v / rho - lse;
        }
    }
    out
}

/// Temperature-softened probabilities: row-wise softmax of `h / rho`.
pub fn soften(h: &Tensor, rho: f64) -> Result<Tensor> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature rho {rho} must be positive")));
    }
    let (rows, cols) = batch_dims(h, "soften")?;
    let logp = log_softmax_rows(h, rho, rows, cols);
    Tensor::new(h.shape().to_vec(), logp.iter().map(|&v| v.exp()).collect())
}

/// Batch-mean KL divergence `KL(soften(h_T) || soften(h_S))`, optionally
/// scaled by `rho^2`. Teacher logits are constants; the student gradient is
/// `scale * (Q - P) / batch` with the softened distributions P (teacher) and
/// Q (student).
pub fn kl_loss(
    tape: &Tape,
    h_teacher: &Tensor,
    h_student: &Tensor,
    rho: f64,
    rho2_scaling: bool,
) -> Result<Tensor> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature rho {rho} must be positive")));
    }
    h_teacher.same_shape(h_student, "kl_loss")?;
    let (rows, cols) = batch_dims(h_student, "kl_loss")?;
    let log_p = log_softmax_rows(h_teacher, rho, rows, cols);
    let factor = if rho2_scaling { rho * rho } else { 1.0 };

    let shape = h_student.shape().to_vec();
    tape.custom_vjp(
        "kl_loss",
        &[h_student],
        move |vals| {
            let log_q = log_softmax_rows(&vals[0], rho, rows, cols);
            let mut total = 0.0;
            for i in 0..rows * cols {
                total += log_p[i].exp() * (log_p[i] - log_q[i]);
            }
            let loss = Tensor::scalar(factor * total / rows as f64);
            // Save softened teacher and student distributions for backward.
            let p = Tensor::new(shape.clone(), log_p.iter().map(|&v| v.exp()).collect())?;
            let q = Tensor::new(shape.clone(), log_q.iter().map(|&v| v.exp()).collect())?;
            Ok((loss, vec![p, q]))
        },
        Rc::new(move |saved: &[Tensor], upstream: &Tensor| {
            let (p, q) = (&saved[0], &saved[1]);
            let g = upstream.item() * factor / (rows as f64 * rho);
            let data = q.data().iter().zip(p.data()).map(|(&qv, &pv)| g * (qv - pv)).collect();
            Ok(vec![Tensor::new(p.shape().to_vec(), data)?])
        }),
    )
}

/// Batch-mean cross-entropy of the student logits against integer labels.
pub fn ce_loss(tape: &Tape, h_student: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, cols) = batch_dims(h_student, "ce_loss")?;
    if labels.len() != rows {
        return Err(Error::InvalidArgument(format!(
            "ce_loss: {} labels for a batch of {rows}",
            labels.len()
        )));
    }
    for &y in labels {
        if y >= cols {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {cols} classes"
            )));
        }
    }
    let labels = labels.to_vec();
    let shape = h_student.shape().to_vec();
    tape.custom_vjp(
        "ce_loss",
        &[h_student],
        move |vals| {
            let log_q = log_softmax_rows(&vals[0], 1.0, rows, cols);
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                total -= log_q[r * cols + y];
            }
            let loss = Tensor::scalar(total / rows as f64);
            let q = Tensor::new(shape.clone(), log_q.iter().map(|&v| v.exp()).collect())?;
            let onehot: Vec<f64> = (0..rows * cols)
                .map(|i| if i % cols == labels[i / cols] { 1.0 } else { 0.0 })
                .collect();
            Ok((loss, vec![q, Tensor::new(shape.clone(), onehot)?]))
        },
        Rc::new(move |saved: &[Tensor], upstream: &Tensor| {
            let (q, onehot) = (&saved[0], &saved[1]);
            let g = upstream.item() / rows as f64;
            let data =
                q.data().iter().zip(onehot.data()).map(|(&qv, &hv)| g * (qv - hv)).collect();
            Ok(vec![Tensor::new(q.shape().to_vec(), data)?])
        }),
    )
}

/// Dispatch on the loss mode. Inputs not required by the mode are ignored
/// (notably: labels under `KlOnly` — the label-free objective); missing
/// required inputs are errors.
pub fn total_loss(
    tape: &Tape,
    cfg: &LossConfig,
    h_teacher: Option<&Tensor>,
    h_student: &Tensor,
    labels: Option<&[usize]>,
) -> Result<Tensor> {
    cfg.validate()?;
    match cfg.mode {
        LossMode::CeOnly => {
            let labels = labels.ok_or_else(|| {
                Error::InvalidArgument("ce_only loss requires labels".into())
            })?;
            ce_loss(tape, h_student, labels)
        }
        LossMode::KlOnly => {
            let h_t = h_teacher.ok_or_else(|| {
                Error::InvalidArgument("kl_only loss requires teacher logits".into())
            })?;
            kl_loss(tape, h_t, h_student, cfg.rho, cfg.rho2_scaling)
        }
        LossMode::Combined => {
            let labels = labels.ok_or_else(|| {
                Error::InvalidArgument("combined loss requires labels".into())
            })?;
            let h_t = h_teacher.ok_or_else(|| {
                Error::InvalidArgument("combined loss requires teacher logits".into())
            })?;
            let ce = ce_loss(tape, h_student, labels)?;
            let kl = kl_loss(tape, h_t, h_student, cfg.rho, cfg.rho2_scaling)?;
            let ce_part = tape.mul(&ce, &Tensor::scalar(1.0 - cfg.lambda))?;
            let kl_part = tape.mul(&kl, &Tensor::scalar(cfg.lambda))?;
            tape.add(&ce_part, &kl_part)
        }
    }
}

/// Elementwise arithmetic mean of the teachers' logits.
pub fn ensemble_logits(teacher_logits: &[Tensor]) -> Result<Tensor> {
    let first = teacher_logits
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble of zero teachers".into()))?;
    let mut acc = first.data().to_vec();
    for t in &teacher_logits[1..] {
        t.same_shape(first, "ensemble_logits")?;
        for (a, &v) in acc.iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    let n = teacher_logits.len() as f64;
    Tensor::new(first.shape().to_vec(), acc.iter().map(|v| v / n).collect())
}
