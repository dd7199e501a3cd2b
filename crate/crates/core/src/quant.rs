//! Unified fake quantizer.
//!
//! Forward: `x -> x_c = clip/normalize(x) -> x_q = round-to-level(x_c) ->
//! denormalize`. The clip step maps the input onto `[0,1]` in a
//! family-specific way (plain affine clamp, DoReFa's tanh scaling, PACT's
//! learned ceiling, LSQ's learned step size); the round step snaps onto the
//! `2^b` uniform levels of the unit interval with round-half-to-even.
//!
//! Backward: the round step is non-differentiable, so a pluggable surrogate
//! supplies `dL/dx_c` from `dL/dx_q` — straight-through, the additive
//! discretization-error rule `g + mu * (x_c - x_q)`, or the multiplicative
//! scaling variant. Everything around the round (normalize and denormalize
//! maps, trainable clip/step parameters) is differentiated exactly.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Tolerance for clip outputs drifting past `[0,1]` by floating-point noise.
const CLIP_RANGE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerFamily {
    Uniform,
    DorefaWeight,
    DorefaActivation,
    Pact,
    Lsq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantTarget {
    Weights,
    Activations,
}

impl Default for QuantTarget {
    fn default() -> Self {
        QuantTarget::Weights
    }
}

/// Trainable quantizer parameters: `clip` holds the clip-side set (PACT's
/// ceiling), `round` the round-side set (LSQ's step size).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerParams {
    #[serde(default)]
    pub clip: Vec<f64>,
    #[serde(default)]
    pub round: Vec<f64>,
}

impl QuantizerParams {
    pub fn zeros_like(&self) -> QuantizerParams {
        QuantizerParams {
            clip: vec![0.0; self.clip.len()],
            round: vec![0.0; self.round.len()],
        }
    }
}

/// Bit-width, bounds, family, and trainable parameters of one quantizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSpec {
    pub family: QuantizerFamily,
    /// Bit-width, 1 through 8.
    #[serde(rename = "b")]
    pub bits: u32,
    /// Lower bound of the clip range.
    #[serde(rename = "v", default = "default_lower")]
    pub lower: f64,
    /// Upper bound of the clip range.
    #[serde(rename = "m", default = "default_upper")]
    pub upper: f64,
    #[serde(default)]
    pub target: QuantTarget,
    #[serde(default)]
    pub params: QuantizerParams,
}

fn default_lower() -> f64 {
    0.0
}

fn default_upper() -> f64 {
    1.0
}

impl QuantizerSpec {
    pub fn new(
        family: QuantizerFamily,
        bits: u32,
        lower: f64,
        upper: f64,
        target: QuantTarget,
    ) -> Result<Self> {
        let mut spec =
            QuantizerSpec { family, bits, lower, upper, target, params: QuantizerParams::default() };
        spec.params = default_params(family);
        spec.validate()?;
        Ok(spec)
    }

    pub fn uniform(bits: u32, lower: f64, upper: f64, target: QuantTarget) -> Result<Self> {
        Self::new(QuantizerFamily::Uniform, bits, lower, upper, target)
    }

    /// Number of trainable clip-side parameters for the family.
    pub fn clip_param_count(family: QuantizerFamily) -> usize {
        match family {
            QuantizerFamily::Pact => 1,
            _ => 0,
        }
    }

    /// Number of trainable round-side parameters for the family.
    pub fn round_param_count(family: QuantizerFamily) -> usize {
        match family {
            QuantizerFamily::Lsq => 1,
            _ => 0,
        }
    }

    /// Fill missing trainable parameters with defaults, then validate.
    pub fn normalize(&mut self) -> Result<()> {
        let defaults = default_params(self.family);
        if self.params.clip.is_empty() {
            self.params.clip = defaults.clip;
        }
        if self.params.round.is_empty() {
            self.params.round = defaults.round;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 1 || self.bits > 8 {
            return Err(Error::InvalidArgument(format!(
                "bit-width {} outside 1..=8",
                self.bits
            )));
        }
        if !(self.lower < self.upper) {
            return Err(Error::InvalidArgument(format!(
                "quantizer bounds v={} must be below m={}",
                self.lower, self.upper
            )));
        }
        if self.params.clip.len() != Self::clip_param_count(self.family)
            || self.params.round.len() != Self::round_param_count(self.family)
        {
            return Err(Error::InvalidArgument(format!(
                "{:?} expects {}/{} clip/round params, got {}/{}",
                self.family,
                Self::clip_param_count(self.family),
                Self::round_param_count(self.family),
                self.params.clip.len(),
                self.params.round.len()
            )));
        }
        match (self.family, self.target) {
            (QuantizerFamily::DorefaWeight, QuantTarget::Activations) => {
                Err(Error::InvalidArgument(
                    "dorefa_weight quantizes weights, not activations".into(),
                ))
            }
            (QuantizerFamily::DorefaActivation | QuantizerFamily::Pact, QuantTarget::Weights) => {
                Err(Error::InvalidArgument(format!(
                    "{:?} quantizes activations, not weights",
                    self.family
                )))
            }
            _ => Ok(()),
        }
    }

    /// Integer range the LSQ step size scales: unsigned for activations,
    /// signed for weights.
    pub fn integer_bounds(&self) -> (f64, f64) {
        let b = self.bits;
        match self.target {
            QuantTarget::Activations => (0.0, ((1u32 << b) - 1) as f64),
            QuantTarget::Weights => {
                (-((1u32 << (b - 1)) as f64), ((1u32 << (b - 1)) - 1) as f64)
            }
        }
    }
}

fn default_params(family: QuantizerFamily) -> QuantizerParams {
    match family {
        QuantizerFamily::Pact => QuantizerParams { clip: vec![1.0], round: vec![] },
        QuantizerFamily::Lsq => QuantizerParams { clip: vec![], round: vec![0.1] },
        _ => QuantizerParams::default(),
    }
}

// ── Surrogate backward rules ────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateRule {
    Ste,
    #[serde(alias = "additive")]
    AdditiveDiscretization,
    #[serde(alias = "ewgs")]
    EwgsMultiplicative,
}

/// Schedule for the additive rule's coefficient over optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum MuSchedule {
    /// Same value at every step.
    Constant,
    /// Linear interpolation from the base value to `mu_final` between the two
    /// step counts.
    LinearRamp { start_step: u64, end_step: u64, mu_final: f64 },
    /// Stage boundaries mapped to values; the base value applies before the
    /// first boundary.
    Curriculum { stages: Vec<(u64, f64)> },
}

impl Default for MuSchedule {
    fn default() -> Self {
        MuSchedule::Constant
    }
}

impl MuSchedule {
    fn value_at(&self, base: f64, step: u64) -> f64 {
        match self {
            MuSchedule::Constant => base,
            MuSchedule::LinearRamp { start_step, end_step, mu_final } => {
                if step <= *start_step {
                    base
                } else if step >= *end_step {
                    *mu_final
                } else {
                    let t = (step - start_step) as f64 / (end_step - start_step) as f64;
                    base + (mu_final - base) * t
                }
            }
            MuSchedule::Curriculum { stages } => {
                let mut value = base;
                for (boundary, mu) in stages {
                    if step >= *boundary {
                        value = *mu;
                    } else {
                        break;
                    }
                }
                value
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            MuSchedule::Constant => Ok(()),
            MuSchedule::LinearRamp { start_step, end_step, mu_final } => {
                if end_step <= start_step {
                    return Err(Error::InvalidArgument(
                        "linear_ramp end_step must exceed start_step".into(),
                    ));
                }
                if *mu_final < 0.0 {
                    return Err(Error::InvalidArgument("mu_final must be non-negative".into()));
                }
                Ok(())
            }
            MuSchedule::Curriculum { stages } => {
                let mut prev = None;
                for (boundary, mu) in stages {
                    if *mu < 0.0 {
                        return Err(Error::InvalidArgument(
                            "curriculum mu values must be non-negative".into(),
                        ));
                    }
                    if let Some(p) = prev {
                        if *boundary <= p {
                            return Err(Error::InvalidArgument(
                                "curriculum boundaries must be strictly increasing".into(),
                            ));
                        }
                    }
                    prev = Some(*boundary);
                }
                Ok(())
            }
        }
    }
}

/// Surrogate rule plus its coefficients and schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientEstimator {
    pub rule: SurrogateRule,
    /// Additive-rule coefficient; must be non-negative.
    #[serde(default)]
    pub mu: f64,
    /// Multiplicative-rule coefficient; must be non-negative.
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub schedule: MuSchedule,
}

impl GradientEstimator {
    pub fn ste() -> Self {
        GradientEstimator {
            rule: SurrogateRule::Ste,
            mu: 0.0,
            delta: 0.0,
            schedule: MuSchedule::Constant,
        }
    }

    pub fn additive(mu: f64) -> Self {
        GradientEstimator {
            rule: SurrogateRule::AdditiveDiscretization,
            mu,
            delta: 0.0,
            schedule: MuSchedule::Constant,
        }
    }

    pub fn ewgs(delta: f64) -> Self {
        GradientEstimator {
            rule: SurrogateRule::EwgsMultiplicative,
            mu: 0.0,
            delta,
            schedule: MuSchedule::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu < 0.0 {
            return Err(Error::InvalidArgument(format!("mu {} must be non-negative", self.mu)));
        }
        if self.delta < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "delta {} must be non-negative",
                self.delta
            )));
        }
        self.schedule.validate()
    }

    /// Coefficient resolved through the schedule at a global optimizer step.
    pub fn mu_at(&self, step: u64) -> f64 {
        self.schedule.value_at(self.mu, step)
    }
}

/// Forward values retained for the surrogate backward: the raw input, the
/// clipped/normalized value, and its rounded counterpart (both on the
/// normalized `[0,1]` scale, where the discretization error lives).
#[derive(Clone, Debug)]
pub struct QuantCache {
    pub x: Tensor,
    pub x_c: Tensor,
    pub x_q: Tensor,
}

// ── Forward ─────────────────────────────────────────────────────────────

/// The `2^b` quantization levels on the normalized `[0,1]` scale.
pub fn levels(spec: &QuantizerSpec) -> Vec<f64> {
    let n = ((1u32 << spec.bits) - 1) as f64;
    (0..(1u32 << spec.bits)).map(|k| k as f64 / n).collect()
}

/// The level set after family-specific denormalization; the values
/// `quantize_forward` can emit.
pub fn denorm_levels(spec: &QuantizerSpec) -> Vec<f64> {
    levels(spec).iter().map(|&q| denormalize_one(q, spec)).collect()
}

/// Clip/normalize the input onto `[0,1]`.
pub fn clip_forward(x: &Tensor, spec: &QuantizerSpec) -> Result<Tensor> {
    spec.validate()?;
    match spec.family {
        QuantizerFamily::Uniform | QuantizerFamily::DorefaActivation => {
            let (v, m) = (spec.lower, spec.upper);
            Ok(x.map(|t| (t.clamp(v, m) - v) / (m - v)))
        }
        QuantizerFamily::DorefaWeight => {
            let t = x.map(f64::tanh);
            let max_abs = t.data().iter().fold(0.0f64, |acc, &u| acc.max(u.abs()));
            if max_abs == 0.0 {
                return Err(Error::InvalidArgument("degenerate weight tensor".into()));
            }
            Ok(t.map(|u| u / (2.0 * max_abs) + 0.5))
        }
        QuantizerFamily::Pact => {
            let p1 = spec.params.clip[0];
            if p1 <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "pact clipping level p1={p1} must be positive"
                )));
            }
            Ok(x.map(|t| t.clamp(0.0, p1) / p1))
        }
        QuantizerFamily::Lsq => {
            let q1 = spec.params.round[0];
            if q1 <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "lsq step size q1={q1} must be positive"
                )));
            }
            let (qn, qp) = spec.integer_bounds();
            let r = qp - qn;
            Ok(x.map(|t| ((t / q1).clamp(qn, qp) - qn) / r))
        }
    }
}

/// Round a normalized value onto the level grid, staying on the `[0,1]`
/// scale. Errors when the clip contract was violated by more than fp noise.
fn round_normalized(x_c: &Tensor, bits: u32) -> Result<Tensor> {
    let n = ((1u32 << bits) - 1) as f64;
    for &v in x_c.data() {
        if v < -CLIP_RANGE_TOL || v > 1.0 + CLIP_RANGE_TOL {
            return Err(Error::InvalidArgument(format!(
                "round input {v} outside the normalized [0,1] range"
            )));
        }
    }
    Ok(x_c.map(|v| (v.clamp(0.0, 1.0) * n).round_ties_even() / n))
}

fn denormalize_one(q: f64, spec: &QuantizerSpec) -> f64 {
    match spec.family {
        QuantizerFamily::Uniform | QuantizerFamily::DorefaActivation => {
            spec.lower + (spec.upper - spec.lower) * q
        }
        QuantizerFamily::DorefaWeight => 2.0 * q - 1.0,
        QuantizerFamily::Pact => q * spec.params.clip[0],
        QuantizerFamily::Lsq => {
            let (qn, qp) = spec.integer_bounds();
            spec.params.round[0] * (q * (qp - qn) + qn)
        }
    }
}

fn denormalize(x_q: &Tensor, spec: &QuantizerSpec) -> Tensor {
    x_q.map(|q| denormalize_one(q, spec))
}

/// Round a clipped/normalized tensor onto the grid and denormalize.
pub fn round_forward(x_c: &Tensor, spec: &QuantizerSpec) -> Result<Tensor> {
    spec.validate()?;
    let x_q = round_normalized(x_c, spec.bits)?;
    Ok(denormalize(&x_q, spec))
}

/// Full quantizer forward: returns the denormalized output plus the cache the
/// backward rules consume.
pub fn quantize_forward(x: &Tensor, spec: &QuantizerSpec) -> Result<(Tensor, QuantCache)> {
    let x_c = clip_forward(x, spec)?;
    let x_q = round_normalized(&x_c, spec.bits)?;
    let out = denormalize(&x_q, spec);
    let cache = QuantCache { x: x.detached(), x_c, x_q };
    Ok((out, cache))
}

// ── Backward ────────────────────────────────────────────────────────────

fn sign3(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Surrogate for the round step: maps `dL/dx_q` to `dL/dx_c`.
pub fn quantize_backward(
    upstream: &Tensor,
    cache: &QuantCache,
    est: &GradientEstimator,
    step: u64,
) -> Result<Tensor> {
    upstream.same_shape(&cache.x_c, "quantize_backward")?;
    est.validate()?;
    match est.rule {
        SurrogateRule::Ste => Ok(upstream.detached()),
        SurrogateRule::AdditiveDiscretization => {
            let mu = est.mu_at(step);
            if mu == 0.0 {
                // Bit-identical to the straight-through path.
                return Ok(upstream.detached());
            }
            let data = upstream
                .data()
                .iter()
                .zip(cache.x_c.data().iter().zip(cache.x_q.data()))
                .map(|(&g, (&c, &q))| g + mu * (c - q))
                .collect();
            Tensor::new(upstream.shape().to_vec(), data)
        }
        SurrogateRule::EwgsMultiplicative => {
            let delta = est.delta;
            let data = upstream
                .data()
                .iter()
                .zip(cache.x_c.data().iter().zip(cache.x_q.data()))
                .map(|(&g, (&c, &q))| g * (1.0 + delta * sign3(g) * (c - q)))
                .collect();
            Tensor::new(upstream.shape().to_vec(), data)
        }
    }
}

/// Exact derivative of the clip/normalize map: given `dL/dx_c`, produces
/// `dL/dx` and the gradients of the trainable clip/round parameters that
/// appear in the map.
pub fn clip_backward(
    grad_xc: &Tensor,
    cache: &QuantCache,
    spec: &QuantizerSpec,
) -> Result<(Tensor, QuantizerParams)> {
    grad_xc.same_shape(&cache.x, "clip_backward")?;
    let x = &cache.x;
    let mut param_grads = spec.params.zeros_like();
    let grad_x = match spec.family {
        QuantizerFamily::Uniform | QuantizerFamily::DorefaActivation => {
            let (v, m) = (spec.lower, spec.upper);
            let slope = 1.0 / (m - v);
            let data = grad_xc
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &xv)| if xv >= v && xv <= m { g * slope } else { 0.0 })
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        }
        QuantizerFamily::DorefaWeight => {
            let t = x.map(f64::tanh);
            let mut max_abs = 0.0f64;
            let mut argmax = 0usize;
            for (i, &u) in t.data().iter().enumerate() {
                if u.abs() > max_abs {
                    max_abs = u.abs();
                    argmax = i;
                }
            }
            if max_abs == 0.0 {
                return Err(Error::InvalidArgument("degenerate weight tensor".into()));
            }
            // x_c_k = tanh(x_k) / (2M) + 1/2 with M = max |tanh|; the max
            // element contributes through M as well.
            let mut data: Vec<f64> = grad_xc
                .data()
                .iter()
                .zip(t.data())
                .map(|(&g, &u)| g * (1.0 - u * u) / (2.0 * max_abs))
                .collect();
            let dot: f64 =
                grad_xc.data().iter().zip(t.data()).map(|(&g, &u)| g * u).sum();
            let tm = t.data()[argmax];
            data[argmax] -=
                dot / (2.0 * max_abs * max_abs) * sign3(tm) * (1.0 - tm * tm);
            Tensor::new(x.shape().to_vec(), data)?
        }
        QuantizerFamily::Pact => {
            let p1 = spec.params.clip[0];
            let mut gp = 0.0;
            let data: Vec<f64> = grad_xc
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &xv)| {
                    let clamped = xv.clamp(0.0, p1);
                    let dc_dp = if xv >= p1 { 1.0 } else { 0.0 };
                    gp += g * (dc_dp * p1 - clamped) / (p1 * p1);
                    if xv >= 0.0 && xv <= p1 {
                        g / p1
                    } else {
                        0.0
                    }
                })
                .collect();
            param_grads.clip[0] = gp;
            Tensor::new(x.shape().to_vec(), data)?
        }
        QuantizerFamily::Lsq => {
            let q1 = spec.params.round[0];
            let (qn, qp) = spec.integer_bounds();
            let r = qp - qn;
            let mut gq = 0.0;
            let data: Vec<f64> = grad_xc
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &xv)| {
                    let t = xv / q1;
                    if t >= qn && t <= qp {
                        gq += g * (-xv / (q1 * q1)) / r;
                        g / (r * q1)
                    } else {
                        0.0
                    }
                })
                .collect();
            param_grads.round[0] = gq;
            Tensor::new(x.shape().to_vec(), data)?
        }
    };
    Ok((grad_x, param_grads))
}

/// Derivative of the denormalize map: contribution of `dL/dx_q(out)` to
/// `dL/dx_q(normalized)` and to the trainable parameters it touches.
fn denorm_backward(
    upstream: &Tensor,
    x_q: &Tensor,
    spec: &QuantizerSpec,
) -> (Tensor, QuantizerParams) {
    let mut param_grads = spec.params.zeros_like();
    let grad = match spec.family {
        QuantizerFamily::Uniform | QuantizerFamily::DorefaActivation => {
            let scale = spec.upper - spec.lower;
            upstream.map(|g| g * scale)
        }
        QuantizerFamily::DorefaWeight => upstream.map(|g| g * 2.0),
        QuantizerFamily::Pact => {
            let p1 = spec.params.clip[0];
            param_grads.clip[0] =
                upstream.data().iter().zip(x_q.data()).map(|(&g, &q)| g * q).sum();
            upstream.map(|g| g * p1)
        }
        QuantizerFamily::Lsq => {
            let q1 = spec.params.round[0];
            let (qn, qp) = spec.integer_bounds();
            let r = qp - qn;
            param_grads.round[0] = upstream
                .data()
                .iter()
                .zip(x_q.data())
                .map(|(&g, &q)| g * (q * r + qn))
                .sum();
            upstream.map(|g| g * q1 * r)
        }
    };
    (grad, param_grads)
}

/// Trainable quantizer parameters registered on a tape, aligned with
/// `QuantizerParams` order (clip first, then round), one scalar leaf each.
pub struct ParamLeaves {
    pub clip: Vec<Tensor>,
    pub round: Vec<Tensor>,
}

impl ParamLeaves {
    /// Put each parameter value of `spec` on the tape as a scalar leaf.
    pub fn bind(tape: &Tape, spec: &QuantizerSpec) -> ParamLeaves {
        ParamLeaves {
            clip: spec.params.clip.iter().map(|&v| tape.leaf(&Tensor::scalar(v))).collect(),
            round: spec.params.round.iter().map(|&v| tape.leaf(&Tensor::scalar(v))).collect(),
        }
    }
}

/// Wire the full quantizer into the tape: forward emits the denormalized
/// quantized value; backward runs the exact denormalize derivative, the
/// surrogate round rule, and the exact clip derivative, producing gradients
/// for the input and every trainable parameter.
///
/// The forward value never depends on the estimator; forward family and
/// backward rule pair freely.
pub fn attach_quantizer(
    tape: &Tape,
    x: &Tensor,
    spec: &QuantizerSpec,
    est: &GradientEstimator,
    step: u64,
    leaves: Option<&ParamLeaves>,
) -> Result<Tensor> {
    est.validate()?;
    // The leaves carry the live parameter values; fold them into the spec so
    // forward and backward see what the optimizer last wrote.
    let mut eff = spec.clone();
    if let Some(leaves) = leaves {
        if leaves.clip.len() != spec.params.clip.len()
            || leaves.round.len() != spec.params.round.len()
        {
            return Err(Error::InvalidArgument(
                "quantizer leaves do not match the spec's parameter counts".into(),
            ));
        }
        eff.params.clip = leaves.clip.iter().map(|t| t.item()).collect();
        eff.params.round = leaves.round.iter().map(|t| t.item()).collect();
    }
    eff.validate()?;

    let mut inputs: Vec<&Tensor> = vec![x];
    if let Some(leaves) = leaves {
        inputs.extend(leaves.clip.iter());
        inputs.extend(leaves.round.iter());
    }
    let with_params = leaves.is_some();

    let spec_fwd = eff.clone();
    let spec_bwd = eff;
    let est = est.clone();

    tape.custom_vjp(
        "quantize",
        &inputs,
        move |vals| {
            let (out, cache) = quantize_forward(&vals[0], &spec_fwd)?;
            Ok((out, vec![cache.x, cache.x_c, cache.x_q]))
        },
        Rc::new(move |saved: &[Tensor], upstream: &Tensor| {
            let cache = QuantCache {
                x: saved[0].detached(),
                x_c: saved[1].detached(),
                x_q: saved[2].detached(),
            };
            let (g_xq, denorm_grads) = denorm_backward(upstream, &cache.x_q, &spec_bwd);
            let g_xc = quantize_backward(&g_xq, &cache, &est, step)?;
            let (g_x, clip_grads) = clip_backward(&g_xc, &cache, &spec_bwd)?;

            let mut grads = vec![g_x];
            if with_params {
                for i in 0..spec_bwd.params.clip.len() {
                    grads.push(Tensor::scalar(clip_grads.clip[i] + denorm_grads.clip[i]));
                }
                // LSQ convention: scale the step-size gradient by
                // 1/sqrt(N * Qp) to keep its magnitude commensurate with the
                // weight gradients.
                let (_, qp) = spec_bwd.integer_bounds();
                let scale = 1.0 / ((cache.x.numel() as f64 * qp.max(1.0)).sqrt());
                for i in 0..spec_bwd.params.round.len() {
                    let g = clip_grads.round[i] + denorm_grads.round[i];
                    let g = if spec_bwd.family == QuantizerFamily::Lsq { g * scale } else { g };
                    grads.push(Tensor::scalar(g));
                }
            }
            Ok(grads)
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff::{assert_close, finite_difference};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn uniform01(bits: u32) -> QuantizerSpec {
        QuantizerSpec::uniform(bits, 0.0, 1.0, QuantTarget::Activations).unwrap()
    }

    fn pact(bits: u32, p1: f64) -> QuantizerSpec {
        let mut spec =
            QuantizerSpec::new(QuantizerFamily::Pact, bits, 0.0, 1.0, QuantTarget::Activations)
                .unwrap();
        spec.params.clip = vec![p1];
        spec
    }

    fn lsq(bits: u32, q1: f64, target: QuantTarget) -> QuantizerSpec {
        let mut spec = QuantizerSpec::new(QuantizerFamily::Lsq, bits, 0.0, 1.0, target).unwrap();
        spec.params.round = vec![q1];
        spec
    }

    fn dorefa_w(bits: u32) -> QuantizerSpec {
        QuantizerSpec::new(QuantizerFamily::DorefaWeight, bits, -1.0, 1.0, QuantTarget::Weights)
            .unwrap()
    }

    #[test]
    fn clip_uniform_clamps_then_normalizes() {
        let spec = uniform01(2);
        let x = Tensor::from_vec(vec![-0.5, 0.3, 1.2]);
        let c = clip_forward(&x, &spec).unwrap();
        assert_close(c.data(), &[0.0, 0.3, 1.0], 1e-15, 1e-15);
    }

    #[test]
    fn clip_pact_saturates_at_clipping_level() {
        let spec = pact(2, 1.0);
        let c = clip_forward(&Tensor::from_vec(vec![1.2]), &spec).unwrap();
        assert_eq!(c.data(), &[1.0]);
    }

    #[test]
    fn clip_dorefa_single_element_hits_endpoint() {
        let spec = dorefa_w(2);
        let c = clip_forward(&Tensor::from_vec(vec![0.7]), &spec).unwrap();
        assert_eq!(c.data(), &[1.0]);
    }

    #[test]
    fn clip_rejects_bad_parameters() {
        let spec = pact(2, 0.0);
        assert!(clip_forward(&Tensor::from_vec(vec![0.5]), &spec).is_err());
        let spec = lsq(2, -0.1, QuantTarget::Activations);
        assert!(clip_forward(&Tensor::from_vec(vec![0.5]), &spec).is_err());
        let spec = dorefa_w(2);
        let err = clip_forward(&Tensor::from_vec(vec![0.0, 0.0]), &spec).unwrap_err();
        assert!(err.to_string().contains("degenerate weight tensor"));
    }

    #[test]
    fn level_grid() {
        assert_eq!(levels(&uniform01(1)), vec![0.0, 1.0]);
        let l2 = levels(&uniform01(2));
        assert_close(&l2, &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0], 1e-15, 0.0);
        for b in 1..=8 {
            assert_eq!(levels(&uniform01(b)).len(), 1 << b);
        }
    }

    #[test]
    fn round_examples() {
        // b=2: 0.3 * 3 rounds to 1 -> 1/3.
        let spec = uniform01(2);
        let y = round_forward(&Tensor::from_vec(vec![0.3]), &spec).unwrap();
        assert_close(y.data(), &[1.0 / 3.0], 1e-15, 0.0);

        // b=1 tie at 0.5 rounds to even (0).
        let spec = uniform01(1);
        let y = round_forward(&Tensor::from_vec(vec![0.5]), &spec).unwrap();
        assert_eq!(y.data(), &[0.0]);

        // DoReFa weight endpoint: normalized 1 denormalizes to 1.
        let spec = dorefa_w(2);
        let y = round_forward(&Tensor::from_vec(vec![1.0]), &spec).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn round_rejects_out_of_range_input() {
        let spec = uniform01(2);
        assert!(round_forward(&Tensor::from_vec(vec![1.1]), &spec).is_err());
        assert!(round_forward(&Tensor::from_vec(vec![-0.1]), &spec).is_err());
        // Float-noise excursions are tolerated.
        assert!(round_forward(&Tensor::from_vec(vec![1.0 + 5e-13]), &spec).is_ok());
    }

    #[test]
    fn quantize_forward_composes_clip_and_round() {
        let spec = uniform01(2);
        let (y, cache) = quantize_forward(&Tensor::from_vec(vec![-0.5, 0.3, 1.2]), &spec).unwrap();
        assert_close(y.data(), &[0.0, 1.0 / 3.0, 1.0], 1e-15, 0.0);
        assert_eq!(cache.x.data(), &[-0.5, 0.3, 1.2]);
        assert_close(cache.x_c.data(), &[0.0, 0.3, 1.0], 1e-15, 0.0);
    }

    #[test]
    fn levels_are_fixed_points_at_b8() {
        let spec = uniform01(8);
        let grid = denorm_levels(&spec);
        let x = Tensor::from_vec(grid.clone());
        let (y, _) = quantize_forward(&x, &spec).unwrap();
        assert_eq!(y.data(), grid.as_slice());
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for bits in [1, 2, 4, 8] {
            for spec in [
                QuantizerSpec::uniform(bits, -1.0, 1.0, QuantTarget::Weights).unwrap(),
                uniform01(bits),
                pact(bits, 0.8),
                lsq(bits, 0.07, QuantTarget::Weights),
            ] {
                let x = Tensor::from_vec((0..64).map(|_| rng.gen_range(-2.0..2.0)).collect());
                let (y1, _) = quantize_forward(&x, &spec).unwrap();
                let (y2, _) = quantize_forward(&y1, &spec).unwrap();
                assert_eq!(y1.data(), y2.data(), "bits={bits} {:?}", spec.family);
            }
        }
    }

    #[test]
    fn quantize_output_is_in_denormalized_level_set() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for bits in [1, 3, 8] {
            for spec in
                [uniform01(bits), dorefa_w(bits), pact(bits, 1.3), lsq(bits, 0.11, QuantTarget::Activations)]
            {
                let grid = denorm_levels(&spec);
                let x = Tensor::from_vec((0..128).map(|_| rng.gen_range(-2.0..2.0)).collect());
                let (y, _) = quantize_forward(&x, &spec).unwrap();
                for &v in y.data() {
                    assert!(
                        grid.iter().any(|&l| l == v),
                        "{v} not an exact level for bits={bits} {:?}",
                        spec.family
                    );
                }
            }
        }
    }

    #[test]
    fn quantize_is_monotone_for_uniform_and_pact() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for spec in [uniform01(2), uniform01(4), pact(2, 0.9), pact(4, 0.9)] {
            for _ in 0..200 {
                let a: f64 = rng.gen_range(-1.0..2.0);
                let b: f64 = rng.gen_range(-1.0..2.0);
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let (y, _) =
                    quantize_forward(&Tensor::from_vec(vec![lo, hi]), &spec).unwrap();
                assert!(y.data()[0] <= y.data()[1]);
            }
        }
    }

    #[test]
    fn ste_passes_upstream_unchanged() {
        let spec = uniform01(2);
        let (_, cache) = quantize_forward(&Tensor::from_vec(vec![0.5]), &spec).unwrap();
        let g = quantize_backward(&Tensor::from_vec(vec![0.5]), &cache, &GradientEstimator::ste(), 0)
            .unwrap();
        assert_eq!(g.data(), &[0.5]);
    }

    #[test]
    fn additive_rule_matches_closed_form() {
        // mu=1, diff=0.1, upstream 0.5 -> 0.6.
        let cache = QuantCache {
            x: Tensor::from_vec(vec![0.0]),
            x_c: Tensor::from_vec(vec![0.4333]),
            x_q: Tensor::from_vec(vec![0.3333]),
        };
        let g = quantize_backward(
            &Tensor::from_vec(vec![0.5]),
            &cache,
            &GradientEstimator::additive(1.0),
            0,
        )
        .unwrap();
        assert_close(g.data(), &[0.6], 1e-12, 1e-12);

        // mu=2, upstream [0,-1], diff [0.05,-0.05] -> [0.1, -1.1].
        let cache = QuantCache {
            x: Tensor::from_vec(vec![0.0, 0.0]),
            x_c: Tensor::from_vec(vec![0.55, 0.45]),
            x_q: Tensor::from_vec(vec![0.5, 0.5]),
        };
        let g = quantize_backward(
            &Tensor::from_vec(vec![0.0, -1.0]),
            &cache,
            &GradientEstimator::additive(2.0),
            0,
        )
        .unwrap();
        assert_close(g.data(), &[0.1, -1.1], 1e-12, 1e-12);
    }

    #[test]
    fn additive_with_mu_zero_is_bit_identical_to_ste() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let spec = uniform01(4);
        for _ in 0..50 {
            let x = Tensor::from_vec((0..16).map(|_| rng.gen_range(-1.0..2.0)).collect());
            let up = Tensor::from_vec((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let (_, cache) = quantize_forward(&x, &spec).unwrap();
            let a = quantize_backward(&up, &cache, &GradientEstimator::ste(), 0).unwrap();
            let b = quantize_backward(&up, &cache, &GradientEstimator::additive(0.0), 0).unwrap();
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn quantize_backward_rejects_shape_mismatch() {
        let spec = uniform01(2);
        let (_, cache) = quantize_forward(&Tensor::from_vec(vec![0.5, 0.7]), &spec).unwrap();
        assert!(quantize_backward(
            &Tensor::from_vec(vec![1.0]),
            &cache,
            &GradientEstimator::ste(),
            0
        )
        .is_err());
    }

    #[test]
    fn normalized_discretization_error_is_bounded() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for bits in 1..=8u32 {
            let spec = uniform01(bits);
            let bound = 0.5 / ((1u32 << bits) - 1) as f64 + 1e-15;
            let x = Tensor::from_vec((0..256).map(|_| rng.gen_range(-0.5..1.5)).collect());
            let (_, cache) = quantize_forward(&x, &spec).unwrap();
            for (c, q) in cache.x_c.data().iter().zip(cache.x_q.data()) {
                assert!((c - q).abs() <= bound, "bits={bits}: |{c} - {q}| > {bound}");
            }
        }
    }

    #[test]
    fn clip_backward_uniform_interior_and_exterior() {
        let spec = QuantizerSpec::uniform(2, -1.0, 1.0, QuantTarget::Weights).unwrap();
        let x = Tensor::from_vec(vec![0.2, -2.0]);
        let (_, cache) = quantize_forward(&x, &spec).unwrap();
        let g = Tensor::from_vec(vec![1.0, 1.0]);
        let (gx, _) = clip_backward(&g, &cache, &spec).unwrap();
        // Interior: affine slope 1/(m-v) = 0.5; below v: gradient killed.
        assert_close(gx.data(), &[0.5, 0.0], 1e-15, 0.0);
    }

    #[test]
    fn pact_clip_level_gradient_matches_finite_difference() {
        // Scalar loss = sum of x_c; vary p1 around a fully clipped input.
        let x = Tensor::from_vec(vec![2.0]);
        let spec = pact(2, 1.0);
        let (_, cache) = quantize_forward(&x, &spec).unwrap();
        let (_, grads) = clip_backward(&Tensor::from_vec(vec![1.0]), &cache, &spec).unwrap();

        let f = |p: &Tensor| {
            let c = clip_forward(&x, &pact(2, p.item()))?;
            Ok(Tensor::scalar(c.data().iter().sum()))
        };
        let fd = finite_difference(&f, &Tensor::from_vec(vec![1.0]), 1e-4).unwrap();
        assert_close(&[grads.clip[0]], fd.data(), 1e-6, 1e-9);
    }

    #[test]
    fn clip_path_gradients_match_finite_differences_away_from_kinks() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let specs: Vec<QuantizerSpec> = vec![
            QuantizerSpec::uniform(3, -1.0, 1.0, QuantTarget::Weights).unwrap(),
            dorefa_w(3),
            pact(3, 0.9),
            lsq(3, 0.13, QuantTarget::Weights),
        ];
        for spec in specs {
            // Sample away from clip kinks.
            let x: Vec<f64> = (0..12)
                .map(|_| loop {
                    let v: f64 = rng.gen_range(-1.5..1.5);
                    if kink_distance(v, &spec) > 1e-2 {
                        break v;
                    }
                })
                .collect();
            let x = Tensor::from_vec(x);
            let weights = Tensor::from_vec((0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());

            // Loss = sum(w * x_c) seen as a function of x.
            let spec_f = spec.clone();
            let w2 = weights.clone();
            let f = move |xv: &Tensor| {
                let c = clip_forward(xv, &spec_f)?;
                Ok(Tensor::scalar(
                    c.data().iter().zip(w2.data()).map(|(&a, &b)| a * b).sum(),
                ))
            };
            let fd = finite_difference(&f, &x, 1e-5).unwrap();

            let (_, cache) = quantize_forward(&x, &spec).unwrap();
            let (gx, _) = clip_backward(&weights, &cache, &spec).unwrap();
            assert_close(gx.data(), fd.data(), 1e-4, 1e-8);
        }
    }

    fn kink_distance(v: f64, spec: &QuantizerSpec) -> f64 {
        match spec.family {
            QuantizerFamily::Uniform | QuantizerFamily::DorefaActivation => {
                (v - spec.lower).abs().min((v - spec.upper).abs())
            }
            QuantizerFamily::DorefaWeight => f64::INFINITY,
            QuantizerFamily::Pact => {
                let p1 = spec.params.clip[0];
                v.abs().min((v - p1).abs())
            }
            QuantizerFamily::Lsq => {
                let q1 = spec.params.round[0];
                let (qn, qp) = spec.integer_bounds();
                (v - qn * q1).abs().min((v - qp * q1).abs())
            }
        }
    }

    #[test]
    fn attach_ste_gives_unit_gradient_inside_range() {
        let tape = Tape::new();
        let spec = uniform01(4);
        let x = tape.leaf(&Tensor::from_vec(vec![0.3, 0.6, 0.9]));
        let y = attach_quantizer(&tape, &x, &spec, &GradientEstimator::ste(), 0, None).unwrap();
        let loss = tape.sum(&y).unwrap();
        let g = tape.backward(&loss).unwrap().wrt(&x);
        // Normalize slope 1/(m-v) and denormalize slope (m-v) cancel.
        assert_close(g.data(), &[1.0, 1.0, 1.0], 1e-15, 0.0);
    }

    #[test]
    fn estimator_changes_gradients_never_forward_values() {
        let spec = uniform01(3);
        let x0 = Tensor::from_vec(vec![0.21, 0.47, 0.83]);

        let run = |est: &GradientEstimator| {
            let tape = Tape::new();
            let x = tape.leaf(&x0);
            let y = attach_quantizer(&tape, &x, &spec, est, 0, None).unwrap();
            let loss = tape.sum(&y).unwrap();
            let g = tape.backward(&loss).unwrap().wrt(&x);
            (y.data().to_vec(), g.data().to_vec())
        };

        let (y_ste, g_ste) = run(&GradientEstimator::ste());
        let (y_add, g_add) = run(&GradientEstimator::additive(5.0));
        assert_eq!(y_ste, y_add, "forward must be estimator-independent");
        assert_ne!(g_ste, g_add, "estimators must differ in backward");
    }

    #[test]
    fn b8_quantization_error_is_within_half_step() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let tape = Tape::new();
        let spec = uniform01(8);
        let x = Tensor::from_vec((0..512).map(|_| rng.gen_range(0.0..1.0)).collect());
        let lx = tape.leaf(&x);
        let y = attach_quantizer(&tape, &lx, &spec, &GradientEstimator::ste(), 0, None).unwrap();
        let bound = 0.5 / 255.0 + 1e-15;
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= bound);
        }
    }

    #[test]
    fn eq1_additive_correction_is_exact_for_random_tensors() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for &mu in &[0.0, 0.1, 1.0, 10.0] {
            let est = GradientEstimator::additive(mu);
            for bits in [1, 2, 5, 8] {
                let spec = uniform01(bits);
                let x = Tensor::from_vec((0..32).map(|_| rng.gen_range(-0.2..1.2)).collect());
                let up = Tensor::from_vec((0..32).map(|_| rng.gen_range(-2.0..2.0)).collect());
                let (_, cache) = quantize_forward(&x, &spec).unwrap();
                let got = quantize_backward(&up, &cache, &est, 0).unwrap();
                for i in 0..32 {
                    let want =
                        up.data()[i] + mu * (cache.x_c.data()[i] - cache.x_q.data()[i]);
                    assert!((got.data()[i] - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn mu_schedules_resolve_per_step() {
        let mut est = GradientEstimator::additive(0.0);
        est.schedule =
            MuSchedule::LinearRamp { start_step: 10, end_step: 20, mu_final: 1.0 };
        assert_eq!(est.mu_at(0), 0.0);
        assert_eq!(est.mu_at(10), 0.0);
        assert!((est.mu_at(15) - 0.5).abs() < 1e-12);
        assert_eq!(est.mu_at(20), 1.0);
        assert_eq!(est.mu_at(1000), 1.0);

        let mut est = GradientEstimator::additive(0.5);
        est.schedule = MuSchedule::Curriculum { stages: vec![(5, 1.0), (10, 2.0)] };
        assert_eq!(est.mu_at(0), 0.5);
        assert_eq!(est.mu_at(5), 1.0);
        assert_eq!(est.mu_at(12), 2.0);
    }

    #[test]
    fn negative_mu_is_rejected() {
        assert!(GradientEstimator::additive(-1.0).validate().is_err());
        let mut est = GradientEstimator::additive(0.0);
        est.schedule = MuSchedule::LinearRamp { start_step: 0, end_step: 5, mu_final: -0.5 };
        assert!(est.validate().is_err());
    }

    #[test]
    fn attach_pact_clip_gradient_matches_hand_derivation() {
        // Loss = sum(quantize(x)) with STE. Under the product rule the p1
        // gradient is 1 per clipped element plus the rounding residual
        // x_qn - x/p1 per pass-region element.
        let x0 = Tensor::from_vec(vec![0.31, 0.77, 1.4, 2.2]);
        let est = GradientEstimator::ste();

        let tape = Tape::new();
        let spec = pact(4, 1.0);
        let lx = tape.leaf(&x0);
        let leaves = ParamLeaves::bind(&tape, &spec);
        let y = attach_quantizer(&tape, &lx, &spec, &est, 0, Some(&leaves)).unwrap();
        let loss = tape.sum(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        let gp = g.wrt(&leaves.clip[0]).item();

        // 0.31*15 rounds to 5, 0.77*15 rounds to 12; 1.4 and 2.2 are clipped.
        let expected = (5.0 / 15.0 - 0.31) + (12.0 / 15.0 - 0.77) + 1.0 + 1.0;
        assert_close(&[gp], &[expected], 1e-12, 1e-12);
    }
}
