//! Training losses with analytic gradients: sigmoid focal loss, Smooth L1
//! with a fixed or self-adjusting control point, and per-class mask BCE.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Element;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
    /// Initial foreground probability encoded in the classifier bias.
    pub prior_prob: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
            prior_prob: 0.01,
        }
    }
}

impl FocalParams {
    /// Logit whose sigmoid equals `prior_prob`.
    pub fn prior_bias(&self) -> f64 {
        -((1.0 - self.prior_prob) / self.prior_prob).ln()
    }
}

/// Classification target of one anchor row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClsTarget {
    Background,
    Class(usize),
    /// Excluded from the loss entirely.
    Ignore,
}

/// Focal loss of one logit. `positive` says whether the class is the target.
/// Returns `(loss, d loss / d logit)`.
pub fn focal_term(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if positive {
        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let q = 1.0 - p;
        let mod_ = q.powf(gamma);
        let loss = -alpha * mod_ * pc.ln();
        let mut grad = alpha * gamma * p * mod_ * pc.ln();
        if pc == p {
            grad -= alpha * mod_ * q;
        }
        (loss, grad)
    } else {
        let q = 1.0 - p;
        let qc = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let mod_ = p.powf(gamma);
        let loss = -(1.0 - alpha) * mod_ * qc.ln();
        let mut grad = -(1.0 - alpha) * gamma * mod_ * q * qc.ln();
        if qc == q {
            grad += (1.0 - alpha) * mod_ * p;
        }
        (loss, grad)
    }
}

pub fn count_positives(targets: &[ClsTarget]) -> usize {
    targets
        .iter()
        .filter(|t| matches!(t, ClsTarget::Class(_)))
        .count()
}

/// Sigmoid focal loss over `[A, C]` logits, summed over anchors and classes
/// and divided by `max(1, number of positive anchors)`.
pub fn focal_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[ClsTarget],
    params: &FocalParams,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(shape_err!(
            "focal loss expects [{}, C] logits, got {:?}",
            targets.len(),
            shape
        ));
    }
    let classes = shape[1];
    if let Some(bad) = targets.iter().find_map(|t| match t {
        ClsTarget::Class(c) if *c >= classes => Some(*c),
        _ => None,
    }) {
        return Err(invalid!("target class {} out of range for {} classes", bad, classes));
    }
    let norm = count_positives(targets).max(1) as f64;
    let (alpha, gamma) = (params.alpha, params.gamma);
    let z = g.value(logits);
    let mut total = 0.0;
    let mut grad = vec![T::zero(); z.len()];
    for (row, target) in targets.iter().enumerate() {
        if *target == ClsTarget::Ignore {
            continue;
        }
        for c in 0..classes {
            let i = row * classes + c;
            let positive = *target == ClsTarget::Class(c);
            let (l, d) = focal_term(z[i].as_f64(), positive, alpha, gamma);
            total += l;
            grad[i] = T::from_f64_lossy(d / norm);
        }
    }
    g.count_ops(8 * z.len() as u64);
    g.record(
        &[logits],
        Vec::new(),
        vec![T::from_f64_lossy(total / norm)],
        move |_: &[&[T]], _: &[T], go: &[T], _: &[bool]| {
            vec![Some(grad.iter().map(|&v| v * go[0]).collect())]
        },
    )
}

/// Smooth L1 of a single residual. `beta == 0` is plain L1.
pub fn smooth_l1_value(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_derivative(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum of Smooth L1 over every element of `residual`.
pub fn smooth_l1<T: Element>(g: &mut Graph<T>, residual: Var, beta: f64) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(invalid!("smooth L1 control point must be non-negative, got {beta}"));
    }
    let n = g.numel(residual);
    smooth_l1_columns(g, residual, &[beta], 1.0, n.max(1))
}

/// Smooth L1 over the rows of a `[P, 4]` residual, one control point per
/// column, divided by `normalizer`.
pub fn smooth_l1_per_channel<T: Element>(
    g: &mut Graph<T>,
    residual: Var,
    betas: &[f64; 4],
    normalizer: f64,
) -> Result<Var> {
    let shape = g.shape(residual);
    if shape.len() != 2 || shape[1] != 4 {
        return Err(shape_err!("expected [P, 4] residuals, got {:?}", shape));
    }
    smooth_l1_columns(g, residual, betas, normalizer, 4)
}

fn smooth_l1_columns<T: Element>(
    g: &mut Graph<T>,
    residual: Var,
    betas: &[f64],
    normalizer: f64,
    width: usize,
) -> Result<Var> {
    let x = g.value(residual);
    let betas_at = |i: usize| betas[(i % width) % betas.len()];
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        let (v, b) = (v.as_f64(), betas_at(i));
        total += smooth_l1_value(v, b);
        grad.push(T::from_f64_lossy(smooth_l1_derivative(v, b) / normalizer));
    }
    g.count_ops(4 * x.len() as u64);
    g.record(
        &[residual],
        Vec::new(),
        vec![T::from_f64_lossy(total / normalizer)],
        move |_: &[&[T]], _: &[T], go: &[T], _: &[bool]| {
            vec![Some(grad.iter().map(|&v| v * go[0]).collect())]
        },
    )
}

pub const REG_CHANNELS: [&str; 4] = ["dx", "dy", "dw", "dh"];

/// Running statistics of absolute regression residuals and the control
/// point derived from them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfAdjustState {
    pub running_mean: [f64; 4],
    pub running_var: [f64; 4],
    pub momentum: f64,
    pub beta_hat: f64,
    pub shared_channels: bool,
}

impl Default for SelfAdjustState {
    fn default() -> Self {
        SelfAdjustState::new(0.11, false)
    }
}

impl SelfAdjustState {
    pub fn new(beta_hat: f64, shared_channels: bool) -> Self {
        SelfAdjustState {
            running_mean: [0.0; 4],
            running_var: [0.0; 4],
            momentum: 0.9,
            beta_hat,
            shared_channels,
        }
    }

    pub fn beta(&self, channel: usize) -> f64 {
        (self.running_mean[channel] - self.running_var[channel])
            .min(self.beta_hat)
            .max(0.0)
    }

    pub fn betas(&self) -> [f64; 4] {
        std::array::from_fn(|c| self.beta(c))
    }

    /// Folds one batch of `[P, 4]` residuals (row-major) into the running
    /// statistics. An empty batch leaves them untouched.
    pub fn update(&mut self, residuals: &[f64]) {
        let p = residuals.len() / 4;
        if p == 0 {
            return;
        }
        let m = self.momentum;
        let mut fold = |c: usize, mean: f64, var: f64| {
            self.running_mean[c] = self.running_mean[c] * m + mean * (1.0 - m);
            self.running_var[c] = self.running_var[c] * m + var * (1.0 - m);
        };
        if self.shared_channels {
            let (mean, var) = abs_moments(residuals.iter().copied());
            (0..4).for_each(|c| fold(c, mean, var));
        } else {
            for c in 0..4 {
                let (mean, var) = abs_moments(residuals.iter().skip(c).step_by(4).copied());
                fold(c, mean, var);
            }
        }
    }

    /// Self-adjusting Smooth L1 over `[P, 4]` residuals, divided by
    /// `max(1, P)`. In training mode the statistics are updated from the
    /// batch first and the fresh control points are used. The control
    /// points carry no gradient.
    pub fn loss<T: Element>(&mut self, g: &mut Graph<T>, residual: Var, training: bool) -> Result<Var> {
        let shape = g.shape(residual).to_vec();
        if shape.len() != 2 || shape[1] != 4 {
            return Err(shape_err!("expected [P, 4] residuals, got {:?}", shape));
        }
        if training {
            let values: Vec<f64> = g.value(residual).iter().map(|v| v.as_f64()).collect();
            self.update(&values);
        }
        let normalizer = shape[0].max(1) as f64;
        smooth_l1_per_channel(g, residual, &self.betas(), normalizer)
    }
}

fn abs_moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.clone() {
        sum += v.abs();
        n += 1;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v.abs() - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var)
}

/// Binary cross-entropy of class-specific mask logits `[M, C, S, S]`.
/// Only the channel of each proposal's class is scored; the result is the
/// mean over proposals and pixels.
pub fn mask_bce<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[f32],
    classes: &[usize],
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 4 || shape[0] != classes.len() {
        return Err(shape_err!(
            "mask BCE expects [{}, C, S, S] logits, got {:?}",
            classes.len(),
            shape
        ));
    }
    let (m, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    if targets.len() != m * plane {
        return Err(shape_err!(
            "mask targets hold {} values, expected {}",
            targets.len(),
            m * plane
        ));
    }
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(invalid!("mask class {} out of range for {} channels", bad, c));
    }
    let norm = (m * plane).max(1) as f64;
    let z = g.value(logits);
    let mut total = 0.0;
    let mut grad = vec![T::zero(); z.len()];
    for (i, &k) in classes.iter().enumerate() {
        let base = (i * c + k) * plane;
        for p in 0..plane {
            let (zv, t) = (z[base + p].as_f64(), targets[i * plane + p] as f64);
            total += zv.max(0.0) - zv * t + (-zv.abs()).exp().ln_1p();
            grad[base + p] = T::from_f64_lossy((sigmoid(zv) - t) / norm);
        }
    }
    g.count_ops(6 * (m * plane) as u64);
    g.record(
        &[logits],
        Vec::new(),
        vec![T::from_f64_lossy(total / norm)],
        move |_: &[&[T]], _: &[T], go: &[T], _: &[bool]| {
            vec![Some(grad.iter().map(|&v| v * go[0]).collect())]
        },
    )
}

/// Per-step loss breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub mask_loss: f64,
    pub total: f64,
    pub beta_per_channel: [f64; 4],
    pub running_mean_per_channel: [f64; 4],
    pub num_positives: usize,
    /// Size of the mask proposal set (predictions plus injected ground truths).
    pub mask_proposals: usize,
    /// Proposals that overlap an object enough to carry a mask target.
    pub mask_targets: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.cls_loss, self.reg_loss, self.mask_loss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}
