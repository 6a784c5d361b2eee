//! Reference implementations of the training objectives: weighted soft-DICE
//! and foreground / foreground+background cross-entropy, with exact analytic
//! gradients.
//!
//! Values accumulate in f64, sequentially within each class. The CE losses
//! clamp probabilities to `[EPS_P, 1 - EPS_P]` before logarithms and are
//! negated so that lower is better; gradients are the exact derivatives of
//! the clamped expressions (zero where the clamp saturates).

use crate::error::{Result, UqError};
use crate::volume::{LabelVolume, ProbVolume};

/// Probability clamp applied before logarithms.
pub const EPS_P: f64 = 1e-7;

/// Default smooth term of the soft-DICE ratio.
pub const DEFAULT_SMOOTH: f64 = 1e-5;

/// Per-class positive weights. [`class_weights`] normalizes so the mean
/// foreground weight is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    w: Vec<f64>,
}

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(UqError::InvalidArg("weights must be non-empty".into()));
        }
        if let Some(bad) = w.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
            return Err(UqError::Invariant(format!("class weights must be positive, got {bad}")));
        }
        Ok(ClassWeights { w })
    }

    pub fn uniform(classes: usize) -> Self {
        ClassWeights {
            w: vec![1.0; classes.max(1)],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        ClassWeights::new(self.w.iter().map(|w| w * k).collect())
    }
}

/// Inverse mean-voxel-count weights: `w_c = (1 / n_bar_c)` scaled so the
/// mean foreground weight is 1. Errors if any class is absent from every
/// volume, naming the class.
pub fn class_weights(gts: &[LabelVolume]) -> Result<ClassWeights> {
    let first = gts
        .first()
        .ok_or_else(|| UqError::InvalidArg("class_weights needs at least one volume".into()))?;
    let names = first.meta().class_names().to_vec();
    let c = names.len();
    if c < 2 {
        return Err(UqError::InvalidArg("class_weights needs at least one foreground class".into()));
    }
    let mut counts = vec![0u64; c];
    for gt in gts {
        if gt.meta().class_names() != names {
            return Err(UqError::MetaMismatch(
                "class_weights volumes must share one class list".into(),
            ));
        }
        for &v in gt.voxels() {
            counts[v as usize] += 1;
        }
    }
    let mut raw = vec![0.0f64; c];
    for (ci, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(UqError::InvalidArg(format!(
                "class {ci} ({:?}) is absent from all volumes",
                names[ci]
            )));
        }
        let mean_count = count as f64 / gts.len() as f64;
        raw[ci] = 1.0 / mean_count;
    }
    let mean_fg = raw[1..].iter().sum::<f64>() / (c - 1) as f64;
    ClassWeights::new(raw.iter().map(|r| r / mean_fg).collect())
}

/// Dense per-class tensor with values laid out `[c * voxels + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTensor {
    classes: usize,
    voxels: usize,
    values: Vec<f64>,
}

impl LossTensor {
    pub fn new(classes: usize, voxels: usize, values: Vec<f64>) -> Result<Self> {
        if classes == 0 || voxels == 0 {
            return Err(UqError::InvalidArg("loss tensors must be non-empty".into()));
        }
        if values.len() != classes * voxels {
            return Err(UqError::InvalidArg(format!(
                "tensor has {} values, {classes} x {voxels} required",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(UqError::Invariant("loss tensor values must be finite".into()));
        }
        Ok(LossTensor {
            classes,
            voxels,
            values,
        })
    }

    pub fn from_prob(v: &ProbVolume) -> Self {
        let voxels = v.meta().voxel_count();
        let classes = v.meta().num_classes();
        let mut values = Vec::with_capacity(classes * voxels);
        for ch in v.channels() {
            values.extend(ch.iter().map(|&x| x as f64));
        }
        LossTensor {
            classes,
            voxels,
            values,
        }
    }

    /// One-hot encoding of a label volume, one binary map per class.
    pub fn from_labels_onehot(v: &LabelVolume) -> Self {
        let voxels = v.meta().voxel_count();
        let classes = v.meta().num_classes();
        let mut values = vec![0.0f64; classes * voxels];
        for (i, &label) in v.voxels().iter().enumerate() {
            values[label as usize * voxels + i] = 1.0;
        }
        LossTensor {
            classes,
            voxels,
            values,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn voxels(&self) -> usize {
        self.voxels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn class_slice(&self, c: usize) -> &[f64] {
        &self.values[c * self.voxels..(c + 1) * self.voxels]
    }
}

/// Loss value plus the exact gradient with respect to every probability.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    pub gradient: LossTensor,
}

fn check_pair(prob: &LossTensor, gt: &LossTensor) -> Result<()> {
    if prob.classes != gt.classes || prob.voxels != gt.voxels {
        return Err(UqError::InvalidArg(format!(
            "shape mismatch: prob {}x{}, gt {}x{}",
            prob.classes, prob.voxels, gt.classes, gt.voxels
        )));
    }
    if gt.values.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(UqError::InvalidArg("gt tensor must be binary (0 or 1)".into()));
    }
    Ok(())
}

fn check_weights(prob: &LossTensor, weights: &ClassWeights) -> Result<()> {
    if weights.w.len() != prob.classes {
        return Err(UqError::InvalidArg(format!(
            "{} weights for {} classes",
            weights.w.len(),
            prob.classes
        )));
    }
    Ok(())
}

/// `L = 1 - (1/C) * sum_c w_c * DICE_c` with
/// `DICE_c = (2 sum_i P Y + smooth) / (sum_i P + sum_i Y + smooth)`.
pub fn soft_dice_loss(
    prob: &LossTensor,
    gt: &LossTensor,
    weights: &ClassWeights,
    smooth: f64,
) -> Result<LossEval> {
    check_pair(prob, gt)?;
    check_weights(prob, weights)?;
    if !(smooth >= 0.0) {
        return Err(UqError::InvalidArg(format!("smooth must be >= 0, got {smooth}")));
    }
    let c = prob.classes;
    let n = prob.voxels;
    let inv_c = 1.0 / c as f64;
    let mut value = 1.0f64;
    let mut grad = vec![0.0f64; c * n];
    for ci in 0..c {
        let p = prob.class_slice(ci);
        let y = gt.class_slice(ci);
        let mut sum_p = 0.0f64;
        let mut sum_y = 0.0f64;
        let mut sum_py = 0.0f64;
        for i in 0..n {
            sum_p += p[i];
            sum_y += y[i];
            sum_py += p[i] * y[i];
        }
        let num = 2.0 * sum_py + smooth;
        let den = sum_p + sum_y + smooth;
        if den == 0.0 {
            return Err(UqError::InvalidArg(format!(
                "soft dice denominator is zero for class {ci} (use smooth > 0 for empty masks)"
            )));
        }
        let dice = num / den;
        value -= inv_c * weights.w[ci] * dice;
        let g = &mut grad[ci * n..(ci + 1) * n];
        let scale = -inv_c * weights.w[ci] / (den * den);
        for i in 0..n {
            g[i] = scale * (2.0 * y[i] * den - num);
        }
    }
    Ok(LossEval {
        value,
        gradient: LossTensor::new(c, n, grad)?,
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CeKind {
    ForegroundOnly,
    ForegroundAndBackground,
}

fn ce_loss(prob: &LossTensor, gt: &LossTensor, weights: &ClassWeights, kind: CeKind) -> Result<LossEval> {
    check_pair(prob, gt)?;
    check_weights(prob, weights)?;
    let c = prob.classes;
    let n = prob.voxels;
    let inv_c = 1.0 / c as f64;
    let mut value = 0.0f64;
    let mut grad = vec![0.0f64; c * n];
    for ci in 0..c {
        let p = prob.class_slice(ci);
        let y = gt.class_slice(ci);
        let w = weights.w[ci];
        let mut sum = 0.0f64;
        let g = &mut grad[ci * n..(ci + 1) * n];
        for i in 0..n {
            let clamped = p[i].clamp(EPS_P, 1.0 - EPS_P);
            let inside = p[i] > EPS_P && p[i] < 1.0 - EPS_P;
            if y[i] == 1.0 {
                sum += clamped.ln();
                if inside {
                    g[i] = -inv_c * w / clamped;
                }
            } else if kind == CeKind::ForegroundAndBackground {
                sum += (1.0 - clamped).ln();
                if inside {
                    g[i] = inv_c * w / (1.0 - clamped);
                }
            }
        }
        value -= inv_c * w * sum;
    }
    Ok(LossEval {
        value,
        gradient: LossTensor::new(c, n, grad)?,
    })
}

/// Modified CE: penalizes foreground and background of every class map,
/// `L = -(1/C) sum_c w_c (sum_{Y=1} ln P + sum_{Y=0} ln(1 - P))`.
pub fn modified_ce_loss(prob: &LossTensor, gt: &LossTensor, weights: &ClassWeights) -> Result<LossEval> {
    ce_loss(prob, gt, weights, CeKind::ForegroundAndBackground)
}

/// Standard CE: the foreground term only.
pub fn basic_ce_loss(prob: &LossTensor, gt: &LossTensor, weights: &ClassWeights) -> Result<LossEval> {
    ce_loss(prob, gt, weights, CeKind::ForegroundOnly)
}

/// Central finite-difference gradient of `f` at `at` with step `h`.
pub fn finite_difference_gradient<F>(f: F, at: &LossTensor, h: f64) -> Result<LossTensor>
where
    F: Fn(&LossTensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(UqError::InvalidArg(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut x = at.clone();
    let mut grad = vec![0.0f64; at.values.len()];
    for i in 0..at.values.len() {
        let orig = x.values[i];
        x.values[i] = orig + h;
        let up = f(&x)?;
        x.values[i] = orig - h;
        let down = f(&x)?;
        x.values[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    LossTensor::new(at.classes, at.voxels, grad)
}

/// Max relative error between an analytic gradient and central finite
/// differences, skipping coordinates where the CE clamp saturates within
/// the stencil (the clamped loss is not differentiable there).
pub fn max_fd_relative_error<F>(f: F, at: &LossTensor, analytic: &LossTensor, h: f64) -> Result<f64>
where
    F: Fn(&LossTensor) -> Result<f64>,
{
    let fd = finite_difference_gradient(f, at, h)?;
    let mut worst = 0.0f64;
    for i in 0..at.values.len() {
        let p = at.values[i];
        if p < EPS_P + 2.0 * h || p > 1.0 - EPS_P - 2.0 * h {
            continue;
        }
        let a = analytic.values[i];
        let b = fd.values[i];
        let denom = a.abs().max(b.abs()).max(1e-12);
        worst = worst.max((a - b).abs() / denom);
    }
    Ok(worst)
}
