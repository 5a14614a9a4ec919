//! Segmentation losses over masked supports, with analytic gradients.
//!
//! Dice and IoU are computed per foreground class (ring, cup) and averaged;
//! cross-entropy runs over all three classes. Every masked term evaluates to
//! exactly 0 on an empty support so a mask may fully cover one side of a
//! mixed image without poisoning the total. Hard labels (ground truth or
//! pseudo labels) never receive gradients; gradients flow only into the
//! probability maps.
//!
//! The `_grad` variants accumulate `scale * dLoss/dp` into a caller-provided
//! buffer laid out like the probability map, which lets the trainer combine
//! several weighted loss branches into one backward pass per forward.

use crate::image::NUM_CLASSES;
use crate::{BinaryMask, Error, LabelMap, ProbMap, Result};

/// Smoothing constant for Dice/IoU denominators.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Probabilities are clamped to [PROB_CLAMP, 1] inside the log.
pub const PROB_CLAMP: f64 = 1e-12;

const FG_CLASSES: [usize; 2] = [1, 2];

/// Tunable weights of the total loss and its components.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_t_stylized: f64,
    /// Linear weights of the IoU and CE parts of the hybrid pseudo-label
    /// loss; they sum to 1.
    pub ipl_iou_weight: f64,
    pub ipl_ce_weight: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 0.5,
            lambda_t: 0.5,
            lambda_t_stylized: 1.0,
            ipl_iou_weight: 0.5,
            ipl_ce_weight: 0.5,
            epsilon: DEFAULT_EPS,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_s,
            self.lambda_t,
            self.lambda_t_stylized,
            self.ipl_iou_weight,
            self.ipl_ce_weight,
            self.epsilon,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::DimensionMismatch(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if (self.ipl_iou_weight + self.ipl_ce_weight - 1.0).abs() > 1e-12 {
            return Err(Error::DimensionMismatch(
                "ipl weights must sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-iteration loss breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_source: f64,
    pub l_target: f64,
    pub l_stylized: f64,
    pub total: f64,
    pub gamma_values: Vec<f64>,
}

fn check_pair(p: &ProbMap, y: &LabelMap, support: Option<&BinaryMask>) -> Result<()> {
    if p.h() != y.h() || p.w() != y.w() {
        return Err(Error::DimensionMismatch(format!(
            "probability map {}x{} vs labels {}x{}",
            p.h(),
            p.w(),
            y.h(),
            y.w()
        )));
    }
    if let Some(s) = support {
        if s.h() != p.h() || s.w() != p.w() {
            return Err(Error::DimensionMismatch("support dimensions".into()));
        }
    }
    Ok(())
}

#[inline]
fn in_support(support: Option<&BinaryMask>, px: usize) -> bool {
    support.is_none_or(|s| s.bits()[px] == 1)
}

fn support_count(support: Option<&BinaryMask>, n_px: usize) -> usize {
    match support {
        None => n_px,
        Some(s) => s.popcount(),
    }
}

/// Foreground-averaged Dice: `1 - (2*sum(p*y) + eps)/(sum p + sum y + eps)`
/// per class over the support, averaged over ring and cup.
fn dice_fg_impl(
    p: &[f64],
    y: &LabelMap,
    support: Option<&BinaryMask>,
    eps: f64,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let n_px = y.data().len();
    if support_count(support, n_px) == 0 {
        return 0.0;
    }
    let class_w = 1.0 / FG_CLASSES.len() as f64;
    let mut total = 0.0;
    for &class in &FG_CLASSES {
        let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
        for px in 0..n_px {
            if in_support(support, px) {
                let yc = f64::from(y.data()[px] as usize == class);
                let pc = p[px * NUM_CLASSES + class];
                inter += pc * yc;
                psum += pc;
                ysum += yc;
            }
        }
        let num = 2.0 * inter + eps;
        let den = psum + ysum + eps;
        total += 1.0 - num / den;
        if let Some((g, scale)) = grad.as_mut() {
            let den_sq = den * den;
            for px in 0..n_px {
                if in_support(support, px) {
                    let yc = f64::from(y.data()[px] as usize == class);
                    // d/dp of (1 - num/den): num' = 2y, den' = 1.
                    let d = -(2.0 * yc * den - num) / den_sq;
                    g[px * NUM_CLASSES + class] += *scale * class_w * d;
                }
            }
        }
    }
    total * class_w
}

/// Foreground-averaged IoU: `1 - (sum(p*y) + eps)/(sum p + sum y - sum(p*y) + eps)`.
fn iou_fg_impl(
    p: &[f64],
    y: &LabelMap,
    support: Option<&BinaryMask>,
    eps: f64,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let n_px = y.data().len();
    if support_count(support, n_px) == 0 {
        return 0.0;
    }
    let class_w = 1.0 / FG_CLASSES.len() as f64;
    let mut total = 0.0;
    for &class in &FG_CLASSES {
        let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
        for px in 0..n_px {
            if in_support(support, px) {
                let yc = f64::from(y.data()[px] as usize == class);
                let pc = p[px * NUM_CLASSES + class];
                inter += pc * yc;
                psum += pc;
                ysum += yc;
            }
        }
        let num = inter + eps;
        let den = psum + ysum - inter + eps;
        total += 1.0 - num / den;
        if let Some((g, scale)) = grad.as_mut() {
            let den_sq = den * den;
            for px in 0..n_px {
                if in_support(support, px) {
                    let yc = f64::from(y.data()[px] as usize == class);
                    // num' = y, den' = 1 - y.
                    let d = -(yc * den - num * (1.0 - yc)) / den_sq;
                    g[px * NUM_CLASSES + class] += *scale * class_w * d;
                }
            }
        }
    }
    total * class_w
}

/// Mean cross-entropy `-log p[y]` over the support, with the probability
/// clamped to [1e-12, 1].
fn ce_impl(
    p: &[f64],
    y: &LabelMap,
    support: Option<&BinaryMask>,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let n_px = y.data().len();
    let n = support_count(support, n_px);
    if n == 0 {
        return 0.0;
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for px in 0..n_px {
        if in_support(support, px) {
            let class = y.data()[px] as usize;
            let pc = p[px * NUM_CLASSES + class];
            let clamped = pc.clamp(PROB_CLAMP, 1.0);
            total -= clamped.ln();
            if let Some((g, scale)) = grad.as_mut() {
                if pc > PROB_CLAMP && pc < 1.0 {
                    g[px * NUM_CLASSES + class] += *scale * (-inv_n / pc);
                }
            }
        }
    }
    total * inv_n
}

/// Dice + CE over one prediction and one support; the building block of the
/// mixed-image consistency losses.
fn dice_ce_impl(
    p: &[f64],
    y: &LabelMap,
    support: Option<&BinaryMask>,
    eps: f64,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let reborrow = grad.as_mut().map(|(g, s)| (&mut **g, *s));
    let d = dice_fg_impl(p, y, support, eps, reborrow);
    let c = ce_impl(p, y, support, grad);
    d + c
}

/// Hybrid pseudo-label loss: linear mix of IoU and CE.
fn ipl_impl(
    p: &[f64],
    y: &LabelMap,
    w: &LossWeights,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let g_iou = grad.as_mut().map(|(g, s)| (&mut **g, *s * w.ipl_iou_weight));
    let iou = iou_fg_impl(p, y, None, w.epsilon, g_iou);
    let g_ce = grad.map(|(g, s)| (g, s * w.ipl_ce_weight));
    let ce = ce_impl(p, y, None, g_ce);
    w.ipl_iou_weight * iou + w.ipl_ce_weight * ce
}

// ---- public value-level API ----

/// Dice loss on a single soft channel against a binary target, the raw
/// formula with no class averaging. `support` bits select the pixels.
pub fn dice_channel(p: &[f64], y: &[u8], support: Option<&[u8]>, eps: f64) -> f64 {
    debug_assert_eq!(p.len(), y.len());
    let included = |i: usize| support.is_none_or(|s| s[i] == 1);
    let mut n = 0usize;
    let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        if included(i) {
            n += 1;
            inter += p[i] * f64::from(y[i]);
            psum += p[i];
            ysum += f64::from(y[i]);
        }
    }
    if n == 0 {
        return 0.0;
    }
    1.0 - (2.0 * inter + eps) / (psum + ysum + eps)
}

/// IoU loss on a single soft channel against a binary target.
pub fn iou_channel(p: &[f64], y: &[u8], support: Option<&[u8]>, eps: f64) -> f64 {
    debug_assert_eq!(p.len(), y.len());
    let included = |i: usize| support.is_none_or(|s| s[i] == 1);
    let mut n = 0usize;
    let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        if included(i) {
            n += 1;
            inter += p[i] * f64::from(y[i]);
            psum += p[i];
            ysum += f64::from(y[i]);
        }
    }
    if n == 0 {
        return 0.0;
    }
    1.0 - (inter + eps) / (psum + ysum - inter + eps)
}

/// Foreground-averaged Dice loss between a probability map and labels.
pub fn dice_loss(
    p: &ProbMap,
    y: &LabelMap,
    support: Option<&BinaryMask>,
    eps: f64,
) -> Result<f64> {
    check_pair(p, y, support)?;
    Ok(dice_fg_impl(p.data(), y, support, eps, None))
}

/// Foreground-averaged IoU loss between a probability map and labels.
pub fn iou_loss(p: &ProbMap, y: &LabelMap, support: Option<&BinaryMask>, eps: f64) -> Result<f64> {
    check_pair(p, y, support)?;
    Ok(iou_fg_impl(p.data(), y, support, eps, None))
}

/// Mean cross-entropy between a probability map and labels.
pub fn ce_loss(p: &ProbMap, y: &LabelMap, support: Option<&BinaryMask>) -> Result<f64> {
    check_pair(p, y, support)?;
    Ok(ce_impl(p.data(), y, support, None))
}

/// Hybrid pseudo-label loss `ipl_iou_weight * IoU + ipl_ce_weight * CE`.
pub fn l_ipl(p: &ProbMap, y_pseudo: &LabelMap, w: &LossWeights) -> Result<f64> {
    check_pair(p, y_pseudo, None)?;
    Ok(ipl_impl(p.data(), y_pseudo, w, None))
}

fn check_grad_len(p: &ProbMap, grad: &[f64]) -> Result<()> {
    if grad.len() != p.data().len() {
        return Err(Error::DimensionMismatch(format!(
            "gradient buffer length {} != {}",
            grad.len(),
            p.data().len()
        )));
    }
    Ok(())
}

/// [`dice_loss`] that also adds `scale * dLoss/dp` into `grad`.
pub fn dice_loss_grad(
    p: &ProbMap,
    y: &LabelMap,
    support: Option<&BinaryMask>,
    eps: f64,
    grad: &mut [f64],
    scale: f64,
) -> Result<f64> {
    check_pair(p, y, support)?;
    check_grad_len(p, grad)?;
    Ok(dice_fg_impl(p.data(), y, support, eps, Some((grad, scale))))
}

/// [`iou_loss`] that also adds `scale * dLoss/dp` into `grad`.
pub fn iou_loss_grad(
    p: &ProbMap,
    y: &LabelMap,
    support: Option<&BinaryMask>,
    eps: f64,
    grad: &mut [f64],
    scale: f64,
) -> Result<f64> {
    check_pair(p, y, support)?;
    check_grad_len(p, grad)?;
    Ok(iou_fg_impl(p.data(), y, support, eps, Some((grad, scale))))
}

/// [`ce_loss`] that also adds `scale * dLoss/dp` into `grad`.
pub fn ce_loss_grad(
    p: &ProbMap,
    y: &LabelMap,
    support: Option<&BinaryMask>,
    grad: &mut [f64],
    scale: f64,
) -> Result<f64> {
    check_pair(p, y, support)?;
    check_grad_len(p, grad)?;
    Ok(ce_impl(p.data(), y, support, Some((grad, scale))))
}

/// [`l_ipl`] that also adds `scale * dLoss/dp` into `grad`.
pub fn l_ipl_grad(
    p: &ProbMap,
    y_pseudo: &LabelMap,
    w: &LossWeights,
    grad: &mut [f64],
    scale: f64,
) -> Result<f64> {
    check_pair(p, y_pseudo, None)?;
    check_grad_len(p, grad)?;
    Ok(ipl_impl(p.data(), y_pseudo, w, Some((grad, scale))))
}

/// Dice+CE pair on one prediction over one support, with optional gradient
/// accumulation; the building block the trainer composes variant losses from.
pub fn dice_ce_grad(
    p: &ProbMap,
    y: &LabelMap,
    support: Option<&BinaryMask>,
    eps: f64,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    check_pair(p, y, support)?;
    if let Some((g, _)) = &grad {
        check_grad_len(p, g)?;
    }
    Ok(dice_ce_impl(p.data(), y, support, eps, grad))
}

/// Mean over pixels of the per-pixel maximum class probability; in
/// [1/3, 1] for 3-class simplex maps, 1 iff the map is one-hot everywhere.
pub fn confidence_gamma(p: &ProbMap) -> f64 {
    let mut sum = 0.0;
    for px in p.data().chunks_exact(NUM_CLASSES) {
        sum += px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    sum / (p.h() * p.w()) as f64
}

/// Source-side consistency loss: Dice+CE of the first mixed prediction on
/// the mask support plus Dice+CE of the second on the complement.
pub fn l_source(
    y_i: &LabelMap,
    p_il: &ProbMap,
    y_j: &LabelMap,
    p_jk: &ProbMap,
    mask: &BinaryMask,
    w: &LossWeights,
) -> Result<f64> {
    l_source_grad(y_i, p_il, y_j, p_jk, mask, w, None)
}

/// [`l_source`] with gradient accumulation: adds `scale * d/dp_il` and
/// `scale * d/dp_jk` into the two buffers.
pub fn l_source_grad(
    y_i: &LabelMap,
    p_il: &ProbMap,
    y_j: &LabelMap,
    p_jk: &ProbMap,
    mask: &BinaryMask,
    w: &LossWeights,
    grads: Option<(&mut [f64], &mut [f64], f64)>,
) -> Result<f64> {
    check_pair(p_il, y_i, Some(mask))?;
    check_pair(p_jk, y_j, Some(mask))?;
    let complement = mask.complement();
    match grads {
        None => {
            let a = dice_ce_impl(p_il.data(), y_i, Some(mask), w.epsilon, None);
            let b = dice_ce_impl(p_jk.data(), y_j, Some(&complement), w.epsilon, None);
            Ok(a + b)
        }
        Some((g_il, g_jk, scale)) => {
            let a = dice_ce_impl(p_il.data(), y_i, Some(mask), w.epsilon, Some((g_il, scale)));
            let b = dice_ce_impl(
                p_jk.data(),
                y_j,
                Some(&complement),
                w.epsilon,
                Some((g_jk, scale)),
            );
            Ok(a + b)
        }
    }
}

/// Target-side consistency loss, confidence-weighted: `gamma_l * (Dice+CE)`
/// of the first mixed prediction against the hard target labels on the
/// complement support, plus `gamma_k * (Dice+CE)` of the second on the mask
/// support. Hard labels carry no gradient.
#[allow(clippy::too_many_arguments)]
pub fn l_target(
    p_l_hard: &LabelMap,
    p_il: &ProbMap,
    gamma_l: f64,
    p_k_hard: &LabelMap,
    p_jk: &ProbMap,
    gamma_k: f64,
    mask: &BinaryMask,
    w: &LossWeights,
) -> Result<f64> {
    l_target_grad(p_l_hard, p_il, gamma_l, p_k_hard, p_jk, gamma_k, mask, w, None)
}

/// [`l_target`] with gradient accumulation into the two mixed predictions.
#[allow(clippy::too_many_arguments)]
pub fn l_target_grad(
    p_l_hard: &LabelMap,
    p_il: &ProbMap,
    gamma_l: f64,
    p_k_hard: &LabelMap,
    p_jk: &ProbMap,
    gamma_k: f64,
    mask: &BinaryMask,
    w: &LossWeights,
    grads: Option<(&mut [f64], &mut [f64], f64)>,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma_l) || !(0.0..=1.0).contains(&gamma_k) {
        return Err(Error::DimensionMismatch(format!(
            "confidence weights ({gamma_l}, {gamma_k}) outside [0, 1]"
        )));
    }
    check_pair(p_il, p_l_hard, Some(mask))?;
    check_pair(p_jk, p_k_hard, Some(mask))?;
    let complement = mask.complement();
    match grads {
        None => {
            let a = dice_ce_impl(p_il.data(), p_l_hard, Some(&complement), w.epsilon, None);
            let b = dice_ce_impl(p_jk.data(), p_k_hard, Some(mask), w.epsilon, None);
            Ok(gamma_l * a + gamma_k * b)
        }
        Some((g_il, g_jk, scale)) => {
            let a = dice_ce_impl(
                p_il.data(),
                p_l_hard,
                Some(&complement),
                w.epsilon,
                Some((g_il, scale * gamma_l)),
            );
            let b = dice_ce_impl(
                p_jk.data(),
                p_k_hard,
                Some(mask),
                w.epsilon,
                Some((g_jk, scale * gamma_k)),
            );
            Ok(gamma_l * a + gamma_k * b)
        }
    }
}

/// Stylized-view supervision: sum of the hybrid losses between the teacher
/// pseudo labels and the student maps on the two raw target images.
pub fn l_stylized(
    y_tilde_l: &LabelMap,
    p_l_map: &ProbMap,
    y_tilde_k: &LabelMap,
    p_k_map: &ProbMap,
    w: &LossWeights,
) -> Result<f64> {
    l_stylized_grad(y_tilde_l, p_l_map, y_tilde_k, p_k_map, w, None)
}

/// [`l_stylized`] with gradient accumulation into the two student maps.
pub fn l_stylized_grad(
    y_tilde_l: &LabelMap,
    p_l_map: &ProbMap,
    y_tilde_k: &LabelMap,
    p_k_map: &ProbMap,
    w: &LossWeights,
    grads: Option<(&mut [f64], &mut [f64], f64)>,
) -> Result<f64> {
    check_pair(p_l_map, y_tilde_l, None)?;
    check_pair(p_k_map, y_tilde_k, None)?;
    match grads {
        None => {
            let a = ipl_impl(p_l_map.data(), y_tilde_l, w, None);
            let b = ipl_impl(p_k_map.data(), y_tilde_k, w, None);
            Ok(a + b)
        }
        Some((g_l, g_k, scale)) => {
            let a = ipl_impl(p_l_map.data(), y_tilde_l, w, Some((g_l, scale)));
            let b = ipl_impl(p_k_map.data(), y_tilde_k, w, Some((g_k, scale)));
            Ok(a + b)
        }
    }
}

/// Weighted total `lambda_S * L_S + lambda_T * L_T + lambda_T-stylized * L_T-stylized`.
pub fn total_loss(
    l_source: f64,
    l_target: f64,
    l_stylized: f64,
    gamma_values: Vec<f64>,
    w: &LossWeights,
) -> LossReport {
    let total =
        w.lambda_s * l_source + w.lambda_t * l_target + w.lambda_t_stylized * l_stylized;
    LossReport {
        l_source,
        l_target,
        l_stylized,
        total,
        gamma_values,
    }
}
