//! Detection/regression loss terms with analytic gradients.
//!
//! The aggregate is
//!
//! ```text
//! L = α/N_total · Σ_pos L_cls(p, 1) + β/N_total · Σ_neg L_cls(p, 0)
//!   + γ/N_pos_reg · Σ_reg [ L_reg(u, u*) + L_reg(v, v*) + L_cls(h, h*) ]
//! ```
//!
//! Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`; the gradient of a
//! clamped input is zero.

use crate::anchors::{MatchResult, SampledAnchors};
use crate::box_codec::{encode_corners, encode_residual, CornerTargets, ResidualTargets};
use crate::error::{Error, Result};
use crate::geometry::OrientedBox3D;
use crate::par::pairwise_sum;

pub const PROB_EPS: f64 = 1e-7;

/// Smooth L1 switches from quadratic to linear at this |d|.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Classification loss used for the detection head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DetectionLoss {
    #[default]
    Bce,
    Focal,
}

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (c, c != p)
}

/// Binary cross-entropy; returns `(loss, dloss/dp)`.
pub fn bce(p: f64, t: f64) -> (f64, f64) {
    let (p, clamped) = clamp_prob(p);
    let loss = -t * p.ln() - (1.0 - t) * (1.0 - p).ln();
    let grad = if clamped { 0.0 } else { -t / p + (1.0 - t) / (1.0 - p) };
    (loss, grad)
}

/// Focal loss for a hard label `t ∈ {0, 1}`; returns `(loss, dloss/dp)`.
pub fn focal(p: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let (p, clamped) = clamp_prob(p);
    let (loss, grad) = if t >= 0.5 {
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * p.ln();
        let grad = alpha * gamma * q.powf(gamma - 1.0) * p.ln() - alpha * q.powf(gamma) / p;
        (loss, grad)
    } else {
        let a = 1.0 - alpha;
        let q = 1.0 - p;
        let loss = -a * p.powf(gamma) * q.ln();
        let grad = -a * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q);
        (loss, grad)
    };
    (loss, if clamped { 0.0 } else { grad })
}

/// Summed smooth L1 with its gradient w.r.t. `pred`.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Contract(format!("smooth_l1 length mismatch: {} vs {}", pred.len(), target.len())));
    }
    let mut terms = Vec::with_capacity(pred.len());
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        if d.abs() < SMOOTH_L1_BETA {
            terms.push(0.5 * d * d / SMOOTH_L1_BETA);
            grad.push(d / SMOOTH_L1_BETA);
        } else {
            terms.push(d.abs() - 0.5 * SMOOTH_L1_BETA);
            grad.push(d.signum());
        }
    }
    Ok((pairwise_sum(&terms), grad))
}

/// Per-anchor network outputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossActivations {
    pub det_probs: Vec<f64>,
    pub residuals: Vec<[f64; 9]>,
    pub corners: Vec<[f64; 8]>,
    pub dir_probs: Vec<f64>,
}

impl LossActivations {
    pub fn len(&self) -> usize {
        self.det_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.det_probs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTarget {
    pub anchor: usize,
    pub residual: ResidualTargets,
    pub corners: CornerTargets,
}

/// Sampled detection anchors plus regression targets for every
/// regression-positive anchor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTargets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub regression: Vec<RegressionTarget>,
}

/// Encodes residual and corner targets for each regression-positive anchor.
pub fn build_targets(anchors: &[OrientedBox3D], gts: &[OrientedBox3D], m: &MatchResult, sampled: &SampledAnchors) -> LossTargets {
    let regression = m
        .assignments
        .iter()
        .enumerate()
        .filter(|(_, a)| a.reg_positive)
        .filter_map(|(i, a)| a.gt.map(|g| (i, g)))
        .map(|(i, g)| RegressionTarget {
            anchor: i,
            residual: encode_residual(&gts[g], &anchors[i]),
            corners: encode_corners(&gts[g], &anchors[i]),
        })
        .collect();
    LossTargets {
        positives: sampled.positives.clone(),
        negatives: sampled.negatives.clone(),
        regression,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    /// Already divided by N_total (or N_pos_reg for the regression terms).
    pub pos_cls: f64,
    pub neg_cls: f64,
    pub reg_residual: f64,
    pub reg_corner: f64,
    pub direction: f64,
    pub total: f64,
    /// Set when no anchor is regression-positive; the regression term is zero.
    pub regression_empty: bool,
    pub grad_det: Vec<f64>,
    pub grad_residual: Vec<[f64; 9]>,
    pub grad_corner: Vec<[f64; 8]>,
    pub grad_dir: Vec<f64>,
}

fn check_index(i: usize, k: usize) -> Result<()> {
    if i >= k {
        return Err(Error::Contract(format!("anchor index {i} out of range for {k} anchors")));
    }
    Ok(())
}

pub fn total_loss(acts: &LossActivations, targets: &LossTargets, weights: &LossWeights, det_loss: DetectionLoss) -> Result<LossBreakdown> {
    let k = acts.len();
    if acts.residuals.len() != k || acts.corners.len() != k || acts.dir_probs.len() != k {
        return Err(Error::Contract("activation arrays differ in length".into()));
    }
    let cls = |p: f64, t: f64| match det_loss {
        DetectionLoss::Bce => bce(p, t),
        DetectionLoss::Focal => focal(p, t, weights.focal_alpha, weights.focal_gamma),
    };
    let mut out = LossBreakdown {
        grad_det: vec![0.0; k],
        grad_residual: vec![[0.0; 9]; k],
        grad_corner: vec![[0.0; 8]; k],
        grad_dir: vec![0.0; k],
        ..Default::default()
    };

    let n_total = (targets.positives.len() + targets.negatives.len()) as f64;
    if n_total > 0.0 {
        let mut pos_terms = Vec::with_capacity(targets.positives.len());
        for &i in &targets.positives {
            check_index(i, k)?;
            let (l, g) = cls(acts.det_probs[i], 1.0);
            pos_terms.push(l);
            out.grad_det[i] += weights.alpha * g / n_total;
        }
        let mut neg_terms = Vec::with_capacity(targets.negatives.len());
        for &i in &targets.negatives {
            check_index(i, k)?;
            let (l, g) = cls(acts.det_probs[i], 0.0);
            neg_terms.push(l);
            out.grad_det[i] += weights.beta * g / n_total;
        }
        out.pos_cls = pairwise_sum(&pos_terms) / n_total;
        out.neg_cls = pairwise_sum(&neg_terms) / n_total;
    }

    let n_reg = targets.regression.len() as f64;
    if n_reg == 0.0 {
        out.regression_empty = true;
    } else {
        let mut res_terms = Vec::with_capacity(targets.regression.len());
        let mut corner_terms = Vec::with_capacity(targets.regression.len());
        let mut dir_terms = Vec::with_capacity(targets.regression.len());
        let scale = weights.gamma / n_reg;
        for t in &targets.regression {
            let i = t.anchor;
            check_index(i, k)?;
            let (lr, gr) = smooth_l1(&acts.residuals[i], &t.residual.du)?;
            let (lc, gc) = smooth_l1(&acts.corners[i], &t.corners.dv)?;
            let (ld, gd) = bce(acts.dir_probs[i], t.residual.direction_target());
            res_terms.push(lr);
            corner_terms.push(lc);
            dir_terms.push(ld);
            for (slot, g) in out.grad_residual[i].iter_mut().zip(gr) {
                *slot += scale * g;
            }
            for (slot, g) in out.grad_corner[i].iter_mut().zip(gc) {
                *slot += scale * g;
            }
            out.grad_dir[i] += scale * gd;
        }
        out.reg_residual = pairwise_sum(&res_terms) / n_reg;
        out.reg_corner = pairwise_sum(&corner_terms) / n_reg;
        out.direction = pairwise_sum(&dir_terms) / n_reg;
    }

    out.total = weights.alpha * out.pos_cls + weights.beta * out.neg_cls + weights.gamma * (out.reg_residual + out.reg_corner + out.direction);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn bce_reference_values() {
        assert!((bce(0.5, 1.0).0 - LN_2).abs() < 1e-15);
        let (l, _) = bce(1.0 - 1e-7, 1.0);
        assert!((l - 1e-7).abs() < 1e-12);
        // clamped inputs stay finite
        assert!(bce(0.0, 1.0).0.is_finite());
        assert_eq!(bce(0.0, 1.0).1, 0.0);
    }

    #[test]
    fn focal_reference_values() {
        let (l, _) = focal(0.5, 1.0, 0.25, 2.0);
        assert!((l - 0.25 * 0.25 * LN_2).abs() < 1e-15);
        assert!((l - 0.043322).abs() < 1e-6);
        assert!(focal(1.0 - 1e-7, 1.0, 0.25, 2.0).0 < 1e-20);
        let (l0, _) = focal(0.5, 0.0, 0.25, 2.0);
        assert!((l0 - 0.75 * 0.25 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn smooth_l1_pieces() {
        assert_eq!(smooth_l1(&[0.0], &[0.0]).unwrap().0, 0.0);
        assert_eq!(smooth_l1(&[1.0], &[0.0]).unwrap().0, 0.5);
        assert_eq!(smooth_l1(&[2.5], &[0.0]).unwrap().0, 2.0);
        assert_eq!(smooth_l1(&[-2.5], &[0.0]).unwrap().1, vec![-1.0]);
        assert!(matches!(smooth_l1(&[1.0, 2.0], &[0.0]), Err(Error::Contract(_))));
    }

    fn toy() -> (LossActivations, LossTargets) {
        let mut residual = ResidualTargets::identity();
        residual.du[0] = 0.2;
        let corners = CornerTargets { dv: [0.1, 0.1, 0.1, 0.1, 0.0, 0.0, 0.0, 0.0] };
        let acts = LossActivations {
            det_probs: vec![0.8, 0.3],
            residuals: vec![[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]; 2],
            corners: vec![[0.0; 8]; 2],
            dir_probs: vec![0.9, 0.5],
        };
        let targets = LossTargets {
            positives: vec![0],
            negatives: vec![1],
            regression: vec![RegressionTarget { anchor: 0, residual, corners }],
        };
        (acts, targets)
    }

    #[test]
    fn two_anchor_hand_case() {
        let (acts, targets) = toy();
        let w = LossWeights::default();
        let out = total_loss(&acts, &targets, &w, DetectionLoss::Bce).unwrap();
        let l_pos = -(0.8f64).ln();
        let l_neg = -(0.7f64).ln();
        let l_res = 0.5 * 0.2 * 0.2;
        let l_corner = 4.0 * 0.5 * 0.01;
        let l_dir = -(0.9f64).ln();
        let want = l_pos / 2.0 + l_neg / 2.0 + 2.0 * (l_res + l_corner + l_dir);
        assert!((out.total - want).abs() < 1e-12, "{} vs {want}", out.total);
        let recomposed = w.alpha * out.pos_cls + w.beta * out.neg_cls + w.gamma * (out.reg_residual + out.reg_corner + out.direction);
        assert!((out.total - recomposed).abs() < 1e-12);
    }

    #[test]
    fn gamma_scales_regression_only() {
        let (acts, targets) = toy();
        let w = LossWeights::default();
        let a = total_loss(&acts, &targets, &w, DetectionLoss::Bce).unwrap();
        let b = total_loss(&acts, &targets, &LossWeights { gamma: 2.0 * w.gamma, ..w }, DetectionLoss::Bce).unwrap();
        let reg = a.reg_residual + a.reg_corner + a.direction;
        assert!((b.total - a.total - w.gamma * reg).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_near_zero() {
        let (mut acts, targets) = toy();
        acts.det_probs = vec![1.0, 0.0];
        acts.residuals[0] = targets.regression[0].residual.du;
        acts.corners[0] = targets.regression[0].corners.dv;
        acts.dir_probs[0] = 1.0;
        let out = total_loss(&acts, &targets, &LossWeights::default(), DetectionLoss::Bce).unwrap();
        assert!(out.total < 1e-6, "{}", out.total);
    }

    #[test]
    fn empty_regression_is_flagged() {
        let (acts, mut targets) = toy();
        targets.regression.clear();
        let out = total_loss(&acts, &targets, &LossWeights::default(), DetectionLoss::Focal).unwrap();
        assert!(out.regression_empty);
        assert_eq!(out.reg_residual, 0.0);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let (mut acts, targets) = toy();
        acts.dir_probs.pop();
        assert!(total_loss(&acts, &targets, &LossWeights::default(), DetectionLoss::Bce).is_err());
    }
}
