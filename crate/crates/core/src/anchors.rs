//! Anchor grids, IoU-threshold matching and balanced anchor sampling.

use std::f64::consts::FRAC_PI_2;

use rand::seq::index::sample as sample_indices;

use crate::error::{Error, Result};
use crate::geometry::{axis_aligned_bev_iou, OrientedBox3D};
use crate::par::{self, Execution};
use crate::seed::rng_from_seed;

/// Car anchor extents (l, w, h) and centroid height.
pub const CAR_ANCHOR_DIMS: [f64; 3] = [3.9, 1.6, 1.56];
pub const CAR_ANCHOR_Z: f64 = -1.0;

/// Detection positives must exceed this IoU.
pub const POS_DET_IOU: f64 = 0.6;
/// Detection negatives have IoU at or below this; regression positives exceed it.
pub const NEG_DET_IOU: f64 = 0.45;
pub const POS_REG_IOU: f64 = 0.45;

/// Default number of sampled detection anchors per patch.
pub const DEFAULT_N_TOTAL: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGridSpec {
    pub rows: usize,
    pub cols: usize,
    pub stride: f64,
    pub origin: [f64; 2],
    pub anchor_dims: [f64; 3],
    pub anchor_z: f64,
    pub orientations: Vec<f64>,
}

impl AnchorGridSpec {
    /// 32 × 32 grid over a 9.6 m patch centered on the origin, two headings.
    pub fn lrn() -> Self {
        Self {
            rows: 32,
            cols: 32,
            stride: 9.6 / 32.0,
            origin: [-4.8, -4.8],
            anchor_dims: CAR_ANCHOR_DIMS,
            anchor_z: CAR_ANCHOR_Z,
            orientations: vec![0.0, FRAC_PI_2],
        }
    }

    /// Same grid moved so its center sits at `(cx, cy)`.
    pub fn centered_at(&self, cx: f64, cy: f64) -> Self {
        let mut out = self.clone();
        out.origin = [cx - 0.5 * self.rows as f64 * self.stride, cy - 0.5 * self.cols as f64 * self.stride];
        out
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols * self.orientations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anchors in row-major order (x index, then y index), orientation-minor.
pub fn generate_anchors(spec: &AnchorGridSpec) -> Vec<OrientedBox3D> {
    let [l, w, h] = spec.anchor_dims;
    let mut out = Vec::with_capacity(spec.len());
    for i in 0..spec.rows {
        for j in 0..spec.cols {
            let cx = spec.origin[0] + (i as f64 + 0.5) * spec.stride;
            let cy = spec.origin[1] + (j as f64 + 0.5) * spec.stride;
            for &yaw in &spec.orientations {
                out.push(OrientedBox3D::new(cx, cy, spec.anchor_z, l, w, h, yaw));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetLabel {
    PositiveDet,
    NegativeDet,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorAssignment {
    pub det: DetLabel,
    pub reg_positive: bool,
    /// Best-overlapping gt (or the gt that forced this anchor positive).
    pub gt: Option<usize>,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub assignments: Vec<AnchorAssignment>,
}

impl MatchResult {
    pub fn positives(&self) -> Vec<usize> {
        self.indices(|a| a.det == DetLabel::PositiveDet)
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.indices(|a| a.det == DetLabel::NegativeDet)
    }

    pub fn reg_positives(&self) -> Vec<usize> {
        self.indices(|a| a.reg_positive)
    }

    fn indices(&self, pred: impl Fn(&AnchorAssignment) -> bool) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| pred(a))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Matching knobs; the defaults are the car setup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub pos_det: f64,
    pub neg_det: f64,
    pub pos_reg: f64,
    pub force_best_anchor: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            pos_det: POS_DET_IOU,
            neg_det: NEG_DET_IOU,
            pos_reg: POS_REG_IOU,
            force_best_anchor: true,
        }
    }
}

pub fn match_anchors(anchors: &[OrientedBox3D], gt_boxes: &[OrientedBox3D]) -> MatchResult {
    match_anchors_with(anchors, gt_boxes, &MatchConfig::default(), Execution::Sequential)
}

/// Axis-aligned BEV matching of each anchor against every gt.
pub fn match_anchors_with(anchors: &[OrientedBox3D], gt_boxes: &[OrientedBox3D], cfg: &MatchConfig, exec: Execution) -> MatchResult {
    // rows: anchors, columns: gts
    let ious: Vec<Vec<f64>> = par::map_collect(exec, anchors, |a| gt_boxes.iter().map(|g| axis_aligned_bev_iou(g, a)).collect());
    let mut assignments: Vec<AnchorAssignment> = ious
        .iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &v) in row.iter().enumerate() {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            let iou = best.map_or(0.0, |(_, v)| v);
            let det = if iou > cfg.pos_det {
                DetLabel::PositiveDet
            } else if iou <= cfg.neg_det {
                DetLabel::NegativeDet
            } else {
                DetLabel::Ignore
            };
            AnchorAssignment {
                det,
                reg_positive: iou > cfg.pos_reg,
                gt: best.filter(|&(_, v)| v > 0.0).map(|(g, _)| g),
                iou,
            }
        })
        .collect();
    if cfg.force_best_anchor {
        for g in 0..gt_boxes.len() {
            let mut best: Option<(usize, f64)> = None;
            for (a, row) in ious.iter().enumerate() {
                if row[g] > 0.0 && best.is_none_or(|(_, b)| row[g] > b) {
                    best = Some((a, row[g]));
                }
            }
            if let Some((a, v)) = best {
                let slot = &mut assignments[a];
                if slot.det != DetLabel::PositiveDet {
                    *slot = AnchorAssignment {
                        det: DetLabel::PositiveDet,
                        reg_positive: true,
                        gt: Some(g),
                        iou: v,
                    };
                }
            }
        }
    }
    MatchResult { assignments }
}

/// Sampled detection anchors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledAnchors {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl SampledAnchors {
    pub fn n_total(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }
}

/// Draws `n_total / 4` positives and fills the rest with negatives, uniformly
/// without replacement. Output index lists are ascending.
pub fn sample_balanced(m: &MatchResult, n_total: usize, seed: u64) -> Result<SampledAnchors> {
    if n_total < 4 {
        return Err(Error::Contract(format!("n_total must be at least 4, got {n_total}")));
    }
    let pos = m.positives();
    let neg = m.negatives();
    if neg.is_empty() {
        return Err(Error::Sampling("no negative anchors available".into()));
    }
    let mut rng = rng_from_seed(seed);
    let n_pos = pos.len().min(n_total / 4);
    let n_neg = (n_total - n_pos).min(neg.len());
    let mut draw = |pool: &[usize], k: usize| {
        let mut out: Vec<usize> = sample_indices(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        out.sort_unstable();
        out
    };
    let positives = draw(&pos, n_pos);
    let negatives = draw(&neg, n_neg);
    Ok(SampledAnchors { positives, negatives })
}
