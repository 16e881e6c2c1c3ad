//! KITTI-style average precision over easy, moderate and hard strata.
//!
//! For level `D` the targets are the gts of the evaluated class whose
//! difficulty is `D` or easier. Harder and unclassifiable gts of that class,
//! and `Van` gts when evaluating `Car`, are ignored: a detection matched to
//! one is neither a true nor a false positive. Detections are matched
//! greedily by descending score to the unmatched gt of highest IoU at or above
//! the threshold. Precision is interpolated (maximum precision at recall at
//! least `r`) and averaged over 11 or 40 recall samples.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{iou_3d, rotated_bev_iou, OrientedBox3D};
use crate::inference::DetectionRecord;
use crate::kitti_io::{camera_box_to_sensor_frame, classify_difficulty, parse_prediction_file, Difficulty, KittiLayout};
use crate::par::{self, Execution};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouMetric {
    Bev,
    ThreeD,
}

impl IouMetric {
    pub fn name(self) -> &'static str {
        match self {
            IouMetric::Bev => "bev",
            IouMetric::ThreeD => "3d",
        }
    }

    pub fn iou(self, a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
        match self {
            IouMetric::Bev => rotated_bev_iou(a, b),
            IouMetric::ThreeD => iou_3d(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    R11,
    R40,
}

impl Interpolation {
    pub fn name(self) -> &'static str {
        match self {
            Interpolation::R11 => "r11",
            Interpolation::R40 => "r40",
        }
    }

    pub fn recall_points(self) -> Vec<f64> {
        match self {
            Interpolation::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
            Interpolation::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub metric: IouMetric,
    pub interpolation: Interpolation,
    pub class_name: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            metric: IouMetric::ThreeD,
            interpolation: Interpolation::R11,
            class_name: "Car".into(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!("iou threshold {} outside (0, 1]", self.iou_threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub bbox: OrientedBox3D,
    pub class_name: String,
    pub difficulty: Difficulty,
}

/// Ground truth and detections of one frame. Detections are assumed to be
/// of the evaluated class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalFrame {
    pub id: String,
    pub gts: Vec<GtObject>,
    pub dets: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetOutcome {
    TruePositive,
    FalsePositive,
    IgnoredMatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    /// Outcome per detection, in input order.
    pub outcomes: Vec<DetOutcome>,
    pub gt_matched: Vec<bool>,
}

/// Greedy one-to-one matching of one frame. `gt_ignored[k]` marks gts that
/// absorb a detection without counting it.
pub fn match_frame(
    dets: &[(OrientedBox3D, f64)],
    gts: &[OrientedBox3D],
    gt_ignored: &[bool],
    iou: impl Fn(&OrientedBox3D, &OrientedBox3D) -> f64,
    threshold: f64,
) -> FrameMatch {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1));
    let mut outcomes = vec![DetOutcome::FalsePositive; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for d in order {
        let mut best: [Option<(usize, f64)>; 2] = [None, None];
        for (k, g) in gts.iter().enumerate() {
            if gt_matched[k] {
                continue;
            }
            let v = iou(&dets[d].0, g);
            if v < threshold {
                continue;
            }
            let slot = usize::from(gt_ignored.get(k).copied().unwrap_or(false));
            if best[slot].is_none_or(|(_, bv)| v > bv) {
                best[slot] = Some((k, v));
            }
        }
        if let Some((k, _)) = best[0] {
            gt_matched[k] = true;
            outcomes[d] = DetOutcome::TruePositive;
        } else if let Some((k, _)) = best[1] {
            gt_matched[k] = true;
            outcomes[d] = DetOutcome::IgnoredMatch;
        }
    }
    FrameMatch { outcomes, gt_matched }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelResult {
    pub difficulty: Difficulty,
    /// `None` when the level has no target gts.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Raw (recall, precision) at every distinct score threshold.
    pub pr_curve: Vec<(f64, f64)>,
    /// Interpolated precision at each recall sample.
    pub samples: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub metric: IouMetric,
    pub interpolation: Interpolation,
    pub iou_threshold: f64,
    pub levels: Vec<LevelResult>,
}

impl EvalResult {
    pub fn ap(&self, d: Difficulty) -> Option<f64> {
        self.levels.iter().find(|l| l.difficulty == d).and_then(|l| l.ap)
    }
}

fn is_neighbor_class(eval_class: &str, gt_class: &str) -> bool {
    eval_class == "Car" && gt_class == "Van"
}

/// Raw PR points at score-group boundaries, so tied scores never depend on
/// frame order.
pub fn pr_points(scored: &[(f64, bool)], n_gt: usize) -> Vec<(f64, f64)> {
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, is_tp)) in sorted.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if sorted.get(i + 1).is_none_or(|next| next.0 != score) {
            out.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    out
}

/// Interpolated precision `max{p : recall >= r}` at each sample point.
pub fn interpolate(curve: &[(f64, f64)], recalls: &[f64]) -> Vec<(f64, f64)> {
    recalls
        .iter()
        .map(|&r| {
            let p = curve.iter().filter(|(rc, _)| *rc >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max);
            (r, p)
        })
        .collect()
}

/// Scored detections with their match flag, the gt count and the matched-gt count.
type FrameTally = (Vec<(f64, bool)>, usize, usize);

fn evaluate_level(frames: &[EvalFrame], cfg: &EvalConfig, level: Difficulty, exec: Execution) -> LevelResult {
    let per_frame: Vec<FrameTally> = par::map_collect(exec, frames, |f| {
        let mut gts = Vec::new();
        let mut ignored = Vec::new();
        let mut n_gt = 0;
        for g in &f.gts {
            let own = g.class_name == cfg.class_name;
            if own && g.difficulty <= level {
                gts.push(g.bbox);
                ignored.push(false);
                n_gt += 1;
            } else if own || is_neighbor_class(&cfg.class_name, &g.class_name) {
                gts.push(g.bbox);
                ignored.push(true);
            }
        }
        let dets: Vec<(OrientedBox3D, f64)> = f.dets.iter().map(|d| (d.bbox, d.score)).collect();
        let m = match_frame(&dets, &gts, &ignored, |a, b| cfg.metric.iou(a, b), cfg.iou_threshold);
        let scored = dets
            .iter()
            .zip(&m.outcomes)
            .filter(|(_, o)| **o != DetOutcome::IgnoredMatch)
            .map(|(d, o)| (d.1, *o == DetOutcome::TruePositive))
            .collect();
        let matched = m.gt_matched.iter().zip(&ignored).filter(|(m, ig)| **m && !**ig).count();
        (scored, n_gt, matched)
    });
    let mut scored = Vec::new();
    let (mut n_gt, mut matched) = (0, 0);
    for (s, n, m) in per_frame {
        scored.extend(s);
        n_gt += n;
        matched += m;
    }
    let tp = scored.iter().filter(|s| s.1).count();
    let fp = scored.len() - tp;
    debug_assert_eq!(tp, matched);
    if n_gt == 0 {
        return LevelResult {
            difficulty: level,
            ap: None,
            n_gt,
            tp,
            fp,
            fn_: 0,
            pr_curve: Vec::new(),
            samples: Vec::new(),
        };
    }
    let curve = pr_points(&scored, n_gt);
    let samples = interpolate(&curve, &cfg.interpolation.recall_points());
    let ap = 100.0 * samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
    LevelResult {
        difficulty: level,
        ap: Some(ap),
        n_gt,
        tp,
        fp,
        fn_: n_gt - tp,
        pr_curve: curve,
        samples,
    }
}

pub fn evaluate(frames: &[EvalFrame], cfg: &EvalConfig) -> Result<EvalResult> {
    evaluate_with(frames, cfg, Execution::default())
}

pub fn evaluate_with(frames: &[EvalFrame], cfg: &EvalConfig, exec: Execution) -> Result<EvalResult> {
    cfg.validate()?;
    Ok(EvalResult {
        metric: cfg.metric,
        interpolation: cfg.interpolation,
        iou_threshold: cfg.iou_threshold,
        levels: Difficulty::LEVELS.iter().map(|&d| evaluate_level(frames, cfg, d, exec)).collect(),
    })
}

/// Joins per-frame ground truth and detections. Detections for a frame
/// without ground truth are a contract violation; frames without
/// detections get an empty list.
pub fn align_frames(gts: BTreeMap<String, Vec<GtObject>>, mut dets: BTreeMap<String, Vec<DetectionRecord>>) -> Result<Vec<EvalFrame>> {
    if let Some(extra) = dets.keys().find(|k| !gts.contains_key(*k)) {
        return Err(Error::Contract(format!("detections for frame {extra} which has no ground truth")));
    }
    Ok(gts
        .into_iter()
        .map(|(id, g)| EvalFrame {
            dets: dets.remove(&id).unwrap_or_default(),
            id,
            gts: g,
        })
        .collect())
}

/// Reads labels of `ids` from the dataset and `<id>.txt` prediction files
/// from `pred_dir` (a missing file means no detections). Only predictions of
/// the evaluated class are kept.
pub fn load_eval_frames(layout: &KittiLayout, ids: &[String], pred_dir: &Path, class_name: &str) -> Result<Vec<EvalFrame>> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let labels = crate::kitti_io::parse_label_file(&layout.label(id))?;
        let calib = crate::kitti_io::CalibrationSet::read(&layout.calib(id))?;
        let gts = labels
            .iter()
            .filter(|l| !l.is_dont_care())
            .map(|l| {
                Ok(GtObject {
                    bbox: camera_box_to_sensor_frame(l, &calib)?,
                    class_name: l.class_name.clone(),
                    difficulty: classify_difficulty(l),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pred_path = pred_dir.join(format!("{id}.txt"));
        let dets = if pred_path.is_file() {
            parse_prediction_file(&pred_path)?
                .into_iter()
                .filter(|(l, _)| l.class_name == class_name)
                .map(|(l, score)| {
                    Ok(DetectionRecord {
                        bbox: camera_box_to_sensor_frame(&l, &calib)?,
                        score,
                        frame_id: id.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        out.push(EvalFrame { id: id.clone(), gts, dets });
    }
    Ok(out)
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

/// Human-readable summary.
pub fn format_report(results: &[EvalResult], class_name: &str) -> String {
    let mut s = String::new();
    for r in results {
        let _ = writeln!(
            s,
            "{class_name} AP ({} IoU >= {}, {} recall points)",
            r.metric.name(),
            r.iou_threshold,
            r.interpolation.recall_points().len()
        );
        let _ = writeln!(s, "  {:<9} {:>9} {:>6} {:>6} {:>6} {:>6}", "level", "AP", "gts", "TP", "FP", "FN");
        for l in &r.levels {
            let _ = writeln!(s, "  {:<9} {:>9} {:>6} {:>6} {:>6} {:>6}", l.difficulty.name(), fmt_ap(l.ap), l.n_gt, l.tp, l.fp, l.fn_);
        }
    }
    s
}

/// `key = value` lines, one per metric, level and quantity.
pub fn format_result_file(results: &[EvalResult]) -> String {
    let mut s = String::new();
    for r in results {
        let prefix = format!("{}_{}", r.metric.name(), r.interpolation.name());
        for l in &r.levels {
            let lvl = l.difficulty.name();
            let _ = writeln!(s, "{prefix}_{lvl}_ap = {}", fmt_ap(l.ap));
            let _ = writeln!(s, "{prefix}_{lvl}_gt = {}", l.n_gt);
            let _ = writeln!(s, "{prefix}_{lvl}_tp = {}", l.tp);
            let _ = writeln!(s, "{prefix}_{lvl}_fp = {}", l.fp);
            let _ = writeln!(s, "{prefix}_{lvl}_fn = {}", l.fn_);
        }
    }
    s
}
