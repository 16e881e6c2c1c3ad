//! Proposal refinement: external proposals are cut into patches, scored by a
//! pluggable [`PatchScorer`], decoded, mapped back to the scene frame and
//! suppressed per frame.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::anchors::{generate_anchors, AnchorGridSpec};
use crate::box_codec::{decode_residual, encode_residual, ResidualTargets};
use crate::error::{Error, Result};
use crate::geometry::{rotated_bev_iou, OrientedBox3D};
use crate::kitti_io::{format_label_line, label_from_sensor_box, CalibrationSet, Point};
use crate::par::{self, Execution};
use crate::patch_pipeline::{extract_inference_patch, ExtractConfig, InferencePatch};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.05;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalSource {
    Rpn,
    External,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub frame_id: String,
    pub center: [f64; 2],
    pub bbox: Option<OrientedBox3D>,
    pub score: f64,
    pub source: ProposalSource,
}

/// Parses `frame x y score` or `frame x y z l w h yaw score` lines into
/// proposals grouped by frame (file order kept within a frame). Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_proposals(text: &str, what: &str) -> Result<BTreeMap<String, Vec<Proposal>>> {
    let mut out: BTreeMap<String, Vec<Proposal>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 && fields.len() != 9 {
            return Err(Error::format(what, Some(line_no), format!("expected 4 or 9 fields, found {}", fields.len())));
        }
        let nums = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::format(what, Some(line_no), e.to_string()))?;
        if nums.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(what, Some(line_no), "non-finite value"));
        }
        let score = *nums.last().unwrap();
        let bbox = (nums.len() == 8).then(|| OrientedBox3D::new(nums[0], nums[1], nums[2], nums[3], nums[4], nums[5], nums[6]));
        if bbox.is_some_and(|b| !b.is_valid()) {
            return Err(Error::format(what, Some(line_no), "box extents must be positive"));
        }
        out.entry(fields[0].to_string()).or_default().push(Proposal {
            frame_id: fields[0].to_string(),
            center: [nums[0], nums[1]],
            bbox,
            score,
            source: ProposalSource::External,
        });
    }
    Ok(out)
}

pub fn load_proposals(path: &Path) -> Result<BTreeMap<String, Vec<Proposal>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_proposals(&text, &path.display().to_string())
}

/// Serializes proposals in the format read by [`parse_proposals`].
pub fn format_proposals<'a>(proposals: impl IntoIterator<Item = &'a Proposal>) -> String {
    let mut s = String::new();
    for p in proposals {
        let _ = match p.bbox {
            Some(b) => writeln!(s, "{} {} {} {} {} {} {} {} {}", p.frame_id, b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, p.score),
            None => writeln!(s, "{} {} {} {}", p.frame_id, p.center[0], p.center[1], p.score),
        };
    }
    s
}

/// One full-box proposal per ground-truth box, score 1.
pub fn proposals_from_ground_truth(frame_id: &str, gts: &[OrientedBox3D]) -> Vec<Proposal> {
    gts.iter()
        .map(|g| Proposal {
            frame_id: frame_id.to_string(),
            center: [g.cx, g.cy],
            bbox: Some(*g),
            score: 1.0,
            source: ProposalSource::GroundTruth,
        })
        .collect()
}

/// Whether `center` falls inside the BEV bounding rectangle of the scene.
pub fn proposal_in_scene(points: &[Point], center: [f64; 2]) -> bool {
    if !center.iter().all(|v| v.is_finite()) || points.is_empty() {
        return false;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        lo = [lo[0].min(p.x), lo[1].min(p.y)];
        hi = [hi[0].max(p.x), hi[1].max(p.y)];
    }
    (lo[0]..=hi[0]).contains(&center[0]) && (lo[1]..=hi[1]).contains(&center[1])
}

/// Per-anchor scorer output for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerOutput {
    pub det_probs: Vec<f64>,
    pub residuals: Vec<[f64; 9]>,
    pub dir_probs: Vec<f64>,
}

impl ScorerOutput {
    /// All-zero output (no detection anywhere).
    pub fn empty(n: usize) -> Self {
        Self {
            det_probs: vec![0.0; n],
            residuals: vec![ResidualTargets::identity().du; n],
            dir_probs: vec![0.0; n],
        }
    }

    pub fn validate(&self, n_anchors: usize) -> Result<()> {
        let lens = [self.det_probs.len(), self.residuals.len(), self.dir_probs.len()];
        if lens.iter().any(|&l| l != n_anchors) {
            return Err(Error::Contract(format!("scorer output lengths {lens:?}, expected {n_anchors} per head")));
        }
        let prob_ok = |p: &f64| (0.0..=1.0).contains(p);
        if !self.det_probs.iter().all(prob_ok) || !self.dir_probs.iter().all(prob_ok) {
            return Err(Error::Contract("scorer probabilities must lie in [0, 1]".into()));
        }
        if !self.residuals.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Contract("scorer residuals must be finite".into()));
        }
        Ok(())
    }
}

/// The network boundary. `anchors` are in the patch frame.
pub trait PatchScorer: Sync {
    fn score(&self, patch: &InferencePatch, anchors: &[OrientedBox3D]) -> Result<ScorerOutput>;
}

impl<F> PatchScorer for F
where
    F: Fn(&InferencePatch, &[OrientedBox3D]) -> Result<ScorerOutput> + Sync,
{
    fn score(&self, patch: &InferencePatch, anchors: &[OrientedBox3D]) -> Result<ScorerOutput> {
        self(patch, anchors)
    }
}

/// Mock scorer that knows the scene-frame ground truth and emits the exact
/// encoding of the gt nearest the patch center at its best-overlapping
/// anchor.
#[derive(Debug, Clone)]
pub struct OracleScorer {
    pub gts: Vec<OrientedBox3D>,
}

impl PatchScorer for OracleScorer {
    fn score(&self, patch: &InferencePatch, anchors: &[OrientedBox3D]) -> Result<ScorerOutput> {
        let mut out = ScorerOutput::empty(anchors.len());
        let [px, py] = patch.center;
        let target = self
            .gts
            .iter()
            .map(|g| patch.to_patch(g))
            .min_by(|a, b| (a.cx - px).hypot(a.cy - py).total_cmp(&(b.cx - px).hypot(b.cy - py)));
        let Some(gt) = target else { return Ok(out) };
        let best = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (i, rotated_bev_iou(&gt, a)))
            .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((i, v)),
            });
        if let Some((i, iou)) = best {
            if iou > 0.0 {
                let t = encode_residual(&gt, &anchors[i]);
                out.det_probs[i] = 1.0;
                out.residuals[i] = t.du;
                out.dir_probs[i] = t.direction_target();
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub bbox: OrientedBox3D,
    pub score: f64,
    pub frame_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub extract: ExtractConfig,
    pub grid: AnchorGridSpec,
    pub score_threshold: f64,
    /// Detections kept per patch, best first.
    pub per_patch: usize,
    pub nms_threshold: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            extract: ExtractConfig::default(),
            grid: AnchorGridSpec::lrn(),
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            per_patch: 1,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RefineOutput {
    pub detections: Vec<DetectionRecord>,
    /// Anchor picks whose residuals could not be decoded.
    pub undecodable: usize,
}

fn refine_one(scene: &[Point], proposals: &[Proposal], i: usize, scorer: &dyn PatchScorer, cfg: &RefineConfig) -> Result<(Vec<DetectionRecord>, usize)> {
    let prop = &proposals[i];
    let others: Vec<(OrientedBox3D, f64)> = proposals
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .filter_map(|(_, p)| p.bbox.map(|b| (b, p.score)))
        .collect();
    let patch = extract_inference_patch(scene, prop.center, &others, &cfg.extract);
    let anchors = generate_anchors(&cfg.grid.centered_at(patch.center[0], patch.center[1]));
    let out = scorer.score(&patch, &anchors)?;
    out.validate(anchors.len())?;

    let mut order: Vec<usize> = (0..anchors.len()).filter(|&k| out.det_probs[k] > cfg.score_threshold).collect();
    order.sort_by(|&a, &b| out.det_probs[b].total_cmp(&out.det_probs[a]));
    let mut dets = Vec::new();
    let mut undecodable = 0;
    for &k in order.iter().take(cfg.per_patch) {
        let targets = ResidualTargets {
            du: out.residuals[k],
            direction: out.dir_probs[k] > 0.5,
        };
        match decode_residual(&targets, &anchors[k]) {
            Ok(b) => dets.push(DetectionRecord {
                bbox: patch.to_scene(&b),
                score: out.det_probs[k],
                frame_id: prop.frame_id.clone(),
            }),
            Err(Error::Inversion(_)) => undecodable += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((dets, undecodable))
}

/// Runs every proposal of one frame through extraction, the scorer and
/// decoding. Output order follows proposal order; NMS is not applied.
pub fn refine(scene: &[Point], proposals: &[Proposal], scorer: &dyn PatchScorer, cfg: &RefineConfig, exec: Execution) -> Result<RefineOutput> {
    let per: Vec<Result<(Vec<DetectionRecord>, usize)>> = par::map_range(exec, proposals.len(), |i| refine_one(scene, proposals, i, scorer, cfg));
    let mut out = RefineOutput::default();
    for r in per {
        let (dets, bad) = r?;
        out.detections.extend(dets);
        out.undecodable += bad;
    }
    Ok(out)
}

/// Greedy rotated-BEV NMS; ties keep input order.
pub fn nms(dets: &[DetectionRecord], iou_threshold: f64) -> Vec<DetectionRecord> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| rotated_bev_iou(&dets[k].bbox, &dets[i].bbox) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// `refine` followed by per-frame NMS.
pub fn detect_frame(scene: &[Point], proposals: &[Proposal], scorer: &dyn PatchScorer, cfg: &RefineConfig, exec: Execution) -> Result<Vec<DetectionRecord>> {
    let refined = refine(scene, proposals, scorer, cfg, exec)?;
    Ok(nms(&refined.detections, cfg.nms_threshold))
}

/// KITTI prediction-file text for one frame.
pub fn format_detections(dets: &[DetectionRecord], class_name: &str, calib: &CalibrationSet) -> String {
    let mut s = String::new();
    for d in dets {
        let rec = label_from_sensor_box(&d.bbox, class_name, calib);
        s.push_str(&format_label_line(&rec, Some(d.score)));
        s.push('\n');
    }
    s
}
