//! Embedded oracle suites behind `patchref selfcheck`.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::box_codec::{decode_residual, encode_residual, CornerTargets, ResidualTargets};
use crate::evaluator::{evaluate, EvalConfig, EvalFrame, GtObject};
use crate::geometry::{rotated_bev_iou, wrap_angle, OrientedBox3D};
use crate::inference::{nms, DetectionRecord};
use crate::kitti_io::{Difficulty, Point};
use crate::loss::{bce, focal, smooth_l1, total_loss, DetectionLoss, LossActivations, LossTargets, LossWeights, RegressionTarget};
use crate::oracle;
use crate::seed::{derive_seed, rng_from_seed};
use crate::synthetic::random_box;
use crate::voxelizer::{group_points, preset_lrn, VoxelGridConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Perturbs decoded residuals so the codec suite must fail.
    pub inject_codec_fault: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type SuiteFn = fn(&mut ChaCha8Rng, &SelfcheckOptions) -> Result<String, String>;

pub const SUITES: [(&str, SuiteFn); 6] = [
    ("voxelizer", voxelizer_suite),
    ("bev-iou", iou_suite),
    ("codec", codec_suite),
    ("gradients", gradient_suite),
    ("nms", nms_suite),
    ("evaluator", evaluator_suite),
];

pub fn run_selfcheck(opts: &SelfcheckOptions) -> Vec<SuiteReport> {
    SUITES
        .iter()
        .enumerate()
        .map(|(i, (name, suite))| {
            let mut rng = rng_from_seed(derive_seed(opts.seed, "selfcheck", i as u64));
            let start = Instant::now();
            let outcome = suite(&mut rng, opts);
            let seconds = start.elapsed().as_secs_f64();
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            SuiteReport { name, passed, detail, seconds }
        })
        .collect()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, cfg: &VoxelGridConfig) -> Vec<Point> {
    (0..n)
        .map(|_| {
            // a little outside the grid on every side to exercise the bounds
            let mut v = [0.0; 3];
            for (a, slot) in v.iter_mut().enumerate() {
                let pad = 0.05 * cfg.extent[a];
                *slot = rng.gen_range(cfg.origin[a] - pad..cfg.origin[a] + cfg.extent[a] + pad);
            }
            Point::new(v[0], v[1], v[2], rng.gen_range(0.0..=1.0))
        })
        .collect()
}

fn voxelizer_suite(rng: &mut ChaCha8Rng, _: &SelfcheckOptions) -> Result<String, String> {
    let mut cfg = preset_lrn();
    // coarse cells so the per-voxel cap is exercised
    cfg.voxel_size = [0.6, 0.6, 1.0];
    cfg.max_points_per_voxel = 5;
    for round in 0..10 {
        let cloud = random_cloud(rng, 2000, &cfg);
        let fast = group_points(&cloud, &cfg).map_err(|e| e.to_string())?;
        let slow = oracle::naive_group(&cloud, &cfg);
        let fast_pairs: Vec<([i32; 3], Vec<usize>)> = fast.iter().map(|(c, m)| (*c, m.to_vec())).collect();
        if fast_pairs != slow {
            return Err(format!("cloud {round}: grouping differs from the naive oracle"));
        }
    }
    Ok("10 clouds x 2000 points match the naive grouping".into())
}

fn iou_suite(rng: &mut ChaCha8Rng, _: &SelfcheckOptions) -> Result<String, String> {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let a = random_box(rng);
        let mut b = random_box(rng);
        b.cx = a.cx + rng.gen_range(-3.0..3.0);
        b.cy = a.cy + rng.gen_range(-3.0..3.0);
        worst = worst.max((rotated_bev_iou(&a, &b) - oracle::raster_bev_iou(&a, &b, 2000)).abs());
    }
    let a = OrientedBox3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
    let b = OrientedBox3D { cx: 0.5, ..a };
    if (rotated_bev_iou(&a, &b) - 1.0 / 3.0).abs() > 1e-12 {
        return Err("unit squares offset by 0.5 do not give 1/3".into());
    }
    if worst >= 1e-3 {
        return Err(format!("max |IoU - raster| = {worst:.2e}"));
    }
    Ok(format!("200 pairs, max |IoU - raster| = {worst:.2e}"))
}

fn codec_suite(rng: &mut ChaCha8Rng, opts: &SelfcheckOptions) -> Result<String, String> {
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let g = random_box(rng);
        let a = OrientedBox3D { yaw: rng.gen_range(-PI..PI), ..random_box(rng) };
        let mut t = encode_residual(&g, &a);
        let trig = t.du[ResidualTargets::SIN].powi(2) + t.du[ResidualTargets::ABS_COS].powi(2);
        if (trig - 1.0).abs() > 1e-12 {
            return Err(format!("sin^2 + cos^2 = {trig}"));
        }
        if opts.inject_codec_fault {
            t.du[ResidualTargets::DX] += 1e-6;
        }
        let back = decode_residual(&t, &a).map_err(|e| e.to_string())?;
        for (x, y) in [(back.cx, g.cx), (back.cy, g.cy), (back.cz, g.cz), (back.l, g.l), (back.w, g.w), (back.h, g.h)] {
            worst = worst.max((x - y).abs());
        }
        worst = worst.max(wrap_angle(back.yaw - g.yaw).abs());
    }
    if worst >= 1e-9 {
        return Err(format!("roundtrip error {worst:.2e}"));
    }
    Ok(format!("10000 roundtrips, max error {worst:.2e}"))
}

fn away_from_kink(rng: &mut ChaCha8Rng, target: f64) -> f64 {
    loop {
        let p = target + rng.gen_range(-2.0..2.0);
        if ((p - target).abs() - 1.0).abs() > 1e-3 {
            return p;
        }
    }
}

fn gradient_suite(rng: &mut ChaCha8Rng, _: &SelfcheckOptions) -> Result<String, String> {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let floor = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = rng.gen_range(0.01..0.99);
        let t = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        let fd = oracle::central_difference(|x| bce(x[0], t).0, &[p], H)[0];
        worst = worst.max(oracle::relative_error(bce(p, t).1, fd, floor));
        let fd = oracle::central_difference(|x| focal(x[0], t, 0.25, 2.0).0, &[p], H)[0];
        worst = worst.max(oracle::relative_error(focal(p, t, 0.25, 2.0).1, fd, floor));
        let target: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pred: Vec<f64> = target.iter().map(|&t| away_from_kink(rng, t)).collect();
        let (_, g) = smooth_l1(&pred, &target).map_err(|e| e.to_string())?;
        let fd = oracle::central_difference(|x| smooth_l1(x, &target).unwrap().0, &pred, H);
        for (a, n) in g.iter().zip(&fd) {
            worst = worst.max(oracle::relative_error(*a, *n, floor));
        }
    }
    for round in 0..20 {
        let (acts, targets) = random_loss_case(rng, 6);
        for kind in [DetectionLoss::Bce, DetectionLoss::Focal] {
            let w = LossWeights::default();
            let analytic = total_loss(&acts, &targets, &w, kind).map_err(|e| e.to_string())?;
            let flat = flatten(&acts);
            let k = acts.len();
            let fd = oracle::central_difference(|x| total_loss(&unflatten(x, k), &targets, &w, kind).unwrap().total, &flat, H);
            for (a, n) in flatten_grads(&analytic).iter().zip(&fd) {
                let e = oracle::relative_error(*a, *n, floor);
                if e >= TOL {
                    return Err(format!("total_loss case {round}: analytic {a} vs numeric {n}"));
                }
                worst = worst.max(e);
            }
        }
    }
    if worst >= TOL {
        return Err(format!("max relative error {worst:.2e}"));
    }
    Ok(format!("bce/focal/smooth-L1/total, max relative error {worst:.2e}"))
}

/// Random activations and targets over `k` anchors, kept away from the clamp
/// and the smooth-L1 kink.
pub fn random_loss_case(rng: &mut ChaCha8Rng, k: usize) -> (LossActivations, LossTargets) {
    let mut acts = LossActivations::default();
    for _ in 0..k {
        acts.det_probs.push(rng.gen_range(0.02..0.98));
        acts.dir_probs.push(rng.gen_range(0.02..0.98));
    }
    let mut targets = LossTargets::default();
    let mut idx: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    let n_pos = rng.gen_range(1..k.max(2));
    targets.positives = idx[..n_pos].to_vec();
    targets.negatives = idx[n_pos..].to_vec();
    let mut res_targets = Vec::new();
    let mut corner_targets = Vec::new();
    for _ in 0..k {
        let mut du = [0.0; 9];
        for v in du.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut dv = [0.0; 8];
        for v in dv.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        res_targets.push(du);
        corner_targets.push(dv);
        let mut pr = [0.0; 9];
        for (p, t) in pr.iter_mut().zip(du) {
            *p = away_from_kink(rng, t);
        }
        let mut pc = [0.0; 8];
        for (p, t) in pc.iter_mut().zip(dv) {
            *p = away_from_kink(rng, t);
        }
        acts.residuals.push(pr);
        acts.corners.push(pc);
    }
    for &i in &idx[..rng.gen_range(1..=k)] {
        targets.regression.push(RegressionTarget {
            anchor: i,
            residual: ResidualTargets {
                du: res_targets[i],
                direction: rng.gen_bool(0.5),
            },
            corners: CornerTargets { dv: corner_targets[i] },
        });
    }
    (acts, targets)
}

/// Activations as one vector: det, residuals, corners, dir.
pub fn flatten(a: &LossActivations) -> Vec<f64> {
    let mut v = a.det_probs.clone();
    v.extend(a.residuals.iter().flatten());
    v.extend(a.corners.iter().flatten());
    v.extend(&a.dir_probs);
    v
}

pub fn unflatten(x: &[f64], k: usize) -> LossActivations {
    let det_probs = x[..k].to_vec();
    let residuals = x[k..k + 9 * k].chunks(9).map(|c| c.try_into().unwrap()).collect();
    let corners = x[10 * k..18 * k].chunks(8).map(|c| c.try_into().unwrap()).collect();
    let dir_probs = x[18 * k..19 * k].to_vec();
    LossActivations {
        det_probs,
        residuals,
        corners,
        dir_probs,
    }
}

pub fn flatten_grads(b: &crate::loss::LossBreakdown) -> Vec<f64> {
    let mut v = b.grad_det.clone();
    v.extend(b.grad_residual.iter().flatten());
    v.extend(b.grad_corner.iter().flatten());
    v.extend(&b.grad_dir);
    v
}

fn nms_suite(rng: &mut ChaCha8Rng, _: &SelfcheckOptions) -> Result<String, String> {
    for round in 0..100 {
        let n = rng.gen_range(0..=12);
        let dets: Vec<DetectionRecord> = (0..n)
            .map(|_| DetectionRecord {
                bbox: OrientedBox3D::new(
                    rng.gen_range(0.0..8.0),
                    rng.gen_range(0.0..8.0),
                    -1.0,
                    rng.gen_range(2.0..5.0),
                    rng.gen_range(1.0..2.5),
                    1.5,
                    rng.gen_range(-PI..PI),
                ),
                // coarse scores so ties happen
                score: (rng.gen_range(0..20) as f64) / 20.0,
                frame_id: String::new(),
            })
            .collect();
        let thr = [0.0, 0.01, 0.1, 0.5][round % 4];
        let kept = nms(&dets, thr);
        let boxes: Vec<OrientedBox3D> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let want: Vec<DetectionRecord> = oracle::brute_force_nms(&boxes, &scores, thr, rotated_bev_iou)
            .into_iter()
            .map(|i| dets[i].clone())
            .collect();
        if kept != want {
            return Err(format!("set {round} (n = {n}, threshold {thr}): kept sets differ"));
        }
    }
    Ok("100 random sets with n <= 12 match brute force".into())
}

fn evaluator_suite(_: &mut ChaCha8Rng, _: &SelfcheckOptions) -> Result<String, String> {
    let gt = |cx: f64| GtObject {
        bbox: OrientedBox3D::new(cx, 0.0, -1.0, 4.0, 1.6, 1.5, 0.0),
        class_name: "Car".into(),
        difficulty: Difficulty::Easy,
    };
    let gts = vec![gt(10.0), gt(20.0), gt(30.0)];
    let miss = OrientedBox3D::new(60.0, 0.0, -1.0, 4.0, 1.6, 1.5, 0.0);
    let det = |b: OrientedBox3D, score: f64| DetectionRecord {
        bbox: b,
        score,
        frame_id: "0".into(),
    };
    let dets = vec![det(gts[0].bbox, 0.9), det(miss, 0.8), det(gts[1].bbox, 0.7), det(miss, 0.6)];
    let r = evaluate(&[EvalFrame { id: "0".into(), gts, dets }], &EvalConfig::default()).map_err(|e| e.to_string())?;
    // precision 1 up to recall 1/3 (4 samples), 2/3 up to 2/3 (3 samples)
    let want = 100.0 * (4.0 + 3.0 * 2.0 / 3.0) / 11.0;
    let got = r.ap(Difficulty::Easy).unwrap_or(f64::NAN);
    if (got - want).abs() > 1e-9 {
        return Err(format!("hand case AP {got} != {want}"));
    }
    Ok(format!("3-gt/4-det hand case AP = {got:.6}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_run_passes() {
        let reports = run_selfcheck(&SelfcheckOptions::default());
        for r in &reports {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn codec_fault_is_caught() {
        let reports = run_selfcheck(&SelfcheckOptions {
            seed: 0,
            inject_codec_fault: true,
        });
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert_eq!(failed, vec!["codec"]);
    }

    #[test]
    fn flatten_roundtrip() {
        let mut rng = rng_from_seed(1);
        let (acts, _) = random_loss_case(&mut rng, 4);
        assert_eq!(unflatten(&flatten(&acts), 4), acts);
    }
}
