//! Slow reference implementations used to cross-check the fast paths.
//!
//! Nothing here calls into the code it checks beyond plain data types: the
//! voxel grouping is a nested loop over voxels and points, IoU is counted on a
//! raster, NMS rescans for the best survivor each round and gradients are
//! central differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::OrientedBox3D;
use crate::kitti_io::Point;
use crate::voxelizer::VoxelGridConfig;

fn cell_count(extent: f64, size: f64) -> i64 {
    (extent / size).round() as i64
}

fn naive_cell(p: &Point, cfg: &VoxelGridConfig) -> Option<[i32; 3]> {
    let v = [p.x, p.y, p.z];
    let mut out = [0i32; 3];
    for a in 0..3 {
        let k = ((v[a] - cfg.origin[a]) / cfg.voxel_size[a]).floor();
        if k < 0.0 || k >= cell_count(cfg.extent[a], cfg.voxel_size[a]) as f64 {
            return None;
        }
        out[a] = k as i32;
    }
    Some(out)
}

/// O(N·V) grouping with keep-first overflow: voxels are listed in first-seen
/// order (up to `max_voxels`), then every voxel scans the whole cloud.
pub fn naive_group(cloud: &[Point], cfg: &VoxelGridConfig) -> Vec<([i32; 3], Vec<usize>)> {
    let cells: Vec<Option<[i32; 3]>> = cloud.iter().map(|p| naive_cell(p, cfg)).collect();
    let mut voxels: Vec<[i32; 3]> = Vec::new();
    for c in cells.iter().flatten() {
        if !voxels.contains(c) && voxels.len() < cfg.max_voxels {
            voxels.push(*c);
        }
    }
    voxels
        .into_iter()
        .map(|v| {
            let members: Vec<usize> = (0..cloud.len())
                .filter(|&i| cells[i] == Some(v))
                .take(cfg.max_points_per_voxel)
                .collect();
            (v, members)
        })
        .collect()
}

/// x-interval `[lo, hi]` of the horizontal line `y` inside the box footprint.
fn row_interval(b: &OrientedBox3D, y: f64) -> Option<(f64, f64)> {
    let (s, c) = b.yaw.sin_cos();
    let dy = y - b.cy;
    // local u = c·dx + s·dy ∈ [-l/2, l/2], local v = -s·dx + c·dy ∈ [-w/2, w/2]
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (coef, offset, half) in [(c, s * dy, 0.5 * b.l), (-s, c * dy, 0.5 * b.w)] {
        if coef.abs() < 1e-15 {
            if offset.abs() > half {
                return None;
            }
            continue;
        }
        let a = (-half - offset) / coef;
        let z = (half - offset) / coef;
        lo = lo.max(a.min(z));
        hi = hi.min(a.max(z));
    }
    (lo <= hi).then_some((lo + b.cx, hi + b.cx))
}

/// Number of cell centers `x0 + (j + 0.5)·dx`, `0 <= j < n`, in `[lo, hi]`.
fn centers_in(lo: f64, hi: f64, x0: f64, dx: f64, n: usize) -> usize {
    let first = ((lo - x0) / dx - 0.5).ceil().max(0.0);
    let last = ((hi - x0) / dx - 0.5).floor().min(n as f64 - 1.0);
    if last < first {
        0
    } else {
        (last - first) as usize + 1
    }
}

/// BEV IoU counted on an `res × res` raster spanning both footprints: a cell
/// belongs to a box when its center does.
pub fn raster_bev_iou(a: &OrientedBox3D, b: &OrientedBox3D, res: usize) -> f64 {
    let reach = |o: &OrientedBox3D| 0.5 * o.l.hypot(o.w);
    let x0 = (a.cx - reach(a)).min(b.cx - reach(b));
    let x1 = (a.cx + reach(a)).max(b.cx + reach(b));
    let y0 = (a.cy - reach(a)).min(b.cy - reach(b));
    let y1 = (a.cy + reach(a)).max(b.cy + reach(b));
    let (dx, dy) = ((x1 - x0) / res as f64, (y1 - y0) / res as f64);
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for r in 0..res {
        let y = y0 + (r as f64 + 0.5) * dy;
        let ia = row_interval(a, y);
        let ib = row_interval(b, y);
        if let Some((lo, hi)) = ia {
            na += centers_in(lo, hi, x0, dx, res);
        }
        if let Some((lo, hi)) = ib {
            nb += centers_in(lo, hi, x0, dx, res);
        }
        if let (Some((la, ha)), Some((lb, hb))) = (ia, ib) {
            if la.max(lb) <= ha.min(hb) {
                both += centers_in(la.max(lb), ha.min(hb), x0, dx, res);
            }
        }
    }
    let union = na + nb - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

fn inside(b: &OrientedBox3D, x: f64, y: f64, z: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    (c * dx + s * dy).abs() <= 0.5 * b.l && (-s * dx + c * dy).abs() <= 0.5 * b.w && (z - b.cz).abs() <= 0.5 * b.h
}

/// Monte Carlo 3D IoU with `n` samples drawn from each box.
pub fn monte_carlo_iou_3d(a: &OrientedBox3D, b: &OrientedBox3D, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut sample_in = |from: &OrientedBox3D, other: &OrientedBox3D| {
        let (s, c) = from.yaw.sin_cos();
        (0..n)
            .filter(|_| {
                let u = rng.gen_range(-0.5..0.5) * from.l;
                let v = rng.gen_range(-0.5..0.5) * from.w;
                let z = from.cz + rng.gen_range(-0.5..0.5) * from.h;
                inside(other, from.cx + c * u - s * v, from.cy + s * u + c * v, z)
            })
            .count() as f64
            / n as f64
    };
    // intersection estimated from both sides and averaged
    let fa = sample_in(a, b);
    let fb = sample_in(b, a);
    let (va, vb) = (a.l * a.w * a.h, b.l * b.w * b.h);
    let inter = 0.5 * (fa * va + fb * vb);
    let union = va + vb - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy suppression by repeated rescans: each round keeps the
/// highest-scored survivor (earliest on ties) and drops everything that
/// overlaps it by more than `threshold`. Returns kept input indices.
pub fn brute_force_nms(boxes: &[OrientedBox3D], scores: &[f64], threshold: f64, iou: impl Fn(&OrientedBox3D, &OrientedBox3D) -> f64) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        kept.push(b);
        for i in 0..boxes.len() {
            if alive[i] && iou(&boxes[b], &boxes[i]) > threshold {
                alive[i] = false;
            }
        }
    }
    kept
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Area under the precision envelope of a scored detection list, by the
/// trapezoid rule over the recall axis. `scored` holds `(score, is_tp)`.
pub fn trapezoid_ap(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut pts = vec![(0.0, 1.0)];
    let mut tp = 0.0;
    for (k, (_, hit)) in sorted.iter().enumerate() {
        if *hit {
            tp += 1.0;
        }
        pts.push((tp / n_gt as f64, tp / (k + 1) as f64));
    }
    // precision envelope, right to left
    for i in (0..pts.len() - 1).rev() {
        pts[i].1 = pts[i].1.max(pts[i + 1].1);
    }
    let mut area = 0.0;
    for w in pts.windows(2) {
        area += (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1);
    }
    100.0 * area
}
