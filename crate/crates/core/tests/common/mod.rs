//! Reference computations for the integration and acceptance tests. They use
//! only the crate's plain data types.

#![allow(dead_code)]

use std::f64::consts::PI;

use patchref::geometry::OrientedBox3D;
use patchref::kitti_io::Point;
use patchref::voxelizer::VoxelGridConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn any_box(r: &mut ChaCha8Rng) -> OrientedBox3D {
    OrientedBox3D::new(
        r.gen_range(-30.0..30.0),
        r.gen_range(-30.0..30.0),
        r.gen_range(-3.0..2.0),
        r.gen_range(0.3..7.0),
        r.gen_range(0.3..3.0),
        r.gen_range(0.3..3.0),
        r.gen_range(-PI..PI),
    )
}

/// Smallest absolute angle between two headings.
pub fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Little-endian f32 quadruples read straight from bytes.
pub fn raw_points(bytes: &[u8]) -> Vec<[f32; 4]> {
    bytes
        .chunks_exact(16)
        .map(|c| {
            let mut q = [0f32; 4];
            for (k, slot) in q.iter_mut().enumerate() {
                *slot = f32::from_le_bytes([c[4 * k], c[4 * k + 1], c[4 * k + 2], c[4 * k + 3]]);
            }
            q
        })
        .collect()
}

/// Keep-first grouping by a nested voxel × point loop.
pub fn nested_loop_grouping(cloud: &[Point], cfg: &VoxelGridConfig) -> Vec<([i32; 3], Vec<usize>)> {
    let n_cells: Vec<i64> = (0..3).map(|a| (cfg.extent[a] / cfg.voxel_size[a]).round() as i64).collect();
    let cell = |p: &Point| -> Option<[i32; 3]> {
        let xyz = [p.x, p.y, p.z];
        let mut c = [0i32; 3];
        for a in 0..3 {
            let k = ((xyz[a] - cfg.origin[a]) / cfg.voxel_size[a]).floor() as i64;
            if !(0..n_cells[a]).contains(&k) {
                return None;
            }
            c[a] = k as i32;
        }
        Some(c)
    };
    let mut order: Vec<[i32; 3]> = Vec::new();
    for p in cloud {
        if let Some(c) = cell(p) {
            if order.len() < cfg.max_voxels && !order.contains(&c) {
                order.push(c);
            }
        }
    }
    order
        .into_iter()
        .map(|v| {
            let mut members = Vec::new();
            for (i, p) in cloud.iter().enumerate() {
                if members.len() < cfg.max_points_per_voxel && cell(p) == Some(v) {
                    members.push(i);
                }
            }
            (v, members)
        })
        .collect()
}

fn corners(b: &OrientedBox3D) -> [[f64; 2]; 4] {
    let (s, c) = b.yaw.sin_cos();
    let mut out = [[0.0; 2]; 4];
    for (k, (u, v)) in [(0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5), (0.5, -0.5)].into_iter().enumerate() {
        let (lx, ly) = (u * b.l, v * b.w);
        out[k] = [b.cx + c * lx - s * ly, b.cy + s * lx + c * ly];
    }
    out
}

/// x-span where the horizontal line `y` crosses the footprint, found from
/// edge crossings.
fn span(b: &OrientedBox3D, y: f64) -> Option<(f64, f64)> {
    let cs = corners(b);
    let mut xs = Vec::with_capacity(4);
    for k in 0..4 {
        let [x0, y0] = cs[k];
        let [x1, y1] = cs[(k + 1) % 4];
        if (y0 <= y && y < y1) || (y1 <= y && y < y0) {
            xs.push(x0 + (y - y0) / (y1 - y0) * (x1 - x0));
        }
    }
    if xs.len() < 2 {
        return None;
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some((lo, hi))
}

/// IoU counted over the cell centers of a `res × res` raster covering both
/// footprints.
pub fn raster_iou(a: &OrientedBox3D, b: &OrientedBox3D, res: usize) -> f64 {
    let all: Vec<[f64; 2]> = corners(a).into_iter().chain(corners(b)).collect();
    let x0 = all.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let x1 = all.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let y0 = all.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let y1 = all.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let (dx, dy) = ((x1 - x0) / res as f64, (y1 - y0) / res as f64);
    let count = |lo: f64, hi: f64| -> i64 {
        let first = ((lo - x0) / dx - 0.5).ceil().max(0.0) as i64;
        let last = (((hi - x0) / dx - 0.5).floor() as i64).min(res as i64 - 1);
        (last - first + 1).max(0)
    };
    let (mut na, mut nb, mut nab) = (0i64, 0i64, 0i64);
    for row in 0..res {
        let y = y0 + (row as f64 + 0.5) * dy;
        let sa = span(a, y);
        let sb = span(b, y);
        if let Some((l, h)) = sa {
            na += count(l, h);
        }
        if let Some((l, h)) = sb {
            nb += count(l, h);
        }
        if let (Some((la, ha)), Some((lb, hb))) = (sa, sb) {
            let (l, h) = (la.max(lb), ha.min(hb));
            if l <= h {
                nab += count(l, h);
            }
        }
    }
    let union = na + nb - nab;
    if union == 0 {
        0.0
    } else {
        nab as f64 / union as f64
    }
}

/// Exhaustive greedy-NMS oracle: the kept set is the unique subset `S` such
/// that, walking boxes by descending score (ties by index), a box is in `S`
/// exactly when no earlier member of `S` overlaps it above `threshold`.
pub fn exhaustive_nms(scores: &[f64], overlap: &dyn Fn(usize, usize) -> f64, threshold: f64) -> Vec<usize> {
    let n = scores.len();
    assert!(n <= 16);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut found = None;
    for mask in 0u32..(1 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let consistent = order.iter().enumerate().all(|(pos, &i)| {
            let blocked = order[..pos].iter().any(|&j| member(j) && overlap(j, i) > threshold);
            member(i) == !blocked
        });
        if consistent {
            assert!(found.is_none(), "greedy fixed point must be unique");
            found = Some(mask);
        }
    }
    let mask = found.expect("a greedy fixed point always exists");
    order.into_iter().filter(|&i| mask & (1 << i) != 0).collect()
}

pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let base = p[i];
            p[i] = base + h;
            let hi = f(&p);
            p[i] = base - h;
            let lo = f(&p);
            p[i] = base;
            (hi - lo) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Interpolated AP from a ranked list of hits: precision at each rank,
/// envelope from the right, then the mean over `recalls`.
pub fn ranked_ap(hits: &[bool], n_gt: usize, recalls: &[f64]) -> f64 {
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    let total: f64 = recalls
        .iter()
        .map(|&r| {
            (0..prec.len())
                .filter(|&k| rec[k] >= r - 1e-12)
                .map(|k| prec[k])
                .fold(0.0, f64::max)
        })
        .sum();
    100.0 * total / recalls.len() as f64
}

/// Area under the precision envelope by the trapezoid rule.
pub fn trapezoid_ap(hits: &[bool], n_gt: usize) -> f64 {
    let mut pts = vec![(0.0, 1.0)];
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        pts.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    for i in (0..pts.len() - 1).rev() {
        pts[i].1 = pts[i].1.max(pts[i + 1].1);
    }
    100.0 * pts.windows(2).map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1)).sum::<f64>()
}

pub fn pairwise_distances(points: &[Point]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let (a, b) = (points[i], points[j]);
            out.push(((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt());
        }
    }
    out
}
