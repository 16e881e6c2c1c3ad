//! Oriented-box geometry in the sensor frame.
//!
//! Conventions: x forward, y left, z up. A box's `yaw` is the heading of its
//! length axis, counter-clockwise from +x viewed from above, kept in (-π, π].
//! `cz` is the box centroid (not the bottom face).

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::kitti_io::{Point, PointCloud};

/// Intersection polygons with less area than this count as empty.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Wraps an angle into (-π, π].
pub fn wrap_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// 7-DoF box: centroid, extents (length along heading, width across, height),
/// heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl OrientedBox3D {
    /// Builds a box, normalizing the yaw.
    pub fn new(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, yaw: f64) -> Self {
        Self {
            cx,
            cy,
            cz,
            l,
            w,
            h,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn is_valid(&self) -> bool {
        let finite = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw]
            .iter()
            .all(|v| v.is_finite());
        finite && self.l > 0.0 && self.w > 0.0 && self.h > 0.0 && self.yaw > -PI && self.yaw <= PI
    }

    pub fn bottom(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn top(&self) -> f64 {
        self.cz + 0.5 * self.h
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// Distance of the BEV center from the sensor.
    pub fn range(&self) -> f64 {
        self.cx.hypot(self.cy)
    }

    /// Azimuth of the BEV center as seen from the sensor.
    pub fn azimuth(&self) -> f64 {
        self.cy.atan2(self.cx)
    }

    /// Maps a point into the box's local frame (origin at the centroid, x
    /// along the length axis).
    pub fn to_local(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, z - self.cz]
    }

    /// Containment test against the box grown by `margin` on every face.
    /// Faces are inclusive.
    pub fn contains(&self, x: f64, y: f64, z: f64, margin: f64) -> bool {
        let [lx, ly, lz] = self.to_local(x, y, z);
        lx.abs() <= 0.5 * self.l + margin && ly.abs() <= 0.5 * self.w + margin && lz.abs() <= 0.5 * self.h + margin
    }
}

/// Counter-clockwise polygon in the ground plane.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BevPolygon {
    pub vertices: Vec<[f64; 2]>,
}

impl BevPolygon {
    /// Signed shoelace area; positive for counter-clockwise vertex order.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let [x0, y0] = self.vertices[i];
            let [x1, y1] = self.vertices[(i + 1) % n];
            acc += x0 * y1 - x1 * y0;
        }
        0.5 * acc
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }
}

/// The four ground-plane corners of a box.
///
/// Order is fixed: front-left (+l/2, +w/2 in the box frame), rear-left,
/// rear-right, front-right. That is counter-clockwise, and it is the order the
/// corner codec relies on.
pub fn bev_corners(b: &OrientedBox3D) -> BevPolygon {
    let (s, c) = b.yaw.sin_cos();
    let hl = 0.5 * b.l;
    let hw = 0.5 * b.w;
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    BevPolygon {
        vertices: local
            .iter()
            .map(|&[u, v]| [b.cx + c * u - s * v, b.cy + s * u + c * v])
            .collect(),
    }
}

/// Rigid rotation about a vertical axis through `pivot`.
pub trait RotateZ: Sized {
    fn rotated_about_z(&self, angle: f64, pivot: [f64; 2]) -> Self;
}

fn rotate_xy(x: f64, y: f64, sin: f64, cos: f64, pivot: [f64; 2]) -> (f64, f64) {
    let dx = x - pivot[0];
    let dy = y - pivot[1];
    (pivot[0] + cos * dx - sin * dy, pivot[1] + sin * dx + cos * dy)
}

impl RotateZ for Point {
    fn rotated_about_z(&self, angle: f64, pivot: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        let (x, y) = rotate_xy(self.x, self.y, s, c, pivot);
        Point { x, y, ..*self }
    }
}

impl RotateZ for Vec<Point> {
    fn rotated_about_z(&self, angle: f64, pivot: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        self.iter()
            .map(|p| {
                let (x, y) = rotate_xy(p.x, p.y, s, c, pivot);
                Point { x, y, ..*p }
            })
            .collect()
    }
}

impl RotateZ for PointCloud {
    fn rotated_about_z(&self, angle: f64, pivot: [f64; 2]) -> Self {
        PointCloud {
            points: self.points.rotated_about_z(angle, pivot),
            frame_id: self.frame_id.clone(),
        }
    }
}

impl RotateZ for OrientedBox3D {
    fn rotated_about_z(&self, angle: f64, pivot: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        let (cx, cy) = rotate_xy(self.cx, self.cy, s, c, pivot);
        OrientedBox3D {
            cx,
            cy,
            yaw: wrap_angle(self.yaw + angle),
            ..*self
        }
    }
}

pub fn rotate_about_z<T: RotateZ>(item: &T, angle: f64, pivot: [f64; 2]) -> T {
    item.rotated_about_z(angle, pivot)
}

/// Index `k` of the axis rotation `k·π/2` closest to `yaw`; ties go to the
/// smaller `k`.
pub fn nearest_axis_index(yaw: f64) -> i64 {
    (yaw / FRAC_PI_2 - 0.5).ceil() as i64
}

/// The multiple of π/2 closest to `yaw` (ties toward the smaller multiple).
pub fn nearest_axis_rotation(yaw: f64) -> f64 {
    nearest_axis_index(yaw) as f64 * FRAC_PI_2
}

/// Half extents along (x, y) once the box is snapped to its nearest axis.
fn snapped_half_extents(b: &OrientedBox3D) -> (f64, f64) {
    if nearest_axis_index(b.yaw).rem_euclid(2) == 0 {
        (0.5 * b.l, 0.5 * b.w)
    } else {
        (0.5 * b.w, 0.5 * b.l)
    }
}

/// BEV IoU after snapping `gt` to its nearest axis (about its own center)
/// against an axis-aligned anchor.
pub fn axis_aligned_bev_iou(gt: &OrientedBox3D, anchor: &OrientedBox3D) -> f64 {
    let (gx, gy) = snapped_half_extents(gt);
    let (ax, ay) = snapped_half_extents(anchor);
    let ix = ((gt.cx + gx).min(anchor.cx + ax) - (gt.cx - gx).max(anchor.cx - ax)).max(0.0);
    let iy = ((gt.cy + gy).min(anchor.cy + ay) - (gt.cy - gy).max(anchor.cy - ay)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = 4.0 * gx * gy + 4.0 * ax * ay - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn cross(o: [f64; 2], a: [f64; 2], p: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0])
}

/// Intersection of two convex counter-clockwise polygons (Sutherland-Hodgman).
pub fn convex_intersection(subject: &BevPolygon, clip: &BevPolygon) -> BevPolygon {
    let mut output = subject.vertices.clone();
    let n = clip.vertices.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let e0 = clip.vertices[i];
        let e1 = clip.vertices[(i + 1) % n];
        let edge_len = (e1[0] - e0[0]).hypot(e1[1] - e0[1]);
        // signed distances within this band count as on the edge
        let eps = 1e-12 * edge_len.max(1.0);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let d_cur = cross(e0, e1, cur);
            let d_prev = cross(e0, e1, prev);
            let cur_in = d_cur >= -eps;
            let prev_in = d_prev >= -eps;
            if cur_in {
                if !prev_in && d_cur > eps {
                    output.push(lerp_at_edge(prev, cur, d_prev, d_cur));
                }
                output.push(cur);
            } else if prev_in && d_prev > eps {
                output.push(lerp_at_edge(prev, cur, d_prev, d_cur));
            }
        }
    }
    BevPolygon { vertices: output }
}

fn lerp_at_edge(a: [f64; 2], b: [f64; 2], da: f64, db: f64) -> [f64; 2] {
    let t = da / (da - db);
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Exact BEV footprint intersection area of two boxes.
pub fn bev_intersection_area(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let pa = bev_corners(a);
    let pb = bev_corners(b);
    let area = convex_intersection(&pa, &pb).area();
    if area < DEGENERATE_AREA {
        0.0
    } else {
        area
    }
}

/// Rotated BEV IoU (exact polygon clipping).
pub fn rotated_bev_iou(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.l * a.w + b.l * b.w - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU of two yaw-only oriented boxes.
pub fn iou_3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let dz = (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of cloud points inside `b` grown by `margin` on every face.
pub fn points_in_box(cloud: &[Point], b: &OrientedBox3D, margin: f64) -> Vec<usize> {
    cloud
        .iter()
        .enumerate()
        .filter(|(_, p)| b.contains(p.x, p.y, p.z, margin))
        .map(|(i, _)| i)
        .collect()
}
