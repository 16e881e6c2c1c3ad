//! Training-patch construction and inference-patch extraction.
//!
//! Training patches are built per labeled object:
//!
//! 1. every object is cut out of its frame together with a *surface*: the
//!    points of a patch-sized square around it, minus the points of every
//!    labeled object (boxes grown by `margin`), rotated about the sensor so the
//!    square's center lies on the +x (depth) axis;
//! 2. the object is paired with a surface at a similar sensor distance and set
//!    down on it, its bottom face at the surface's original object bottom;
//! 3. global and per-object mirror/scale, then a global rotation about the
//!    sensor z-axis; objects are never rotated individually nor moved
//!    vertically;
//! 4. the patch is cropped around the object center offset by polar noise.
//!
//! Inference patches are cropped around a proposal in the frame rotated so the
//! proposal lies on the depth axis; the applied rotation is recorded so
//! predictions can be mapped back.
//!
//! # Patch database
//!
//! `patches.bin` holds `b"PRPD"`, `u32` version (1), `u32` record count, then
//! the records back to back (see [`Patch::to_bytes`]). `patches.idx` is a text
//! index with one line per record:
//! `record frame_id object_index difficulty byte_offset byte_len`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{bev_intersection_area, wrap_angle, OrientedBox3D, RotateZ};
use crate::kitti_io::{camera_box_to_sensor_frame, classify_difficulty, Difficulty, KittiFrame, Point};
use crate::par::{self, Execution};
use crate::seed::{derive_seed, rng_from_seed};
use crate::voxelizer::ByteCursor;

pub const PATCH_SIZE: f64 = 9.6;
pub const BOX_MARGIN: f64 = 0.2;
pub const MAX_NOISE_RADIUS: f64 = 3.0;
pub const SURFACE_WINDOW: usize = 64;
/// Surface resampling probability for easy, moderate and hard objects.
pub const RESAMPLE_PROBS: [f64; 3] = [1.0, 0.8, 0.6];

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub mirror_prob: f64,
    pub scale_range: (f64, f64),
    pub object_mirror_prob: f64,
    pub object_scale_range: (f64, f64),
    /// Global rotation about the sensor z-axis is drawn from this range.
    pub rotation_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mirror_prob: 0.5,
            scale_range: (0.95, 1.05),
            object_mirror_prob: 0.5,
            object_scale_range: (0.95, 1.05),
            rotation_range: (-FRAC_PI_2, FRAC_PI_2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchConfig {
    pub patch_size: f64,
    pub margin: f64,
    pub surface_window: usize,
    pub resample_probs: [f64; 3],
    pub max_noise_radius: f64,
    pub class_name: String,
    pub min_object_points: usize,
    pub augment: AugmentConfig,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_size: PATCH_SIZE,
            margin: BOX_MARGIN,
            surface_window: SURFACE_WINDOW,
            resample_probs: RESAMPLE_PROBS,
            max_noise_radius: MAX_NOISE_RADIUS,
            class_name: "Car".into(),
            min_object_points: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl PatchConfig {
    fn half(&self) -> f64 {
        0.5 * self.patch_size
    }
}

/// A labeled object in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledObject {
    pub gt: OrientedBox3D,
    pub difficulty: Difficulty,
    pub class_name: String,
}

/// A frame reduced to what patch construction needs.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub id: String,
    pub points: Vec<Point>,
    /// Every non-DontCare object.
    pub objects: Vec<LabeledObject>,
}

impl FrameData {
    pub fn from_kitti(frame: &KittiFrame) -> Result<Self> {
        let objects = frame
            .labels
            .iter()
            .filter(|l| !l.is_dont_care())
            .map(|l| {
                Ok(LabeledObject {
                    gt: camera_box_to_sensor_frame(l, &frame.calib)?,
                    difficulty: classify_difficulty(l),
                    class_name: l.class_name.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: frame.id.clone(),
            points: frame.cloud.points.clone(),
            objects,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEntry {
    /// Points inside the margin-grown box, in the original sensor frame.
    pub points: Vec<Point>,
    pub gt: OrientedBox3D,
    pub frame_id: String,
    pub object_index: usize,
    pub distance: f64,
    pub difficulty: Difficulty,
    /// Position of this object's own surface in the sorted surface list.
    pub surface: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceEntry {
    /// Surface points, already rotated so the center sits on the +x axis.
    pub points: Vec<Point>,
    /// Bottom-face z of the object that was cut out of this surface.
    pub vertical_ref: f64,
    pub distance: f64,
    /// Azimuth that was removed by the alignment rotation.
    pub alignment: f64,
    pub frame_id: String,
    pub object_index: usize,
}

impl SurfaceEntry {
    /// Center of the surface after alignment.
    pub fn center(&self) -> [f64; 2] {
        [self.distance, 0.0]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectSurfaceLists {
    pub objects: Vec<ObjectEntry>,
    pub surfaces: Vec<SurfaceEntry>,
}

fn inside_square(p: &Point, center: [f64; 2], half: f64) -> bool {
    (p.x - center[0]).abs() <= half && (p.y - center[1]).abs() <= half
}

/// Cuts every eligible object and its surface out of `frames`; both lists
/// come back sorted by sensor distance (ties keep frame/object order).
pub fn build_object_surface_lists(frames: &[FrameData], cfg: &PatchConfig) -> ObjectSurfaceLists {
    build_object_surface_lists_with(frames, cfg, Execution::Sequential)
}

pub fn build_object_surface_lists_with(frames: &[FrameData], cfg: &PatchConfig, exec: Execution) -> ObjectSurfaceLists {
    let per_frame: Vec<Vec<(ObjectEntry, SurfaceEntry)>> = par::map_collect(exec, frames, |f| frame_entries(f, cfg));
    let mut pairs: Vec<(ObjectEntry, SurfaceEntry)> = per_frame.into_iter().flatten().collect();
    // object and surface share a distance, so one stable sort orders both
    pairs.sort_by(|a, b| a.0.distance.total_cmp(&b.0.distance));
    let mut lists = ObjectSurfaceLists::default();
    for (i, (mut obj, surf)) in pairs.into_iter().enumerate() {
        obj.surface = i;
        lists.objects.push(obj);
        lists.surfaces.push(surf);
    }
    lists
}

fn frame_entries(frame: &FrameData, cfg: &PatchConfig) -> Vec<(ObjectEntry, SurfaceEntry)> {
    let half = cfg.half();
    let reach = half * std::f64::consts::SQRT_2;
    let mut out = Vec::new();
    for (k, obj) in frame.objects.iter().enumerate() {
        if obj.class_name != cfg.class_name || obj.difficulty == Difficulty::Ignored {
            continue;
        }
        let gt = obj.gt;
        let points: Vec<Point> = frame
            .points
            .iter()
            .filter(|p| gt.contains(p.x, p.y, p.z, cfg.margin))
            .copied()
            .collect();
        if points.len() < cfg.min_object_points {
            continue;
        }
        let distance = gt.range();
        let alignment = gt.azimuth();
        let (s, c) = (-alignment).sin_cos();
        let center = [distance, 0.0];
        let mut surface = Vec::new();
        for p in &frame.points {
            if (p.x - gt.cx).hypot(p.y - gt.cy) > reach {
                continue;
            }
            let rotated = Point {
                x: c * p.x - s * p.y,
                y: s * p.x + c * p.y,
                ..*p
            };
            if !inside_square(&rotated, center, half) {
                continue;
            }
            if frame.objects.iter().any(|o| o.gt.contains(p.x, p.y, p.z, cfg.margin)) {
                continue;
            }
            surface.push(rotated);
        }
        out.push((
            ObjectEntry {
                points,
                gt,
                frame_id: frame.id.clone(),
                object_index: k,
                distance,
                difficulty: obj.difficulty,
                surface: 0,
            },
            SurfaceEntry {
                points: surface,
                vertical_ref: gt.bottom(),
                distance,
                alignment,
                frame_id: frame.id.clone(),
                object_index: k,
            },
        ));
    }
    out
}

fn resample_prob(d: Difficulty, probs: &[f64; 3]) -> f64 {
    match d {
        Difficulty::Easy => probs[0],
        Difficulty::Moderate => probs[1],
        Difficulty::Hard | Difficulty::Ignored => probs[2],
    }
}

/// Half-open range of the `k` surfaces closest in distance to `distance`.
pub fn nearest_window(surfaces: &[SurfaceEntry], distance: f64, k: usize) -> (usize, usize) {
    let k = k.clamp(1, surfaces.len().max(1));
    let split = surfaces.partition_point(|s| s.distance < distance);
    let (mut lo, mut hi) = (split, split);
    while hi - lo < k && (lo > 0 || hi < surfaces.len()) {
        let take_left = match (lo > 0, hi < surfaces.len()) {
            (true, true) => (distance - surfaces[lo - 1].distance) <= (surfaces[hi].distance - distance),
            (left, _) => left,
        };
        if take_left {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    (lo, hi)
}

/// Picks the surface for `object`: with the difficulty's resampling
/// probability a uniform draw from the distance window, otherwise its own.
pub fn pair_object_with_surface(object: &ObjectEntry, surfaces: &[SurfaceEntry], cfg: &PatchConfig, rng: &mut ChaCha8Rng) -> Result<usize> {
    if surfaces.is_empty() {
        return Err(Error::Contract("no surfaces to pair with".into()));
    }
    let p = resample_prob(object.difficulty, &cfg.resample_probs);
    let u: f64 = rng.gen();
    if u < p {
        let (lo, hi) = nearest_window(surfaces, object.distance, cfg.surface_window);
        Ok(rng.gen_range(lo..hi))
    } else {
        Ok(object.surface.min(surfaces.len() - 1))
    }
}

/// An object standing on a surface, before cropping.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedScene {
    pub surface_points: Vec<Point>,
    pub object_points: Vec<Point>,
    pub gt: OrientedBox3D,
}

impl PlacedScene {
    pub fn merged_points(&self) -> Vec<Point> {
        let mut out = Vec::with_capacity(self.surface_points.len() + self.object_points.len());
        out.extend_from_slice(&self.surface_points);
        out.extend_from_slice(&self.object_points);
        out
    }
}

/// Moves the object onto the surface's original object location (rotating
/// about the sensor onto the depth axis, sliding along it) with its bottom
/// face at the surface's vertical reference.
pub fn place_object_on_surface(object: &ObjectEntry, surface: &SurfaceEntry) -> PlacedScene {
    let align = -object.gt.azimuth();
    let mut gt = object.gt.rotated_about_z(align, [0.0, 0.0]);
    let mut points = object.points.rotated_about_z(align, [0.0, 0.0]);
    let dx = surface.distance - gt.cx;
    let dz = surface.vertical_ref - object.gt.bottom();
    for p in &mut points {
        p.x += dx;
        p.z += dz;
    }
    gt.cx = surface.distance;
    gt.cy = 0.0;
    gt.cz += dz;
    PlacedScene {
        surface_points: surface.points.clone(),
        object_points: points,
        gt,
    }
}

/// Concrete augmentation draw. Per-object rotation and vertical translation
/// are not parameters: they are never applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub global_mirror: bool,
    pub global_scale: f64,
    pub object_mirror: bool,
    pub object_scale: f64,
    pub global_rotation: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            global_mirror: false,
            global_scale: 1.0,
            object_mirror: false,
            object_scale: 1.0,
            global_rotation: 0.0,
        }
    }

    pub fn draw(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Self {
        let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        Self {
            global_mirror: rng.gen_bool(cfg.mirror_prob.clamp(0.0, 1.0)),
            global_scale: uniform(rng, cfg.scale_range),
            object_mirror: rng.gen_bool(cfg.object_mirror_prob.clamp(0.0, 1.0)),
            object_scale: uniform(rng, cfg.object_scale_range),
            global_rotation: uniform(rng, cfg.rotation_range),
        }
    }
}

/// Record of what augmentation did to a patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationLog {
    pub seed: u64,
    pub params: AugmentParams,
    /// Always zero; recorded for auditing.
    pub object_rotation: f64,
    /// Always zero; recorded for auditing.
    pub object_vertical_shift: f64,
}

fn mirror_y(points: &mut [Point]) {
    for p in points {
        p.y = -p.y;
    }
}

fn scale_about_origin(points: &mut [Point], s: f64) {
    for p in points {
        p.x *= s;
        p.y *= s;
        p.z *= s;
    }
}

/// Applies `params` in a fixed order: global mirror, global scale, object
/// mirror, object scale, global rotation.
pub fn apply_augmentation(scene: &PlacedScene, params: &AugmentParams) -> PlacedScene {
    let mut surface = scene.surface_points.clone();
    let mut object = scene.object_points.clone();
    let mut gt = scene.gt;

    if params.global_mirror {
        mirror_y(&mut surface);
        mirror_y(&mut object);
        gt.cy = -gt.cy;
        gt.yaw = wrap_angle(-gt.yaw);
    }
    if params.global_scale != 1.0 {
        let s = params.global_scale;
        scale_about_origin(&mut surface, s);
        scale_about_origin(&mut object, s);
        gt = OrientedBox3D {
            cx: gt.cx * s,
            cy: gt.cy * s,
            cz: gt.cz * s,
            l: gt.l * s,
            w: gt.w * s,
            h: gt.h * s,
            yaw: gt.yaw,
        };
    }
    if params.object_mirror {
        // reflect across the box's vertical length-axis plane
        let (s, c) = gt.yaw.sin_cos();
        for p in &mut object {
            let lateral = -s * (p.x - gt.cx) + c * (p.y - gt.cy);
            p.x += 2.0 * lateral * s;
            p.y -= 2.0 * lateral * c;
        }
    }
    if params.object_scale != 1.0 {
        // about the bottom-face center so the object stays on the ground
        let s = params.object_scale;
        let base = gt.bottom();
        for p in &mut object {
            p.x = gt.cx + s * (p.x - gt.cx);
            p.y = gt.cy + s * (p.y - gt.cy);
            p.z = base + s * (p.z - base);
        }
        gt.l *= s;
        gt.w *= s;
        gt.h *= s;
        gt.cz = base + 0.5 * gt.h;
    }
    if params.global_rotation != 0.0 {
        surface = surface.rotated_about_z(params.global_rotation, [0.0, 0.0]);
        object = object.rotated_about_z(params.global_rotation, [0.0, 0.0]);
        gt = gt.rotated_about_z(params.global_rotation, [0.0, 0.0]);
    }
    PlacedScene {
        surface_points: surface,
        object_points: object,
        gt,
    }
}

/// Draws augmentation parameters from `seed` and applies them.
pub fn augment(scene: &PlacedScene, cfg: &AugmentConfig, seed: u64) -> (PlacedScene, AugmentationLog) {
    let mut rng = rng_from_seed(seed);
    let params = AugmentParams::draw(cfg, &mut rng);
    let log = AugmentationLog {
        seed,
        params,
        object_rotation: 0.0,
        object_vertical_shift: 0.0,
    };
    (apply_augmentation(scene, &params), log)
}

/// Polar crop offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropNoise {
    pub radius: f64,
    pub angle: f64,
}

impl CropNoise {
    pub fn zero() -> Self {
        Self { radius: 0.0, angle: 0.0 }
    }

    /// `radius ~ U[0, max_radius]`, `angle ~ U[-π, π]`.
    pub fn sample(rng: &mut ChaCha8Rng, max_radius: f64) -> Self {
        Self {
            radius: rng.gen_range(0.0..=max_radius),
            angle: rng.gen_range(-PI..=PI),
        }
    }

    pub fn offset(&self) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [self.radius * c, self.radius * s]
    }
}

/// Where a training patch came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchProvenance {
    pub frame_id: String,
    pub object_index: usize,
    pub surface_frame_id: String,
    pub surface_object_index: usize,
    pub difficulty: Option<Difficulty>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub points: Vec<Point>,
    pub gt: OrientedBox3D,
    pub crop_center: [f64; 2],
    pub noise: CropNoise,
    pub log: Option<AugmentationLog>,
    pub provenance: PatchProvenance,
}

/// Crops a `patch_size` square around the gt center displaced by `noise`.
pub fn crop_patch(points: &[Point], gt: &OrientedBox3D, noise: CropNoise, patch_size: f64, max_radius: f64) -> Result<Patch> {
    if !(0.0..=max_radius).contains(&noise.radius) || !(-PI..=PI).contains(&noise.angle) {
        return Err(Error::Contract(format!("crop noise ({}, {}) out of bounds", noise.radius, noise.angle)));
    }
    let [ox, oy] = noise.offset();
    let center = [gt.cx + ox, gt.cy + oy];
    let half = 0.5 * patch_size;
    let square = OrientedBox3D::new(center[0], center[1], gt.cz, patch_size, patch_size, gt.h, 0.0);
    if bev_intersection_area(gt, &square) == 0.0 {
        return Err(Error::Construction("gt footprint lies entirely outside the crop".into()));
    }
    Ok(Patch {
        points: points.iter().filter(|p| inside_square(p, center, half)).copied().collect(),
        gt: *gt,
        crop_center: center,
        noise,
        log: None,
        provenance: PatchProvenance::default(),
    })
}

/// Full construction of the training patch for `lists.objects[index]`.
pub fn build_training_patch(lists: &ObjectSurfaceLists, index: usize, cfg: &PatchConfig, seed: u64) -> Result<Patch> {
    let object = lists
        .objects
        .get(index)
        .ok_or_else(|| Error::Contract(format!("object index {index} out of range")))?;
    let mut rng = rng_from_seed(derive_seed(seed, "surface-pairing", 0));
    let surface_idx = pair_object_with_surface(object, &lists.surfaces, cfg, &mut rng)?;
    let surface = &lists.surfaces[surface_idx];
    let placed = place_object_on_surface(object, surface);
    let (augmented, log) = augment(&placed, &cfg.augment, derive_seed(seed, "augment", 0));
    let mut noise_rng = rng_from_seed(derive_seed(seed, "crop-noise", 0));
    let noise = CropNoise::sample(&mut noise_rng, cfg.max_noise_radius);
    let mut patch = crop_patch(&augmented.merged_points(), &augmented.gt, noise, cfg.patch_size, cfg.max_noise_radius)?;
    patch.log = Some(log);
    patch.provenance = PatchProvenance {
        frame_id: object.frame_id.clone(),
        object_index: object.object_index,
        surface_frame_id: surface.frame_id.clone(),
        surface_object_index: surface.object_index,
        difficulty: Some(object.difficulty),
    };
    Ok(patch)
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn difficulty_code(d: Option<Difficulty>) -> u8 {
    match d {
        Some(Difficulty::Easy) => 0,
        Some(Difficulty::Moderate) => 1,
        Some(Difficulty::Hard) => 2,
        Some(Difficulty::Ignored) => 3,
        None => 255,
    }
}

fn difficulty_from_code(c: u8) -> Option<Difficulty> {
    match c {
        0 => Some(Difficulty::Easy),
        1 => Some(Difficulty::Moderate),
        2 => Some(Difficulty::Hard),
        3 => Some(Difficulty::Ignored),
        _ => None,
    }
}

impl Patch {
    /// Record layout (little-endian): frame id (`u16` length + bytes),
    /// object index `u32`, surface frame id, surface object index `u32`,
    /// difficulty `u8` (255 = none), crop center `f64`×2, noise radius and
    /// angle `f64`×2, gt `f64`×7 (cx cy cz l w h yaw), log flag `u8`, then if
    /// set: seed `u64`, global mirror `u8`, global scale `f64`, object mirror
    /// `u8`, object scale `f64`, global rotation `f64`; finally point count
    /// `u32` and points as `f32`×4.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(160 + 16 * self.points.len());
        let p = &self.provenance;
        push_str(&mut out, &p.frame_id);
        out.extend_from_slice(&(p.object_index as u32).to_le_bytes());
        push_str(&mut out, &p.surface_frame_id);
        out.extend_from_slice(&(p.surface_object_index as u32).to_le_bytes());
        out.push(difficulty_code(p.difficulty));
        let g = &self.gt;
        for v in [
            self.crop_center[0],
            self.crop_center[1],
            self.noise.radius,
            self.noise.angle,
            g.cx,
            g.cy,
            g.cz,
            g.l,
            g.w,
            g.h,
            g.yaw,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.log {
            None => out.push(0),
            Some(log) => {
                out.push(1);
                out.extend_from_slice(&log.seed.to_le_bytes());
                out.push(u8::from(log.params.global_mirror));
                out.extend_from_slice(&log.params.global_scale.to_le_bytes());
                out.push(u8::from(log.params.object_mirror));
                out.extend_from_slice(&log.params.object_scale.to_le_bytes());
                out.extend_from_slice(&log.params.global_rotation.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.points.len() as u32).to_le_bytes());
        for pt in &self.points {
            for v in [pt.x, pt.y, pt.z, pt.r] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        let patch = read_patch_record(&mut cur).ok_or_else(|| Error::format("patch record", None, "truncated record"))?;
        if cur.pos != bytes.len() {
            return Err(Error::format("patch record", None, "trailing bytes"));
        }
        Ok(patch)
    }
}

fn read_str(cur: &mut ByteCursor<'_>) -> Option<String> {
    let n = u16::from_le_bytes(cur.take(2)?.try_into().ok()?) as usize;
    String::from_utf8(cur.take(n)?.to_vec()).ok()
}

fn read_patch_record(cur: &mut ByteCursor<'_>) -> Option<Patch> {
    let frame_id = read_str(cur)?;
    let object_index = cur.u32()? as usize;
    let surface_frame_id = read_str(cur)?;
    let surface_object_index = cur.u32()? as usize;
    let difficulty = difficulty_from_code(cur.take(1)?[0]);
    let mut v = [0f64; 11];
    for slot in v.iter_mut() {
        *slot = cur.f64()?;
    }
    let log = match cur.take(1)?[0] {
        0 => None,
        _ => {
            let seed = cur.u64()?;
            let global_mirror = cur.take(1)?[0] != 0;
            let global_scale = cur.f64()?;
            let object_mirror = cur.take(1)?[0] != 0;
            let object_scale = cur.f64()?;
            let global_rotation = cur.f64()?;
            Some(AugmentationLog {
                seed,
                params: AugmentParams {
                    global_mirror,
                    global_scale,
                    object_mirror,
                    object_scale,
                    global_rotation,
                },
                object_rotation: 0.0,
                object_vertical_shift: 0.0,
            })
        }
    };
    let n = cur.u32()? as usize;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut q = [0f64; 4];
        for slot in q.iter_mut() {
            *slot = f64::from(f32::from_bits(cur.u32()?));
        }
        points.push(Point::new(q[0], q[1], q[2], q[3]));
    }
    Some(Patch {
        points,
        gt: OrientedBox3D {
            cx: v[4],
            cy: v[5],
            cz: v[6],
            l: v[7],
            w: v[8],
            h: v[9],
            yaw: v[10],
        },
        crop_center: [v[0], v[1]],
        noise: CropNoise { radius: v[2], angle: v[3] },
        log,
        provenance: PatchProvenance {
            frame_id,
            object_index,
            surface_frame_id,
            surface_object_index,
            difficulty,
        },
    })
}

pub const DB_FILE: &str = "patches.bin";
pub const INDEX_FILE: &str = "patches.idx";

/// Outcome of writing a patch database.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchDbSummary {
    pub patches: usize,
    /// Counts for easy, moderate, hard.
    pub histogram: [usize; 3],
    pub failed: usize,
}

/// Builds one patch per object with per-record seeds
/// `derive_seed(seed, "patch", index)` and serializes the database. The bytes
/// depend only on the inputs and `seed`.
pub fn build_patch_database(lists: &ObjectSurfaceLists, cfg: &PatchConfig, seed: u64, exec: Execution) -> Result<(Vec<u8>, String, PatchDbSummary)> {
    let records: Vec<Result<Patch>> =
        par::map_range(exec, lists.objects.len(), |i| build_training_patch(lists, i, cfg, derive_seed(seed, "patch", i as u64)));
    let mut body = Vec::new();
    body.extend_from_slice(b"PRPD");
    body.extend_from_slice(&1u32.to_le_bytes());
    let count_pos = body.len();
    body.extend_from_slice(&0u32.to_le_bytes());
    let mut index = String::new();
    let mut summary = PatchDbSummary::default();
    for record in records {
        let patch = match record {
            Ok(p) => p,
            Err(Error::Construction(_)) => {
                summary.failed += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let bytes = patch.to_bytes();
        let d = patch.provenance.difficulty.unwrap_or(Difficulty::Ignored);
        if let Some(slot) = Difficulty::LEVELS.iter().position(|&l| l == d) {
            summary.histogram[slot] += 1;
        }
        let _ = writeln!(
            index,
            "{} {} {} {} {} {}",
            summary.patches,
            patch.provenance.frame_id,
            patch.provenance.object_index,
            d.name(),
            body.len(),
            bytes.len()
        );
        body.extend_from_slice(&bytes);
        summary.patches += 1;
    }
    body[count_pos..count_pos + 4].copy_from_slice(&(summary.patches as u32).to_le_bytes());
    Ok((body, index, summary))
}

pub fn write_patch_database(dir: &Path, body: &[u8], index: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let db = dir.join(DB_FILE);
    fs::write(&db, body).map_err(|e| Error::io(&db, e))?;
    let idx = dir.join(INDEX_FILE);
    fs::write(&idx, index).map_err(|e| Error::io(&idx, e))
}

/// Random-access reader over a database directory.
#[derive(Debug, Clone)]
pub struct PatchDatabase {
    body: Vec<u8>,
    spans: Vec<(usize, usize)>,
}

impl PatchDatabase {
    pub fn open(dir: &Path) -> Result<Self> {
        let db = dir.join(DB_FILE);
        let body = fs::read(&db).map_err(|e| Error::io(&db, e))?;
        Self::from_bytes(body)
    }

    /// Parses a database body, walking the records sequentially.
    pub fn from_bytes(body: Vec<u8>) -> Result<Self> {
        let bad = |msg: &str| Error::format("patch database", None, msg);
        if body.get(..4) != Some(b"PRPD") {
            return Err(bad("bad magic"));
        }
        let mut cur = ByteCursor { bytes: &body, pos: 4 };
        let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
        if version != 1 {
            return Err(bad("unsupported version"));
        }
        let count = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut spans = Vec::with_capacity(count);
        for _ in 0..count {
            let start = cur.pos;
            read_patch_record(&mut cur).ok_or_else(|| bad("truncated record"))?;
            spans.push((start, cur.pos));
        }
        if cur.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { body, spans })
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn record_bytes(&self, index: usize) -> Result<&[u8]> {
        let (a, b) = *self
            .spans
            .get(index)
            .ok_or_else(|| Error::Contract(format!("record {index} out of range ({} records)", self.len())))?;
        Ok(&self.body[a..b])
    }

    pub fn read(&self, index: usize) -> Result<Patch> {
        Patch::from_bytes(self.record_bytes(index)?)
    }
}

/// Extraction knobs for inference patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractConfig {
    pub patch_size: f64,
    pub margin: f64,
    /// Other proposals only clear their points when their score reaches this.
    pub removal_score_threshold: Option<f64>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            patch_size: PATCH_SIZE,
            margin: BOX_MARGIN,
            removal_score_threshold: None,
        }
    }
}

/// A patch cut around a proposal, in the frame rotated by `rotation` about
/// the sensor z-axis.
#[derive(Debug, Clone, PartialEq)]
pub struct InferencePatch {
    pub points: Vec<Point>,
    /// Proposal center in the patch frame, `(range, 0)`.
    pub center: [f64; 2],
    /// Angle applied to the scene (minus the proposal azimuth).
    pub rotation: f64,
    pub removed_points: usize,
}

impl InferencePatch {
    pub fn to_scene(&self, b: &OrientedBox3D) -> OrientedBox3D {
        b.rotated_about_z(-self.rotation, [0.0, 0.0])
    }

    pub fn to_patch(&self, b: &OrientedBox3D) -> OrientedBox3D {
        b.rotated_about_z(self.rotation, [0.0, 0.0])
    }
}

/// Crops the square around `center` in the depth-axis-aligned frame and
/// clears the points of other (sufficiently confident) proposals.
pub fn extract_inference_patch(scene: &[Point], center: [f64; 2], others: &[(OrientedBox3D, f64)], cfg: &ExtractConfig) -> InferencePatch {
    let rotation = -center[1].atan2(center[0]);
    let range = center[0].hypot(center[1]);
    let half = 0.5 * cfg.patch_size;
    let reach = half * std::f64::consts::SQRT_2;
    let (s, c) = rotation.sin_cos();
    let blockers: Vec<&OrientedBox3D> = others
        .iter()
        .filter(|(_, score)| cfg.removal_score_threshold.is_none_or(|t| *score >= t))
        .map(|(b, _)| b)
        .collect();
    let patch_center = [range, 0.0];
    let mut points = Vec::new();
    let mut removed = 0usize;
    for p in scene {
        if (p.x - center[0]).hypot(p.y - center[1]) > reach {
            continue;
        }
        let q = Point {
            x: c * p.x - s * p.y,
            y: s * p.x + c * p.y,
            ..*p
        };
        if !inside_square(&q, patch_center, half) {
            continue;
        }
        if blockers.iter().any(|b| b.contains(p.x, p.y, p.z, cfg.margin)) {
            removed += 1;
            continue;
        }
        points.push(q);
    }
    InferencePatch {
        points,
        center: patch_center,
        rotation,
        removed_points: removed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car_frame() -> FrameData {
        let gt = OrientedBox3D::new(12.0, 5.0, -0.9, 3.9, 1.6, 1.56, 0.4);
        let mut points = Vec::new();
        // ground grid
        for i in 0..60 {
            for j in 0..60 {
                points.push(Point::new(6.0 + 0.2 * i as f64, -1.0 + 0.2 * j as f64, -1.68, 0.1));
            }
        }
        // car interior
        for i in 0..10 {
            for j in 0..5 {
                let (lx, ly) = (-1.8 + 0.4 * i as f64, -0.7 + 0.35 * j as f64);
                let (s, c) = gt.yaw.sin_cos();
                points.push(Point::new(gt.cx + c * lx - s * ly, gt.cy + s * lx + c * ly, -0.5, 0.6));
            }
        }
        FrameData {
            id: "000001".into(),
            points,
            objects: vec![LabeledObject {
                gt,
                difficulty: Difficulty::Easy,
                class_name: "Car".into(),
            }],
        }
    }

    #[test]
    fn one_car_gives_one_entry_each() {
        let cfg = PatchConfig::default();
        let lists = build_object_surface_lists(&[car_frame()], &cfg);
        assert_eq!(lists.objects.len(), 1);
        assert_eq!(lists.surfaces.len(), 1);
        assert_eq!(lists.objects[0].points.len(), 50 + lists.objects[0].points.iter().filter(|p| p.z < -1.0).count());
        let obj = &lists.objects[0];
        let s = &lists.surfaces[0];
        // no surface point falls in the (rotated) enlarged box
        let aligned = obj.gt.rotated_about_z(-s.alignment, [0.0, 0.0]);
        assert!(s.points.iter().all(|p| !aligned.contains(p.x, p.y, p.z, cfg.margin - 1e-9)));
        assert!(aligned.azimuth().abs() < 1e-9);
        assert!(s.points.iter().all(|p| inside_square(p, s.center(), 4.8)));
    }

    #[test]
    fn window_selects_nearest() {
        let surfaces: Vec<SurfaceEntry> = [1.0, 2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&d| SurfaceEntry {
                points: vec![],
                vertical_ref: -1.7,
                distance: d,
                alignment: 0.0,
                frame_id: String::new(),
                object_index: 0,
            })
            .collect();
        assert_eq!(nearest_window(&surfaces, 4.5, 2), (1, 3));
        assert_eq!(nearest_window(&surfaces, 0.0, 3), (0, 3));
        assert_eq!(nearest_window(&surfaces, 100.0, 2), (3, 5));
        assert_eq!(nearest_window(&surfaces, 3.0, 100), (0, 5));
    }

    #[test]
    fn placement_sets_height() {
        let lists = build_object_surface_lists(&[car_frame()], &PatchConfig::default());
        let mut surface = lists.surfaces[0].clone();
        let object = &lists.objects[0];
        surface.vertical_ref = object.gt.bottom() + 0.2;
        surface.distance = 20.0;
        let placed = place_object_on_surface(object, &surface);
        assert!((placed.gt.bottom() - surface.vertical_ref).abs() < 1e-9);
        assert_eq!(placed.object_points.len(), object.points.len());
        for (a, b) in placed.object_points.iter().zip(&object.points) {
            assert!((a.z - b.z - 0.2).abs() < 1e-12);
        }
        assert_eq!(placed.merged_points().len(), surface.points.len() + object.points.len());
        assert!((placed.gt.cx - 20.0).abs() < 1e-12 && placed.gt.cy == 0.0);
    }

    #[test]
    fn identity_augmentation_is_noop() {
        let lists = build_object_surface_lists(&[car_frame()], &PatchConfig::default());
        let placed = place_object_on_surface(&lists.objects[0], &lists.surfaces[0]);
        assert_eq!(apply_augmentation(&placed, &AugmentParams::identity()), placed);
    }

    #[test]
    fn mirror_negates_lateral_and_yaw() {
        let lists = build_object_surface_lists(&[car_frame()], &PatchConfig::default());
        let mut placed = place_object_on_surface(&lists.objects[0], &lists.surfaces[0]);
        placed.gt.cy = 1.5;
        let params = AugmentParams {
            global_mirror: true,
            ..AugmentParams::identity()
        };
        let out = apply_augmentation(&placed, &params);
        assert_eq!(out.gt.cy, -1.5);
        assert!((out.gt.yaw + placed.gt.yaw).abs() < 1e-15);
    }

    #[test]
    fn object_scale_keeps_bottom_face() {
        let lists = build_object_surface_lists(&[car_frame()], &PatchConfig::default());
        let placed = place_object_on_surface(&lists.objects[0], &lists.surfaces[0]);
        let params = AugmentParams {
            object_scale: 1.05,
            object_mirror: true,
            ..AugmentParams::identity()
        };
        let out = apply_augmentation(&placed, &params);
        assert!((out.gt.bottom() - placed.gt.bottom()).abs() < 1e-12);
        assert_eq!(out.gt.yaw, placed.gt.yaw);
        assert!(out.object_points.iter().all(|p| out.gt.contains(p.x, p.y, p.z, 0.2 * 1.05 + 1e-9)));
    }

    #[test]
    fn crop_cases() {
        let gt = OrientedBox3D::new(10.0, 0.0, -1.0, 3.9, 1.6, 1.5, 0.0);
        let pts = vec![Point::new(10.0, 0.0, -1.0, 0.0), Point::new(14.9, 0.0, -1.0, 0.0), Point::new(17.0, 0.0, -1.0, 0.0)];
        let p = crop_patch(&pts, &gt, CropNoise::zero(), 9.6, 3.0).unwrap();
        assert_eq!(p.crop_center, [10.0, 0.0]);
        assert_eq!(p.points.len(), 1);
        let p = crop_patch(&pts, &gt, CropNoise { radius: 3.0, angle: 0.0 }, 9.6, 3.0).unwrap();
        assert_eq!(p.crop_center, [13.0, 0.0]);
        assert_eq!(p.points.len(), 3);
        assert!(crop_patch(&pts, &gt, CropNoise { radius: 3.5, angle: 0.0 }, 9.6, 3.0).is_err());
        assert!(matches!(
            crop_patch(&pts, &gt, CropNoise { radius: 8.0, angle: 0.0 }, 2.0, 10.0),
            Err(Error::Construction(_))
        ));
    }

    #[test]
    fn patch_record_roundtrip() {
        let lists = build_object_surface_lists(&[car_frame()], &PatchConfig::default());
        let patch = build_training_patch(&lists, 0, &PatchConfig::default(), 11).unwrap();
        let back = Patch::from_bytes(&patch.to_bytes()).unwrap();
        assert_eq!(back.gt, patch.gt);
        assert_eq!(back.log, patch.log);
        assert_eq!(back.provenance, patch.provenance);
        assert_eq!(back.points.len(), patch.points.len());
        assert_eq!(back.to_bytes(), patch.to_bytes());
    }

    #[test]
    fn inference_patch_is_aligned() {
        let frame = car_frame();
        let gt = frame.objects[0].gt;
        let ip = extract_inference_patch(&frame.points, [gt.cx, gt.cy], &[], &ExtractConfig::default());
        let local = ip.to_patch(&gt);
        assert!(local.cy.abs() < 1e-9);
        assert!((local.cx - gt.range()).abs() < 1e-9);
        let back = ip.to_scene(&local);
        assert!((back.cx - gt.cx).abs() < 1e-9 && (back.cy - gt.cy).abs() < 1e-9);
        assert_eq!(ip.removed_points, 0);
        // the proposal's own car is kept
        assert!(ip.points.iter().filter(|p| p.z > -1.0).count() == 50);
    }

    #[test]
    fn other_proposals_clear_points() {
        let frame = car_frame();
        let gt = frame.objects[0].gt;
        let center = [gt.cx - 3.0, gt.cy];
        let ip = extract_inference_patch(&frame.points, center, &[(gt, 0.9)], &ExtractConfig::default());
        assert!(ip.points.iter().all(|p| p.z < -1.0));
        assert!(ip.removed_points >= 50);
        let gated = ExtractConfig {
            removal_score_threshold: Some(0.95),
            ..ExtractConfig::default()
        };
        let ip = extract_inference_patch(&frame.points, center, &[(gt, 0.9)], &gated);
        assert_eq!(ip.removed_points, 0);
    }
}
