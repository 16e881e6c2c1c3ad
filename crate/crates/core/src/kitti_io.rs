//! KITTI object-benchmark file formats and frame conversions.
//!
//! * `velodyne/<id>.bin`: little-endian `f32` quadruples `(x, y, z, reflectance)`.
//! * `label_2/<id>.txt`: 15 whitespace fields per object, an optional 16th
//!   field carries a detection score in prediction files.
//! * `calib/<id>.txt`: named matrix rows (`R0_rect:`, `Tr_velo_to_cam:`, `P2:`).
//! * split files: one zero-padded six digit frame id per line.

use std::collections::HashSet;
use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{bev_corners, wrap_angle, OrientedBox3D};

/// One LiDAR return in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Reflectance in [0, 1].
    pub r: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame_id: impl Into<String>) -> Self {
        Self {
            points,
            frame_id: frame_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

const POINT_BYTES: usize = 16;

/// Decodes a `.bin` payload.
pub fn decode_point_cloud(bytes: &[u8], frame_id: &str) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(POINT_BYTES) {
        return Err(Error::format(
            format!("point cloud {frame_id}"),
            None,
            format!("length {} is not a multiple of {POINT_BYTES} bytes", bytes.len()),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / POINT_BYTES);
    for (i, chunk) in bytes.chunks_exact(POINT_BYTES).enumerate() {
        let mut v = [0f64; 4];
        for (k, slot) in v.iter_mut().enumerate() {
            let raw: [u8; 4] = chunk[4 * k..4 * k + 4].try_into().expect("chunk of 16 bytes");
            *slot = f64::from(f32::from_le_bytes(raw));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::data(format!("point cloud {frame_id}"), format!("non-finite value at point {i}")));
        }
        if !(0.0..=1.0).contains(&v[3]) {
            return Err(Error::data(
                format!("point cloud {frame_id}"),
                format!("reflectance {} outside [0, 1] at point {i}", v[3]),
            ));
        }
        points.push(Point::new(v[0], v[1], v[2], v[3]));
    }
    Ok(PointCloud::new(points, frame_id))
}

/// Encodes points as `.bin` bytes. Coordinates are narrowed to `f32`.
pub fn encode_point_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * POINT_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn frame_id_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_point_cloud(&bytes, &frame_id_of(path))
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_point_cloud(cloud)).map_err(|e| Error::io(path, e))
}

/// One object line of a KITTI label file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub class_name: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// (left, top, right, bottom) in pixels.
    pub bbox2d: [f64; 4],
    /// (h, w, l) in meters.
    pub dims: [f64; 3],
    /// Bottom-face center in the rectified camera frame.
    pub location_cam: [f64; 3],
    pub rotation_y: f64,
}

impl LabelRecord {
    pub fn is_dont_care(&self) -> bool {
        self.class_name == "DontCare"
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox2d[3] - self.bbox2d[1]
    }
}

fn parse_line(line: &str, lineno: usize, what: &str, allow_score: bool, need_score: bool) -> Result<(LabelRecord, Option<f64>)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let ok = match fields.len() {
        15 => !need_score,
        16 => allow_score,
        _ => false,
    };
    if !ok {
        let want = if need_score { "16" } else { "15 or 16" };
        return Err(Error::format(what, Some(lineno), format!("expected {want} fields, found {}", fields.len())));
    }
    let mut nums = [0f64; 15];
    for (k, slot) in nums.iter_mut().enumerate().skip(1) {
        if k == 2 {
            continue;
        }
        *slot = fields[k]
            .parse::<f64>()
            .map_err(|_| Error::data(what, format!("line {lineno}: field {} ({:?}) is not a number", k + 1, fields[k])))?;
    }
    let occlusion = fields[2]
        .parse::<i32>()
        .or_else(|_| fields[2].parse::<f64>().map(|v| v as i32))
        .map_err(|_| Error::data(what, format!("line {lineno}: occlusion {:?} is not an integer", fields[2])))?;
    let score = if fields.len() == 16 {
        Some(
            fields[15]
                .parse::<f64>()
                .map_err(|_| Error::data(what, format!("line {lineno}: score {:?} is not a number", fields[15])))?,
        )
    } else {
        None
    };
    let rec = LabelRecord {
        class_name: fields[0].to_string(),
        truncation: nums[1],
        occlusion,
        alpha: nums[3],
        bbox2d: [nums[4], nums[5], nums[6], nums[7]],
        dims: [nums[8], nums[9], nums[10]],
        location_cam: [nums[11], nums[12], nums[13]],
        rotation_y: nums[14],
    };
    if !rec.is_dont_care() && rec.dims.iter().any(|&d| d <= 0.0) {
        return Err(Error::data(what, format!("line {lineno}: non-positive dimensions {:?}", rec.dims)));
    }
    Ok((rec, score))
}

/// Parses label text. A 16th score field is accepted and dropped.
pub fn parse_labels(text: &str, what: &str) -> Result<Vec<LabelRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1, what, true, false).map(|(r, _)| r))
        .collect()
}

pub fn parse_label_file(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, &path.display().to_string())
}

/// Parses prediction text, where every line must carry a score.
pub fn parse_predictions(text: &str, what: &str) -> Result<Vec<(LabelRecord, f64)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1, what, true, true).map(|(r, s)| (r, s.unwrap_or_default())))
        .collect()
}

pub fn parse_prediction_file(path: &Path) -> Result<Vec<(LabelRecord, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, &path.display().to_string())
}

/// Formats a label line; with `score` it becomes a prediction line.
pub fn format_label_line(rec: &LabelRecord, score: Option<f64>) -> String {
    let mut s = format!(
        "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {} {} {} {} {} {} {}",
        rec.class_name,
        rec.truncation,
        rec.occlusion,
        rec.alpha,
        rec.bbox2d[0],
        rec.bbox2d[1],
        rec.bbox2d[2],
        rec.bbox2d[3],
        rec.dims[0],
        rec.dims[1],
        rec.dims[2],
        rec.location_cam[0],
        rec.location_cam[1],
        rec.location_cam[2],
        rec.rotation_y,
    );
    if let Some(score) = score {
        let _ = write!(s, " {score}");
    }
    s
}

/// Camera/LiDAR calibration of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub rect_rotation: Matrix3<f64>,
    pub velo_to_cam: Matrix3x4<f64>,
    pub cam_projection: Matrix3x4<f64>,
}

fn parse_row<const N: usize>(values: &[f64], key: &str, what: &str) -> Result<[f64; N]> {
    values
        .try_into()
        .map_err(|_| Error::format(what, None, format!("{key} expects {N} values, found {}", values.len())))
}

impl CalibrationSet {
    /// Sensor axes permuted into camera axes with a small lever arm, identity
    /// rectification and a typical left-color projection.
    pub fn synthetic() -> Self {
        Self {
            rect_rotation: Matrix3::identity(),
            velo_to_cam: Matrix3x4::new(
                0.0, -1.0, 0.0, -0.004, //
                0.0, 0.0, -1.0, -0.076, //
                1.0, 0.0, 0.0, -0.272,
            ),
            cam_projection: Matrix3x4::new(
                721.5377, 0.0, 609.5593, 44.85728, //
                0.0, 721.5377, 172.854, 0.2163791, //
                0.0, 0.0, 1.0, 0.002745884,
            ),
        }
    }

    pub fn parse(text: &str, what: &str) -> Result<Self> {
        let mut r0 = None;
        let mut tr = None;
        let mut p2 = None;
        for (i, line) in text.lines().enumerate() {
            let Some((key, rest)) = line.split_once(':') else {
                continue;
            };
            let key = key.trim();
            if !matches!(key, "R0_rect" | "Tr_velo_to_cam" | "P2") {
                continue;
            }
            let values = rest
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::data(what, format!("line {}: unparsable number in {key}", i + 1)))?;
            match key {
                "R0_rect" => r0 = Some(Matrix3::from_row_slice(&parse_row::<9>(&values, key, what)?)),
                "Tr_velo_to_cam" => tr = Some(Matrix3x4::from_row_slice(&parse_row::<12>(&values, key, what)?)),
                _ => p2 = Some(Matrix3x4::from_row_slice(&parse_row::<12>(&values, key, what)?)),
            }
        }
        let missing = |k: &str| Error::format(what, None, format!("missing {k} entry"));
        let calib = Self {
            rect_rotation: r0.ok_or_else(|| missing("R0_rect"))?,
            velo_to_cam: tr.ok_or_else(|| missing("Tr_velo_to_cam"))?,
            cam_projection: p2.ok_or_else(|| missing("P2"))?,
        };
        let gram = calib.rect_rotation.transpose() * calib.rect_rotation;
        if (gram - Matrix3::identity()).amax() > 1e-4 {
            return Err(Error::data(what, "R0_rect is not orthonormal within 1e-4"));
        }
        Ok(calib)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Serializes the three matrices in the calib file layout.
    pub fn to_text(&self) -> String {
        let row = |vals: &[f64]| vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        let r0: Vec<f64> = self.rect_rotation.transpose().iter().copied().collect();
        let tr: Vec<f64> = self.velo_to_cam.transpose().iter().copied().collect();
        let p2: Vec<f64> = self.cam_projection.transpose().iter().copied().collect();
        format!("P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n", row(&p2), row(&r0), row(&tr))
    }

    /// Homogeneous sensor → rectified camera transform.
    pub fn velo_to_rect(&self) -> Matrix4<f64> {
        let mut tr = Matrix4::identity();
        tr.fixed_view_mut::<3, 4>(0, 0).copy_from(&self.velo_to_cam);
        let mut r0 = Matrix4::identity();
        r0.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rect_rotation);
        r0 * tr
    }

    pub fn rect_to_velo(&self) -> Result<Matrix4<f64>> {
        self.velo_to_rect()
            .try_inverse()
            .ok_or_else(|| Error::Numeric("calibration transform is singular".into()))
    }

    /// Projects a rectified-camera point into image pixels; `None` behind the camera.
    pub fn project(&self, p_rect: Vector3<f64>) -> Option<[f64; 2]> {
        let q = self.cam_projection * Vector4::new(p_rect.x, p_rect.y, p_rect.z, 1.0);
        (q.z > 1e-3).then(|| [q.x / q.z, q.y / q.z])
    }
}

fn apply(m: &Matrix4<f64>, p: [f64; 3]) -> [f64; 3] {
    let q = m * Vector4::new(p[0], p[1], p[2], 1.0);
    [q.x, q.y, q.z]
}

/// Converts a camera-frame label into a sensor-frame box whose `cz` is the
/// centroid. Heading follows `yaw = -rotation_y - π/2`.
pub fn camera_box_to_sensor_frame(label: &LabelRecord, calib: &CalibrationSet) -> Result<OrientedBox3D> {
    let inv = calib.rect_to_velo()?;
    let [h, w, l] = label.dims;
    let [x, y, z] = apply(&inv, label.location_cam);
    Ok(OrientedBox3D::new(x, y, z + 0.5 * h, l, w, h, -label.rotation_y - FRAC_PI_2))
}

/// Inverse of [`camera_box_to_sensor_frame`]: (dims (h, w, l), bottom center
/// in the camera frame, rotation_y).
pub fn sensor_box_to_camera(b: &OrientedBox3D, calib: &CalibrationSet) -> ([f64; 3], [f64; 3], f64) {
    let fwd = calib.velo_to_rect();
    let loc = apply(&fwd, [b.cx, b.cy, b.bottom()]);
    ([b.h, b.w, b.l], loc, wrap_angle(-b.yaw - FRAC_PI_2))
}

/// Builds a prediction-style label record for a sensor-frame box, with the
/// 2D box taken from the projected corners.
pub fn label_from_sensor_box(b: &OrientedBox3D, class_name: &str, calib: &CalibrationSet) -> LabelRecord {
    let (dims, loc, ry) = sensor_box_to_camera(b, calib);
    let fwd = calib.velo_to_rect();
    let mut bbox = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    let mut visible = true;
    for c in bev_corners(b).vertices {
        for z in [b.bottom(), b.top()] {
            let [x, y, zc] = apply(&fwd, [c[0], c[1], z]);
            match calib.project(Vector3::new(x, y, zc)) {
                Some([u, v]) => {
                    bbox[0] = bbox[0].min(u);
                    bbox[1] = bbox[1].min(v);
                    bbox[2] = bbox[2].max(u);
                    bbox[3] = bbox[3].max(v);
                }
                None => visible = false,
            }
        }
    }
    if !visible {
        bbox = [0.0; 4];
    }
    LabelRecord {
        class_name: class_name.to_string(),
        truncation: 0.0,
        occlusion: 0,
        alpha: wrap_angle(ry - loc[0].atan2(loc[2])),
        bbox2d: bbox,
        dims,
        location_cam: loc,
        rotation_y: ry,
    }
}

/// KITTI difficulty strata, ordered from strictest to loosest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

impl Difficulty {
    pub const LEVELS: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
            Difficulty::Ignored => "ignored",
        }
    }
}

/// (min 2D height px, max occlusion, max truncation) per level, from the
/// KITTI devkit.
const DIFFICULTY_TABLE: [(Difficulty, f64, i32, f64); 3] = [
    (Difficulty::Easy, 40.0, 0, 0.15),
    (Difficulty::Moderate, 25.0, 1, 0.30),
    (Difficulty::Hard, 25.0, 2, 0.50),
];

pub fn classify_difficulty(label: &LabelRecord) -> Difficulty {
    let height = label.bbox_height();
    DIFFICULTY_TABLE
        .iter()
        .find(|(_, min_h, max_occ, max_trunc)| height >= *min_h && label.occlusion <= *max_occ && label.truncation <= *max_trunc)
        .map(|(d, ..)| *d)
        .unwrap_or(Difficulty::Ignored)
}

/// Canonical split sizes.
pub const TRAIN_SPLIT_LEN: usize = 3712;
pub const VAL_SPLIT_LEN: usize = 3769;

pub fn parse_split(text: &str, what: &str) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let id = line.trim();
        if id.is_empty() {
            continue;
        }
        if id.len() != 6 || !id.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::format(what, Some(i + 1), format!("{id:?} is not a six digit frame id")));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::data(what, format!("line {}: duplicate frame id {id}", i + 1)));
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

pub fn load_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split(&text, &path.display().to_string())
}

/// Directory layout of the KITTI `training` tree.
#[derive(Debug, Clone)]
pub struct KittiLayout {
    pub root: PathBuf,
}

impl KittiLayout {
    /// Accepts either the `training` directory or its parent.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        let training = root.join("training");
        if !root.join("velodyne").is_dir() && training.join("velodyne").is_dir() {
            Self { root: training }
        } else {
            Self { root }
        }
    }

    pub fn velodyne(&self, id: &str) -> PathBuf {
        self.root.join("velodyne").join(format!("{id}.bin"))
    }

    pub fn label(&self, id: &str) -> PathBuf {
        self.root.join("label_2").join(format!("{id}.txt"))
    }

    pub fn calib(&self, id: &str) -> PathBuf {
        self.root.join("calib").join(format!("{id}.txt"))
    }

    pub fn has_frame(&self, id: &str) -> bool {
        self.velodyne(id).is_file() && self.label(id).is_file() && self.calib(id).is_file()
    }

    pub fn load_frame(&self, id: &str) -> Result<KittiFrame> {
        Ok(KittiFrame {
            id: id.to_string(),
            cloud: read_point_cloud(&self.velodyne(id))?,
            labels: parse_label_file(&self.label(id))?,
            calib: CalibrationSet::read(&self.calib(id))?,
        })
    }
}

/// Everything stored on disk for one frame.
#[derive(Debug, Clone)]
pub struct KittiFrame {
    pub id: String,
    pub cloud: PointCloud,
    pub labels: Vec<LabelRecord>,
    pub calib: CalibrationSet,
}
