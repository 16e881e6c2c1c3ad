//! Synthetic KITTI-format scenes: flat ground with non-overlapping cars
//! sampled on their box surfaces. Used for end-to-end checks and demos when
//! real data is unavailable.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{bev_intersection_area, OrientedBox3D};
use crate::kitti_io::{format_label_line, label_from_sensor_box, write_point_cloud, CalibrationSet, LabelRecord, Point, PointCloud};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub cars: (usize, usize),
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub ground_z: f64,
    pub ground_spacing: f64,
    pub points_per_car: usize,
    /// Chance of one extra `Van` per frame.
    pub van_prob: f64,
    /// Minimum BEV gap kept between objects.
    pub clearance: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            cars: (3, 6),
            x_range: (6.0, 40.0),
            y_range: (-12.0, 12.0),
            ground_z: -1.73,
            ground_spacing: 0.4,
            points_per_car: 200,
            van_prob: 0.3,
            clearance: 0.6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    pub id: String,
    pub cloud: PointCloud,
    pub labels: Vec<LabelRecord>,
    pub calib: CalibrationSet,
    /// Sensor-frame boxes, aligned with `labels`.
    pub boxes: Vec<OrientedBox3D>,
}

/// A random valid box; handy for property tests.
pub fn random_box(rng: &mut ChaCha8Rng) -> OrientedBox3D {
    OrientedBox3D::new(
        rng.gen_range(-20.0..20.0),
        rng.gen_range(-20.0..20.0),
        rng.gen_range(-2.0..1.0),
        rng.gen_range(0.5..6.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(-PI..PI),
    )
}

fn grown(b: &OrientedBox3D, by: f64) -> OrientedBox3D {
    OrientedBox3D {
        l: b.l + by,
        w: b.w + by,
        ..*b
    }
}

fn surface_points(b: &OrientedBox3D, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw, hh) = (0.5 * b.l, 0.5 * b.w, 0.5 * b.h);
    // areas of the four sides and the roof, used as face weights
    let faces = [b.l * b.h, b.l * b.h, b.w * b.h, b.w * b.h, b.l * b.w];
    let total: f64 = faces.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            while face < 4 && pick >= faces[face] {
                pick -= faces[face];
                face += 1;
            }
            let u: f64 = rng.gen_range(-1.0..1.0);
            let v: f64 = rng.gen_range(-1.0..1.0);
            let (lx, ly, lz) = match face {
                0 => (u * hl, hw, v * hh),
                1 => (u * hl, -hw, v * hh),
                2 => (hl, u * hw, v * hh),
                3 => (-hl, u * hw, v * hh),
                _ => (u * hl, v * hw, hh),
            };
            // pull slightly inside so stored f32 coordinates stay in the box
            let (lx, ly, lz) = (0.98 * lx, 0.98 * ly, 0.98 * lz);
            Point::new(b.cx + c * lx - s * ly, b.cy + s * lx + c * ly, b.cz + lz, rng.gen_range(0.4..0.9))
        })
        .collect()
}

pub fn generate_frame(id: &str, seed: u64, cfg: &SyntheticConfig) -> SyntheticFrame {
    let mut rng = rng_from_seed(seed);
    let calib = CalibrationSet::synthetic();
    let n_cars = rng.gen_range(cfg.cars.0..=cfg.cars.1);
    let want_van = rng.gen_bool(cfg.van_prob.clamp(0.0, 1.0));
    let mut objects: Vec<(OrientedBox3D, &str)> = Vec::new();
    let mut attempts = 0;
    while objects.len() < n_cars + usize::from(want_van) && attempts < 500 {
        attempts += 1;
        let is_van = objects.len() == n_cars;
        let (l, w, h) = if is_van {
            (rng.gen_range(4.6..5.4), rng.gen_range(1.8..2.1), rng.gen_range(1.9..2.3))
        } else {
            (rng.gen_range(3.5..4.5), rng.gen_range(1.5..1.8), rng.gen_range(1.4..1.6))
        };
        let b = OrientedBox3D::new(
            rng.gen_range(cfg.x_range.0..cfg.x_range.1),
            rng.gen_range(cfg.y_range.0..cfg.y_range.1),
            cfg.ground_z + 0.5 * h,
            l,
            w,
            h,
            rng.gen_range(-PI..PI),
        );
        let g = grown(&b, cfg.clearance);
        if objects.iter().all(|(o, _)| bev_intersection_area(&g, &grown(o, cfg.clearance)) == 0.0) {
            objects.push((b, if is_van { "Van" } else { "Car" }));
        }
    }

    let mut points = Vec::new();
    let nx = ((cfg.x_range.1 + 8.0) / cfg.ground_spacing) as usize;
    let ny = ((cfg.y_range.1 - cfg.y_range.0 + 16.0) / cfg.ground_spacing) as usize;
    for i in 0..nx {
        for j in 0..ny {
            let x = 2.0 + i as f64 * cfg.ground_spacing + rng.gen_range(-0.05..0.05);
            let y = cfg.y_range.0 - 8.0 + j as f64 * cfg.ground_spacing + rng.gen_range(-0.05..0.05);
            let z = cfg.ground_z + rng.gen_range(-0.02..0.02);
            if objects.iter().any(|(o, _)| o.contains(x, y, z, 0.3)) {
                continue;
            }
            points.push(Point::new(x, y, z, rng.gen_range(0.05..0.3)));
        }
    }
    let mut labels = Vec::new();
    let mut boxes = Vec::new();
    for (b, class) in &objects {
        points.extend(surface_points(b, cfg.points_per_car, &mut rng));
        let mut rec = label_from_sensor_box(b, class, &calib);
        rec.occlusion = rng.gen_range(0..=2);
        labels.push(rec);
        boxes.push(*b);
    }
    SyntheticFrame {
        id: id.to_string(),
        cloud: PointCloud::new(points, id),
        labels,
        calib,
        boxes,
    }
}

/// Writes `n_frames` scenes under `root/training/{velodyne,label_2,calib}` and
/// split files `root/ImageSets/{train,val,trainval}.txt` (first half train,
/// second half val). Returns the frame ids.
pub fn write_dataset(root: &Path, n_frames: usize, seed: u64, cfg: &SyntheticConfig) -> Result<Vec<String>> {
    let training = root.join("training");
    for sub in ["velodyne", "label_2", "calib"] {
        let dir = training.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let sets = root.join("ImageSets");
    fs::create_dir_all(&sets).map_err(|e| Error::io(&sets, e))?;
    let ids: Vec<String> = (0..n_frames).map(|i| format!("{i:06}")).collect();
    for (i, id) in ids.iter().enumerate() {
        let frame = generate_frame(id, derive_seed(seed, "synthetic-frame", i as u64), cfg);
        write_point_cloud(&training.join("velodyne").join(format!("{id}.bin")), &frame.cloud)?;
        let text: String = frame.labels.iter().map(|l| format_label_line(l, None) + "\n").collect();
        let path = training.join("label_2").join(format!("{id}.txt"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let path = training.join("calib").join(format!("{id}.txt"));
        fs::write(&path, frame.calib.to_text()).map_err(|e| Error::io(&path, e))?;
    }
    let half = n_frames / 2;
    for (name, slice) in [("train", &ids[..half]), ("val", &ids[half..]), ("trainval", &ids[..])] {
        let path = sets.join(format!("{name}.txt"));
        let text: String = slice.iter().map(|id| format!("{id}\n")).collect();
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(ids)
}
