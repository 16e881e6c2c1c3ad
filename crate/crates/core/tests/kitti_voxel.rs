mod common;

use std::f64::consts::PI;

use patchref::kitti_io::{
    camera_box_to_sensor_frame, classify_difficulty, decode_point_cloud, encode_point_cloud, label_from_sensor_box, read_point_cloud, write_point_cloud, CalibrationSet, Difficulty,
    LabelRecord, Point, PointCloud,
};
use patchref::geometry::OrientedBox3D;
use patchref::voxelizer::{encode_sample, group_points, preset_lrn, EncodedSample, FEATURE_CHANNELS};
use proptest::prelude::*;

fn arb_cloud() -> impl Strategy<Value = Vec<[f32; 4]>> {
    prop::collection::vec((-80.0f32..80.0, -80.0f32..80.0, -5.0f32..5.0, 0.0f32..=1.0).prop_map(|(x, y, z, r)| [x, y, z, r]), 0..300)
}

/// Points spread over the lrn grid and a bit beyond, clustered enough to
/// hit the per-voxel cap.
fn arb_patch_cloud() -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((-5.5..5.5f64, -5.5..5.5f64, -3.5..1.5f64, 0.0..=1.0f64), 1..400).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (x, y, z, r))| if i % 3 == 0 { Point::new(0.31, -0.2, -1.1, r) } else { Point::new(x, y, z, r) })
            .collect()
    })
}

proptest! {
    #[test]
    fn point_file_roundtrip_is_byte_exact(raw in arb_cloud()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.bin");
        let mut bytes = Vec::new();
        for q in &raw {
            for v in q {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(&path, &bytes).unwrap();
        let cloud = read_point_cloud(&path).unwrap();
        prop_assert_eq!(cloud.len(), raw.len());
        let out = dir.path().join("again.bin");
        write_point_cloud(&out, &cloud).unwrap();
        prop_assert_eq!(std::fs::read(&out).unwrap(), bytes.clone());
        prop_assert_eq!(common::raw_points(&encode_point_cloud(&cloud)), raw);
        prop_assert_eq!(decode_point_cloud(&bytes, "x").unwrap().points, cloud.points);
    }

    #[test]
    fn camera_sensor_roundtrip(x in 2.0..70.0f64, y in -30.0..30.0f64, z in -2.5..1.0f64, yaw in -PI..PI, l in 3.0..5.0f64) {
        let calib = CalibrationSet::synthetic();
        let b = OrientedBox3D::new(x, y, z, l, 1.6, 1.5, yaw);
        let label = label_from_sensor_box(&b, "Car", &calib);
        let back = camera_box_to_sensor_frame(&label, &calib).unwrap();
        let again = label_from_sensor_box(&back, "Car", &calib);
        for k in 0..3 {
            prop_assert!((again.location_cam[k] - label.location_cam[k]).abs() < 1e-6);
        }
        prop_assert!((back.cx - x).abs() < 1e-6 && (back.cy - y).abs() < 1e-6 && (back.cz - z).abs() < 1e-6);
        prop_assert!(common::angle_gap(back.yaw, yaw) < 1e-9);
    }

    #[test]
    fn relaxing_a_label_never_makes_it_stricter(
        height in 0.0..80.0f64, occ in 0i32..4, trunc in 0.0..0.8f64,
        dh in 0.0..30.0f64, docc in 0i32..2, dtrunc in 0.0..0.3f64,
    ) {
        let label = |h: f64, o: i32, t: f64| LabelRecord {
            class_name: "Car".into(),
            truncation: t,
            occlusion: o,
            alpha: 0.0,
            bbox2d: [0.0, 100.0, 50.0, 100.0 + h],
            dims: [1.5, 1.6, 3.9],
            location_cam: [0.0, 1.0, 20.0],
            rotation_y: 0.0,
        };
        let strict = classify_difficulty(&label(height + dh, occ, trunc));
        let loose = classify_difficulty(&label(height, (occ + docc).min(3), trunc + dtrunc));
        prop_assert!(loose >= strict, "{:?} -> {:?}", strict, loose);
    }

    #[test]
    fn grouping_invariants(cloud in arb_patch_cloud()) {
        let cfg = preset_lrn();
        let set = group_points(&cloud, &cfg).unwrap();
        prop_assert_eq!(&set, &group_points(&cloud, &cfg).unwrap());
        let mut seen = vec![false; cloud.len()];
        for (coord, members) in set.iter() {
            prop_assert!(!members.is_empty() && members.len() <= cfg.max_points_per_voxel);
            for &i in members {
                prop_assert!(!seen[i]);
                seen[i] = true;
                let p = cloud[i];
                for (a, v) in [p.x, p.y, p.z].into_iter().enumerate() {
                    let lo = cfg.origin[a] + coord[a] as f64 * cfg.voxel_size[a];
                    prop_assert!(v >= lo - 1e-9 && v < lo + cfg.voxel_size[a] + 1e-9);
                }
            }
        }
        let mut per_voxel = std::collections::HashMap::new();
        for p in &cloud {
            if let Some(c) = cfg.voxel_of(p, cfg.grid_dims()) {
                *per_voxel.entry(c).or_insert(0usize) += 1;
            }
        }
        let capped = per_voxel.values().any(|&n| n > cfg.max_points_per_voxel);
        let inside = cloud.iter().filter(|p| p.x.abs() < 4.8 && p.y.abs() < 4.8 && p.z >= -3.0 && p.z < 1.0).count();
        prop_assert!(set.total_points() <= cloud.len());
        prop_assert_eq!(set.total_points() == cloud.len(), inside == cloud.len() && !capped);
    }

    #[test]
    fn grouping_is_permutation_covariant(cloud in arb_patch_cloud(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let cfg = preset_lrn();
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        order.shuffle(&mut common::rng(seed));
        let shuffled: Vec<Point> = order.iter().map(|&i| cloud[i]).collect();
        let a = group_points(&cloud, &cfg).unwrap();
        let b = group_points(&shuffled, &cfg).unwrap();
        let occupancy = |s: &patchref::voxelizer::SparseVoxelSet| {
            let mut v: Vec<([i32; 3], usize)> = s.iter().map(|(c, m)| (*c, m.len())).collect();
            v.sort();
            v
        };
        // same voxels with the same occupancy
        prop_assert_eq!(occupancy(&a), occupancy(&b));
        // a voxel below the cap keeps exactly the same points
        for (coord, members) in a.iter() {
            if members.len() < cfg.max_points_per_voxel {
                let (_, other) = b.iter().find(|(c, _)| *c == coord).unwrap();
                let mut mapped: Vec<usize> = other.iter().map(|&i| order[i]).collect();
                mapped.sort_unstable();
                prop_assert_eq!(mapped, members.to_vec());
            }
        }
        // a capped voxel keeps the first-come points of the shuffled order
        for (coord, members) in b.iter() {
            let pos: Vec<usize> = (0..shuffled.len()).filter(|&i| cfg.voxel_of(&shuffled[i], cfg.grid_dims()) == Some(*coord)).take(cfg.max_points_per_voxel).collect();
            prop_assert_eq!(members.to_vec(), pos);
        }
    }

    #[test]
    fn encoded_sample_container_roundtrip(cloud in arb_patch_cloud()) {
        let set = group_points(&cloud, &preset_lrn()).unwrap();
        prop_assume!(!set.is_empty());
        let sample = encode_sample(&set, &cloud).unwrap();
        prop_assert_eq!(sample.n_points(), set.total_points());
        prop_assert_eq!(sample.features.len(), FEATURE_CHANNELS * set.total_points());
        prop_assert_eq!(*sample.offsets().last().unwrap(), sample.n_points());
        prop_assert!(sample.features.iter().all(|v| v.is_finite()));
        let bytes = sample.to_bytes();
        prop_assert_eq!(EncodedSample::from_bytes(&bytes).unwrap(), sample);
    }
}

#[test]
fn truncated_point_file_is_rejected() {
    let cloud = PointCloud::new(vec![Point::new(1.0, 2.0, 3.0, 0.5)], "x");
    let mut bytes = encode_point_cloud(&cloud);
    bytes.pop();
    assert!(decode_point_cloud(&bytes, "x").is_err());
}

#[test]
fn difficulty_levels_are_ordered() {
    assert!(Difficulty::Easy < Difficulty::Moderate && Difficulty::Moderate < Difficulty::Hard && Difficulty::Hard < Difficulty::Ignored);
}
