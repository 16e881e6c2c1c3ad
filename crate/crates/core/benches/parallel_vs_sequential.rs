use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use patchref::inference::{detect_frame, proposals_from_ground_truth, OracleScorer, RefineConfig};
use patchref::kitti_io::{KittiFrame, PointCloud};
use patchref::par::Execution;
use patchref::patch_pipeline::{build_object_surface_lists, build_patch_database, FrameData, PatchConfig};
use patchref::synthetic::{generate_frame, SyntheticConfig, SyntheticFrame};
use patchref::voxelizer::{encode_batch, preset_lrn};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn frames(n: usize) -> Vec<SyntheticFrame> {
    (0..n).map(|i| generate_frame(&format!("{i:06}"), 1000 + i as u64, &SyntheticConfig::default())).collect()
}

fn bench_encode(c: &mut Criterion) {
    let cfg = preset_lrn();
    // one patch-sized cloud per object
    let clouds: Vec<PointCloud> = frames(4)
        .iter()
        .flat_map(|f| {
            f.boxes.iter().map(move |b| {
                let pts = f.cloud.points.iter().filter(|p| (p.x - b.cx).abs() < 4.8 && (p.y - b.cy).abs() < 4.8).map(|p| {
                    let mut q = *p;
                    q.x -= b.cx;
                    q.y -= b.cy;
                    q
                });
                PointCloud::new(pts.collect(), f.id.clone())
            })
        })
        .collect();
    let mut g = c.benchmark_group("encode_batch");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| b.iter(|| encode_batch(black_box(&clouds), &cfg, exec)));
    }
    g.finish();
}

fn bench_patch_db(c: &mut Criterion) {
    let cfg = PatchConfig::default();
    let data: Vec<FrameData> = frames(6)
        .into_iter()
        .map(|s| {
            FrameData::from_kitti(&KittiFrame {
                id: s.id,
                cloud: s.cloud,
                labels: s.labels,
                calib: s.calib,
            })
            .unwrap()
        })
        .collect();
    let lists = build_object_surface_lists(&data, &cfg);
    let mut g = c.benchmark_group("build_patch_database");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| b.iter(|| build_patch_database(black_box(&lists), &cfg, 7, exec).unwrap()));
    }
    g.finish();
}

fn bench_refine(c: &mut Criterion) {
    let f = frames(1).remove(0);
    let props = proposals_from_ground_truth(&f.id, &f.boxes);
    let scorer = OracleScorer { gts: f.boxes.clone() };
    let cfg = RefineConfig::default();
    let mut g = c.benchmark_group("refine");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| detect_frame(black_box(&f.cloud.points), &props, &scorer, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_encode, bench_patch_db, bench_refine);
criterion_main!(benches);
