use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use patchref::inference::{format_proposals, Proposal, ProposalSource};
use patchref::kitti_io::{camera_box_to_sensor_frame, classify_difficulty, KittiLayout};
use patchref::patch_pipeline::{PatchDatabase, DB_FILE};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchref")).args(args).output().expect("spawn patchref")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

struct Dataset {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Dataset {
    fn new(frames: usize, seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("kitti");
        ok(&["gen-synthetic", "--out", s(&root), "--frames", &frames.to_string(), "--seed", &seed.to_string()]);
        Dataset { _dir: dir, root }
    }

    fn split(&self, name: &str) -> PathBuf {
        self.root.join("ImageSets").join(format!("{name}.txt"))
    }

    fn work(&self, name: &str) -> PathBuf {
        self.root.parent().unwrap().join(name)
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Parses `key value` pairs from lines that start with `prefix`.
fn tagged(out: &str, prefix: &str) -> BTreeMap<String, String> {
    out.lines()
        .filter_map(|l| l.strip_prefix(prefix))
        .filter_map(|l| l.trim().split_once(' '))
        .map(|(k, v)| (k.to_string(), v.trim().to_string()))
        .collect()
}

#[test]
fn inspect_matches_library_counts() {
    let ds = Dataset::new(2, 5);
    let out = ok(&["inspect", "--data-root", s(&ds.root), "000000"]);
    let frame = KittiLayout::new(&ds.root).load_frame("000000").unwrap();
    assert!(out.lines().any(|l| l == format!("points {}", frame.cloud.len())));
    let counts = tagged(&out, "count ");
    let mut want: BTreeMap<&str, usize> = BTreeMap::new();
    for l in frame.labels.iter().filter(|l| !l.is_dont_care()) {
        *want.entry(classify_difficulty(l).name()).or_default() += 1;
    }
    for name in ["easy", "moderate", "hard", "ignored"] {
        assert_eq!(counts[name], want.get(name).copied().unwrap_or(0).to_string(), "{name}");
    }
    let objects = out.lines().filter(|l| l.starts_with("object ")).count();
    assert_eq!(objects, frame.labels.iter().filter(|l| !l.is_dont_care()).count());
    let first = frame.labels.iter().find(|l| !l.is_dont_care()).unwrap();
    let b = camera_box_to_sensor_frame(first, &frame.calib).unwrap();
    assert!(out.contains(&format!("center ({:.3}, {:.3}, {:.3})", b.cx, b.cy, b.cz)));
}

#[test]
fn missing_frame_is_a_user_error() {
    let ds = Dataset::new(1, 0);
    let o = run(&["inspect", "--data-root", s(&ds.root), "999999"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("999999"));
}

#[test]
fn unknown_config_key_is_a_user_error() {
    let ds = Dataset::new(1, 0);
    let cfg = ds.work("run.cfg");
    fs::write(&cfg, "seed = 3\nbogus_key = 1\n").unwrap();
    let o = run(&["inspect", "--data-root", s(&ds.root), "--config", s(&cfg), "000000"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus_key"));
}

#[test]
fn config_file_and_flags_resolve_seed() {
    let ds = Dataset::new(1, 0);
    let cfg = ds.work("run.cfg");
    fs::write(&cfg, "# comment\nseed = 17\n").unwrap();
    let out = ok(&["inspect", "--data-root", s(&ds.root), "--config", s(&cfg), "000000"]);
    assert!(out.lines().any(|l| l == "seed = 17"));
    let out = ok(&["inspect", "--data-root", s(&ds.root), "--config", s(&cfg), "--seed", "4", "000000"]);
    assert!(out.lines().any(|l| l == "seed = 4"));
}

#[test]
fn patch_database_is_identical_across_worker_counts() {
    let ds = Dataset::new(6, 2);
    let split = ds.split("train");
    let mut bodies = Vec::new();
    for workers in ["1", "4"] {
        let out_dir = ds.work(&format!("db{workers}"));
        let out = ok(&["build-patch-db", "--data-root", s(&ds.root), "--split", s(&split), "--seed", "9", "--workers", workers, "--out", s(&out_dir)]);
        let patches: usize = out.lines().find_map(|l| l.strip_prefix("patches ")).unwrap().parse().unwrap();
        let hist: usize = tagged(&out, "difficulty ").values().map(|v| v.parse::<usize>().unwrap()).sum();
        assert_eq!(hist, patches);
        let db = PatchDatabase::open(&out_dir).unwrap();
        assert_eq!(db.len(), patches);
        bodies.push(fs::read(out_dir.join(DB_FILE)).unwrap());
    }
    assert!(!bodies[0].is_empty());
    assert_eq!(bodies[0], bodies[1]);
}

#[test]
fn extract_writes_patches_and_rotation_log() {
    let ds = Dataset::new(2, 8);
    let split = ds.split("trainval");
    let frame = KittiLayout::new(&ds.root).load_frame("000000").unwrap();
    let gts: Vec<_> = frame.labels.iter().filter(|l| l.class_name == "Car").map(|l| camera_box_to_sensor_frame(l, &frame.calib).unwrap()).collect();
    assert!(!gts.is_empty());
    let mut props: Vec<Proposal> = gts
        .iter()
        .map(|g| Proposal {
            frame_id: "000000".into(),
            center: [g.cx, g.cy],
            bbox: Some(*g),
            score: 0.9,
            source: ProposalSource::External,
        })
        .collect();
    props.push(Proposal {
        frame_id: "000000".into(),
        center: [5000.0, 0.0],
        bbox: None,
        score: 0.5,
        source: ProposalSource::External,
    });
    let prop_file = ds.work("props.txt");
    fs::write(&prop_file, format_proposals(&props)).unwrap();
    let out_dir = ds.work("patches");
    let out = ok(&["extract", "--data-root", s(&ds.root), "--split", s(&split), "--proposals", s(&prop_file), "--out", s(&out_dir)]);
    assert!(out.lines().any(|l| l == format!("patches {}", gts.len())));
    assert!(out.lines().any(|l| l == "skipped 1"));
    let log = fs::read_to_string(out_dir.join("rotations.txt")).unwrap();
    let rows: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), gts.len());
    for row in rows {
        let name = row.split_whitespace().next().unwrap();
        assert!(out_dir.join(format!("{name}.bin")).is_file());
    }
}

#[test]
fn refine_then_eval_reaches_full_precision() {
    let ds = Dataset::new(4, 3);
    let split = ds.split("trainval");
    let preds = ds.work("preds");
    let out = ok(&["refine", "--data-root", s(&ds.root), "--split", s(&split), "--out", s(&preds)]);
    assert!(out.lines().any(|l| l == "frames 4"));
    let result = ds.work("result.txt");
    let report = ok(&["eval", "--data-root", s(&ds.root), "--split", s(&split), "--predictions", s(&preds), "--interp", "r40", "--out", s(&result)]);
    assert!(report.contains("3d") && report.contains("bev"));
    let text = fs::read_to_string(&result).unwrap();
    let mut checked = 0;
    for line in text.lines().filter(|l| l.contains("_ap = ")) {
        let (_, v) = line.split_once(" = ").unwrap();
        if v != "n/a" {
            assert!((v.parse::<f64>().unwrap() - 100.0).abs() < 1e-9, "{line}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn eval_without_prediction_dir_is_a_user_error() {
    let ds = Dataset::new(1, 0);
    let o = run(&["eval", "--data-root", s(&ds.root), "--split", s(&ds.split("trainval")), "--predictions", s(&ds.work("nope"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selfcheck_passes_and_detects_injected_fault() {
    let out = ok(&["selfcheck", "--seed", "1"]);
    assert!(out.lines().any(|l| l == "seed = 1"));
    assert!(out.contains("suites passed"));
    let o = run(&["selfcheck", "--seed", "1", "--inject-fault", "codec"]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAIL"));
}
