use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use patchref::config::{parse_interpolation, parse_metric, RunConfig};
use patchref::evaluator::{evaluate_with, format_report, format_result_file, load_eval_frames};
use patchref::inference::{detect_frame, format_detections, load_proposals, proposal_in_scene, proposals_from_ground_truth, OracleScorer, Proposal};
use patchref::kitti_io::{camera_box_to_sensor_frame, classify_difficulty, load_split, write_point_cloud, Difficulty, KittiLayout, PointCloud};
use patchref::par::{self, Execution};
use patchref::patch_pipeline::{build_object_surface_lists_with, build_patch_database, extract_inference_patch, write_patch_database, FrameData};
use patchref::selfcheck::{run_selfcheck, SelfcheckOptions};
use patchref::synthetic::{write_dataset, SyntheticConfig};
use patchref::Error;

#[derive(Parser)]
#[command(name = "patchref", version, about = "Patch construction, refinement and KITTI evaluation for LiDAR car detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// KITTI root (the directory holding `training/`, or `training/` itself).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Split file with one frame id per line.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Flat `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    #[value(name = "3d")]
    ThreeD,
    Bev,
}

#[derive(Clone, Copy, ValueEnum)]
enum Interp {
    R11,
    R40,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Codec,
}

#[derive(Subcommand)]
enum Command {
    /// Print point and object counts for one frame.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Frame id, e.g. 000042.
        frame: String,
    },
    /// Build the training patch database for a split.
    BuildPatchDb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut inference patches around proposals.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine proposals with the ground-truth oracle scorer and write KITTI predictions.
    Refine {
        #[command(flatten)]
        common: Common,
        /// Proposal file; ground-truth boxes are used when omitted.
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average precision of KITTI prediction files.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory of `<id>.txt` prediction files.
        #[arg(long)]
        predictions: PathBuf,
        /// Restrict to one metric (both by default).
        #[arg(long, value_enum)]
        metric: Option<Metric>,
        #[arg(long, value_enum)]
        interp: Option<Interp>,
        /// Write `key = value` results here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the embedded oracle suites.
    Selfcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Deliberately break one component (for testing the harness).
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// Write a synthetic dataset in KITTI layout.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure classes mapped to exit codes 2 (bad input) and 1 (internal).
enum Failure {
    User(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::Format { .. } | Error::Data { .. } | Error::Config(_) | Error::Contract(_) => Failure::User(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &common.data_root {
        cfg.data_root = v.clone();
    }
    if let Some(v) = &common.split {
        cfg.split = v.clone();
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.workers {
        cfg.workers = v;
    }
    cfg.validate()?;
    eprintln!("# resolved config");
    for line in cfg.resolved().lines() {
        eprintln!("#   {line}");
    }
    println!("seed = {}", cfg.seed);
    Ok(cfg)
}

fn load_ids(cfg: &RunConfig) -> Result<(KittiLayout, Vec<String>), Failure> {
    let layout = KittiLayout::new(&cfg.data_root);
    let ids = load_split(&cfg.split)?;
    if let Some(missing) = ids.iter().find(|id| !layout.has_frame(id)) {
        return Err(Failure::User(format!("frame {missing} listed in {} is missing under {}", cfg.split.display(), layout.root.display())));
    }
    Ok((layout, ids))
}

fn write_file(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::User(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::User(format!("{}: {e}", path.display())))
}

fn cmd_inspect(common: &Common, frame: &str) -> Outcome {
    let cfg = resolve(common)?;
    let layout = KittiLayout::new(&cfg.data_root);
    if !layout.has_frame(frame) {
        return Err(Failure::User(format!("frame {frame} not found under {}", layout.root.display())));
    }
    let f = layout.load_frame(frame)?;
    println!("frame {}", f.id);
    println!("points {}", f.cloud.len());
    let mut counts: BTreeMap<Difficulty, usize> = BTreeMap::new();
    let mut dont_care = 0;
    for l in &f.labels {
        if l.is_dont_care() {
            dont_care += 1;
            continue;
        }
        let d = classify_difficulty(l);
        *counts.entry(d).or_default() += 1;
        let b = camera_box_to_sensor_frame(l, &f.calib)?;
        println!(
            "object {} {} center ({:.3}, {:.3}, {:.3}) size ({:.3}, {:.3}, {:.3}) yaw {:.4}",
            l.class_name,
            d.name(),
            b.cx,
            b.cy,
            b.cz,
            b.l,
            b.w,
            b.h,
            b.yaw
        );
    }
    for d in [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard, Difficulty::Ignored] {
        println!("count {} {}", d.name(), counts.get(&d).copied().unwrap_or(0));
    }
    println!("count dontcare {dont_care}");
    Ok(())
}

fn load_frames(layout: &KittiLayout, ids: &[String]) -> Result<Vec<FrameData>, Failure> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        out.push(FrameData::from_kitti(&layout.load_frame(id)?)?);
    }
    Ok(out)
}

fn cmd_build_patch_db(common: &Common, out: &Path) -> Outcome {
    let cfg = resolve(common)?;
    let (layout, ids) = load_ids(&cfg)?;
    let frames = load_frames(&layout, &ids)?;
    let patch_cfg = cfg.patch_config();
    let exec = Execution::default();
    let (body, index, summary) = par::with_workers(cfg.workers, || {
        let lists = build_object_surface_lists_with(&frames, &patch_cfg, exec);
        build_patch_database(&lists, &patch_cfg, cfg.seed, exec)
    })?;
    write_patch_database(out, &body, &index)?;
    println!("patches {}", summary.patches);
    for (d, n) in Difficulty::LEVELS.iter().zip(summary.histogram) {
        println!("difficulty {} {n}", d.name());
    }
    if summary.failed > 0 {
        println!("failed {}", summary.failed);
    }
    println!("database {}", out.display());
    Ok(())
}

fn cmd_extract(common: &Common, proposals: &Path, out: &Path) -> Outcome {
    let cfg = resolve(common)?;
    let (layout, ids) = load_ids(&cfg)?;
    let props = load_proposals(proposals)?;
    let extract_cfg = cfg.extract_config();
    fs::create_dir_all(out).map_err(|e| Failure::User(format!("{}: {e}", out.display())))?;
    let mut log = String::from("# patch frame proposal rotation center_x center_y points removed\n");
    let (mut written, mut skipped) = (0usize, 0usize);
    for id in &ids {
        let Some(list) = props.get(id) else { continue };
        let frame = layout.load_frame(id)?;
        for (k, p) in list.iter().enumerate() {
            if !proposal_in_scene(&frame.cloud.points, p.center) {
                eprintln!("warning: proposal {k} of frame {id} lies outside the scene, skipped");
                skipped += 1;
                continue;
            }
            let others: Vec<_> = list
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .filter_map(|(_, o)| o.bbox.map(|b| (b, o.score)))
                .collect();
            let patch = extract_inference_patch(&frame.cloud.points, p.center, &others, &extract_cfg);
            let name = format!("{id}_{k:04}");
            write_point_cloud(&out.join(format!("{name}.bin")), &PointCloud::new(patch.points.clone(), name.clone()))?;
            log.push_str(&format!(
                "{name} {id} {k} {:e} {:e} {:e} {} {}\n",
                patch.rotation,
                patch.center[0],
                patch.center[1],
                patch.points.len(),
                patch.removed_points
            ));
            written += 1;
        }
    }
    let unknown = props.keys().filter(|f| !ids.contains(f)).count();
    write_file(&out.join("rotations.txt"), &log)?;
    println!("patches {written}");
    println!("skipped {skipped}");
    if unknown > 0 {
        println!("frames_not_in_split {unknown}");
    }
    Ok(())
}

fn cmd_refine(common: &Common, proposals: Option<&Path>, out: &Path) -> Outcome {
    let cfg = resolve(common)?;
    let (layout, ids) = load_ids(&cfg)?;
    let props = proposals.map(load_proposals).transpose()?;
    let refine_cfg = cfg.refine_config();
    fs::create_dir_all(out).map_err(|e| Failure::User(format!("{}: {e}", out.display())))?;
    let mut total = 0;
    for id in &ids {
        let frame = layout.load_frame(id)?;
        let gts = frame
            .labels
            .iter()
            .filter(|l| l.class_name == cfg.class_name)
            .map(|l| camera_box_to_sensor_frame(l, &frame.calib))
            .collect::<patchref::Result<Vec<_>>>()?;
        let list: Vec<Proposal> = match &props {
            Some(p) => p.get(id).cloned().unwrap_or_default(),
            None => proposals_from_ground_truth(id, &gts),
        };
        let scorer = OracleScorer { gts };
        let dets = par::with_workers(cfg.workers, || detect_frame(&frame.cloud.points, &list, &scorer, &refine_cfg, Execution::default()))?;
        total += dets.len();
        write_file(&out.join(format!("{id}.txt")), &format_detections(&dets, &cfg.class_name, &frame.calib))?;
    }
    println!("frames {}", ids.len());
    println!("detections {total}");
    Ok(())
}

fn cmd_eval(common: &Common, predictions: &Path, metric: Option<Metric>, interp: Option<Interp>, out: Option<&Path>) -> Outcome {
    let mut cfg = resolve(common)?;
    if let Some(i) = interp {
        cfg.interpolation = parse_interpolation(match i {
            Interp::R11 => "r11",
            Interp::R40 => "r40",
        })?;
    }
    let metrics = match metric {
        Some(Metric::ThreeD) => vec![parse_metric("3d")?],
        Some(Metric::Bev) => vec![parse_metric("bev")?],
        None => vec![parse_metric("3d")?, parse_metric("bev")?],
    };
    if !predictions.is_dir() {
        return Err(Failure::User(format!("prediction directory {} does not exist", predictions.display())));
    }
    let (layout, ids) = load_ids(&cfg)?;
    let frames = load_eval_frames(&layout, &ids, predictions, &cfg.class_name)?;
    let mut results = Vec::new();
    for m in metrics {
        let mut ec = cfg.eval_config();
        ec.metric = m;
        results.push(par::with_workers(cfg.workers, || evaluate_with(&frames, &ec, Execution::default()))?);
    }
    print!("{}", format_report(&results, &cfg.class_name));
    if let Some(path) = out {
        write_file(path, &format_result_file(&results))?;
    }
    Ok(())
}

fn cmd_selfcheck(seed: Option<u64>, fault: Option<Fault>) -> Outcome {
    let opts = SelfcheckOptions {
        seed: seed.unwrap_or(0),
        inject_codec_fault: matches!(fault, Some(Fault::Codec)),
    };
    println!("seed = {}", opts.seed);
    let reports = run_selfcheck(&opts);
    let mut failed = Vec::new();
    for r in &reports {
        println!("{} {:<10} {:>7.2}s  {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.seconds, r.detail);
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} suites passed", reports.len());
        Ok(())
    } else {
        Err(Failure::Internal(format!("failed suites: {}", failed.join(", "))))
    }
}

fn cmd_gen_synthetic(out: &Path, frames: usize, seed: u64) -> Outcome {
    println!("seed = {seed}");
    let ids = write_dataset(out, frames, seed, &SyntheticConfig::default())?;
    println!("frames {}", ids.len());
    println!("root {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Inspect { common, frame } => cmd_inspect(common, frame),
        Command::BuildPatchDb { common, out } => cmd_build_patch_db(common, out),
        Command::Extract { common, proposals, out } => cmd_extract(common, proposals, out),
        Command::Refine { common, proposals, out } => cmd_refine(common, proposals.as_deref(), out),
        Command::Eval {
            common,
            predictions,
            metric,
            interp,
            out,
        } => cmd_eval(common, predictions, *metric, *interp, out.as_deref()),
        Command::Selfcheck { seed, inject_fault } => cmd_selfcheck(*seed, *inject_fault),
        Command::GenSynthetic { out, frames, seed } => cmd_gen_synthetic(out, *frames, *seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
