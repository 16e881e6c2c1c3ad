//! Flat `key = value` run configuration. Every key has a default; unknown
//! keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluator::{EvalConfig, Interpolation, IouMetric};
use crate::inference::RefineConfig;
use crate::patch_pipeline::{AugmentConfig, ExtractConfig, PatchConfig};
use crate::voxelizer::{preset_by_name, VoxelGridConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub split: PathBuf,
    pub preset: String,
    pub seed: u64,
    pub workers: usize,
    pub class_name: String,
    pub margin: f64,
    pub patch_size: f64,
    pub surface_window: usize,
    pub resample_easy: f64,
    pub resample_moderate: f64,
    pub resample_hard: f64,
    pub min_object_points: usize,
    pub max_noise_radius: f64,
    pub mirror_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub object_mirror_prob: f64,
    pub object_scale_min: f64,
    pub object_scale_max: f64,
    pub rotation_min: f64,
    pub rotation_max: f64,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Negative disables score gating of point removal.
    pub removal_score_threshold: f64,
    pub iou_threshold: f64,
    pub metric: IouMetric,
    pub interpolation: Interpolation,
}

impl Default for RunConfig {
    fn default() -> Self {
        let patch = PatchConfig::default();
        let aug = patch.augment.clone();
        let refine = RefineConfig::default();
        let eval = EvalConfig::default();
        Self {
            data_root: PathBuf::from("data/kitti"),
            split: PathBuf::from("data/kitti/ImageSets/train.txt"),
            preset: "lrn".into(),
            seed: 0,
            workers: 0,
            class_name: patch.class_name,
            margin: patch.margin,
            patch_size: patch.patch_size,
            surface_window: patch.surface_window,
            resample_easy: patch.resample_probs[0],
            resample_moderate: patch.resample_probs[1],
            resample_hard: patch.resample_probs[2],
            min_object_points: patch.min_object_points,
            max_noise_radius: patch.max_noise_radius,
            mirror_prob: aug.mirror_prob,
            scale_min: aug.scale_range.0,
            scale_max: aug.scale_range.1,
            object_mirror_prob: aug.object_mirror_prob,
            object_scale_min: aug.object_scale_range.0,
            object_scale_max: aug.object_scale_range.1,
            rotation_min: aug.rotation_range.0,
            rotation_max: aug.rotation_range.1,
            score_threshold: refine.score_threshold,
            nms_threshold: refine.nms_threshold,
            removal_score_threshold: -1.0,
            iou_threshold: eval.iou_threshold,
            metric: eval.metric,
            interpolation: eval.interpolation,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

pub fn parse_metric(s: &str) -> Result<IouMetric> {
    match s {
        "3d" => Ok(IouMetric::ThreeD),
        "bev" => Ok(IouMetric::Bev),
        _ => Err(Error::Config(format!("metric must be 3d or bev, got {s:?}"))),
    }
}

pub fn parse_interpolation(s: &str) -> Result<Interpolation> {
    match s {
        "r11" => Ok(Interpolation::R11),
        "r40" => Ok(Interpolation::R40),
        _ => Err(Error::Config(format!("interpolation must be r11 or r40, got {s:?}"))),
    }
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_root" => self.data_root = PathBuf::from(value),
            "split" => self.split = PathBuf::from(value),
            "preset" => {
                if preset_by_name(value).is_none() {
                    return Err(Error::Config(format!("unknown grid preset {value:?}")));
                }
                self.preset = value.to_string();
            }
            "seed" => self.seed = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "class" => self.class_name = value.to_string(),
            "margin" => self.margin = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "surface_window" => self.surface_window = num(key, value)?,
            "resample_easy" => self.resample_easy = num(key, value)?,
            "resample_moderate" => self.resample_moderate = num(key, value)?,
            "resample_hard" => self.resample_hard = num(key, value)?,
            "min_object_points" => self.min_object_points = num(key, value)?,
            "max_noise_radius" => self.max_noise_radius = num(key, value)?,
            "mirror_prob" => self.mirror_prob = num(key, value)?,
            "scale_min" => self.scale_min = num(key, value)?,
            "scale_max" => self.scale_max = num(key, value)?,
            "object_mirror_prob" => self.object_mirror_prob = num(key, value)?,
            "object_scale_min" => self.object_scale_min = num(key, value)?,
            "object_scale_max" => self.object_scale_max = num(key, value)?,
            "rotation_min" => self.rotation_min = num(key, value)?,
            "rotation_max" => self.rotation_max = num(key, value)?,
            "score_threshold" => self.score_threshold = num(key, value)?,
            "nms_threshold" => self.nms_threshold = num(key, value)?,
            "removal_score_threshold" => self.removal_score_threshold = num(key, value)?,
            "iou_threshold" => self.iou_threshold = num(key, value)?,
            "metric" => self.metric = parse_metric(value)?,
            "interpolation" => self.interpolation = parse_interpolation(value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the current values. `#` starts a
    /// comment.
    pub fn apply_text(&mut self, text: &str, what: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(what, Some(i + 1), "expected key = value"))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{what} line {}: {e}", i + 1)))?;
        }
        self.validate()
    }

    pub fn from_text(text: &str, what: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, what)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("resample_easy", self.resample_easy),
            ("resample_moderate", self.resample_moderate),
            ("resample_hard", self.resample_hard),
            ("mirror_prob", self.mirror_prob),
            ("object_mirror_prob", self.object_mirror_prob),
        ];
        for (k, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{k} = {p} is not a probability")));
            }
        }
        let ranges = [
            ("scale", self.scale_min, self.scale_max),
            ("object_scale", self.object_scale_min, self.object_scale_max),
            ("rotation", self.rotation_min, self.rotation_max),
        ];
        for (k, lo, hi) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{k}_min/{k}_max = {lo}/{hi} is not a range")));
            }
        }
        if !(self.scale_min > 0.0 && self.object_scale_min > 0.0) {
            return Err(Error::Config("scale factors must be positive".into()));
        }
        if !(self.patch_size > 0.0 && self.margin >= 0.0 && self.max_noise_radius >= 0.0) {
            return Err(Error::Config("patch_size must be positive, margin and max_noise_radius non-negative".into()));
        }
        if self.surface_window == 0 {
            return Err(Error::Config("surface_window must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::Config(format!("nms_threshold {} outside [0, 1]", self.nms_threshold)));
        }
        self.eval_config().validate()
    }

    /// Every key with its resolved value, in `key = value` form.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data_root", self.data_root.display().to_string());
        kv("split", self.split.display().to_string());
        kv("preset", self.preset.clone());
        kv("seed", self.seed.to_string());
        kv("workers", self.workers.to_string());
        kv("class", self.class_name.clone());
        kv("margin", self.margin.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("surface_window", self.surface_window.to_string());
        kv("resample_easy", self.resample_easy.to_string());
        kv("resample_moderate", self.resample_moderate.to_string());
        kv("resample_hard", self.resample_hard.to_string());
        kv("min_object_points", self.min_object_points.to_string());
        kv("max_noise_radius", self.max_noise_radius.to_string());
        kv("mirror_prob", self.mirror_prob.to_string());
        kv("scale_min", self.scale_min.to_string());
        kv("scale_max", self.scale_max.to_string());
        kv("object_mirror_prob", self.object_mirror_prob.to_string());
        kv("object_scale_min", self.object_scale_min.to_string());
        kv("object_scale_max", self.object_scale_max.to_string());
        kv("rotation_min", self.rotation_min.to_string());
        kv("rotation_max", self.rotation_max.to_string());
        kv("score_threshold", self.score_threshold.to_string());
        kv("nms_threshold", self.nms_threshold.to_string());
        kv("removal_score_threshold", self.removal_score_threshold.to_string());
        kv("iou_threshold", self.iou_threshold.to_string());
        kv("metric", self.metric.name().to_string());
        kv("interpolation", self.interpolation.name().to_string());
        s
    }

    pub fn grid(&self) -> VoxelGridConfig {
        preset_by_name(&self.preset).expect("preset validated on set")
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            patch_size: self.patch_size,
            margin: self.margin,
            surface_window: self.surface_window,
            resample_probs: [self.resample_easy, self.resample_moderate, self.resample_hard],
            max_noise_radius: self.max_noise_radius,
            class_name: self.class_name.clone(),
            min_object_points: self.min_object_points,
            augment: AugmentConfig {
                mirror_prob: self.mirror_prob,
                scale_range: (self.scale_min, self.scale_max),
                object_mirror_prob: self.object_mirror_prob,
                object_scale_range: (self.object_scale_min, self.object_scale_max),
                rotation_range: (self.rotation_min, self.rotation_max),
            },
        }
    }

    pub fn extract_config(&self) -> ExtractConfig {
        ExtractConfig {
            patch_size: self.patch_size,
            margin: self.margin,
            removal_score_threshold: (self.removal_score_threshold >= 0.0).then_some(self.removal_score_threshold),
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            extract: self.extract_config(),
            score_threshold: self.score_threshold,
            nms_threshold: self.nms_threshold,
            ..RefineConfig::default()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            iou_threshold: self.iou_threshold,
            metric: self.metric,
            interpolation: self.interpolation,
            class_name: self.class_name.clone(),
        }
    }
}
