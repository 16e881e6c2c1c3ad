//! Sparse voxel grouping and network-input feature construction.
//!
//! Only occupied voxels are stored and features are ragged per voxel, so no
//! zero padding reaches the network boundary.
//!
//! # Encoded sample container
//!
//! [`EncodedSample::to_bytes`] writes, all little-endian:
//!
//! | field       | type                     |
//! |-------------|--------------------------|
//! | magic       | `b"PRVX"`                |
//! | version     | `u32` (= 1)              |
//! | n_voxels    | `u32`                    |
//! | n_points    | `u32`                    |
//! | channels    | `u32` (= 7)              |
//! | mean        | `f64` × channels         |
//! | stddev      | `f64` × channels         |
//! | coords      | `i32` × 3 × n_voxels     |
//! | counts      | `u32` × n_voxels         |
//! | features    | `f32` × channels × n_points, voxel-major then point order |

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;

use crate::error::{Error, Result};
use crate::kitti_io::{Point, PointCloud};
use crate::par::{self, Execution};
use crate::seed::{derive_seed, rng_from_seed};

/// Feature channels per point: x, y, z, r, then offsets to the voxel centroid.
pub const FEATURE_CHANNELS: usize = 7;

/// Channels whose spread falls below this are only mean-centered.
pub const MIN_STDDEV: f64 = 1e-6;

/// What to do when a voxel receives more than `max_points_per_voxel` points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverflowPolicy {
    /// Keep the first points in cloud order.
    #[default]
    KeepFirst,
    /// Keep a seeded uniform subset (stored in cloud order).
    RandomSubsample { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGridConfig {
    pub origin: [f64; 3],
    pub extent: [f64; 3],
    pub voxel_size: [f64; 3],
    pub max_points_per_voxel: usize,
    pub max_voxels: usize,
    pub overflow: OverflowPolicy,
}

impl VoxelGridConfig {
    pub fn validate(&self) -> Result<[usize; 3]> {
        if self.max_points_per_voxel == 0 {
            return Err(Error::Config("max_points_per_voxel must be at least 1".into()));
        }
        let mut dims = [0usize; 3];
        for (axis, dim) in dims.iter_mut().enumerate() {
            let (e, v) = (self.extent[axis], self.voxel_size[axis]);
            if !(e > 0.0 && v > 0.0 && e.is_finite() && v.is_finite()) {
                return Err(Error::Config(format!("axis {axis}: extent and voxel size must be positive")));
            }
            let n = e / v;
            if (n - n.round()).abs() > 1e-9 || n.round() < 1.0 {
                return Err(Error::Config(format!("axis {axis}: extent {e} is not a whole number of {v} voxels")));
            }
            *dim = n.round() as usize;
        }
        Ok(dims)
    }

    /// Grid dimensions (x, y, z). Panics on an invalid config.
    pub fn grid_dims(&self) -> [usize; 3] {
        self.validate().expect("invalid voxel grid config")
    }

    /// Same grid with the origin shifted in the ground plane.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut out = self.clone();
        out.origin[0] += dx;
        out.origin[1] += dy;
        out
    }

    /// Same grid centered on `(cx, cy)` in the ground plane.
    pub fn centered_at(&self, cx: f64, cy: f64) -> Self {
        let mut out = self.clone();
        out.origin[0] = cx - 0.5 * self.extent[0];
        out.origin[1] = cy - 0.5 * self.extent[1];
        out
    }

    /// Voxel coordinate of a point, or `None` outside the grid.
    pub fn voxel_of(&self, p: &Point, dims: [usize; 3]) -> Option<[i32; 3]> {
        let mut c = [0i32; 3];
        for (axis, v) in [p.x, p.y, p.z].into_iter().enumerate() {
            let idx = ((v - self.origin[axis]) / self.voxel_size[axis]).floor();
            if !(idx >= 0.0 && idx < dims[axis] as f64) {
                return None;
            }
            c[axis] = idx as i32;
        }
        Some(c)
    }
}

/// Patch-scale grid: 9.6 m × 9.6 m × 4 m at 0.15 m × 0.15 m × 4/19 m,
/// centered on the origin in x/y. Use [`VoxelGridConfig::centered_at`] to move
/// it onto a patch.
pub fn preset_lrn() -> VoxelGridConfig {
    VoxelGridConfig {
        origin: [-4.8, -4.8, -3.0],
        extent: [9.6, 9.6, 4.0],
        voxel_size: [0.15, 0.15, 4.0 / 19.0],
        max_points_per_voxel: 35,
        max_voxels: 64 * 64 * 19,
        overflow: OverflowPolicy::KeepFirst,
    }
}

/// Scene-scale grid with two vertical cells.
pub fn preset_rpn() -> VoxelGridConfig {
    VoxelGridConfig {
        origin: [0.0, -40.0, -3.0],
        extent: [70.4, 80.0, 4.0],
        voxel_size: [0.2, 0.2, 2.0],
        max_points_per_voxel: 35,
        max_voxels: 40_000,
        overflow: OverflowPolicy::KeepFirst,
    }
}

pub fn preset_by_name(name: &str) -> Option<VoxelGridConfig> {
    match name {
        "lrn" => Some(preset_lrn()),
        "rpn" => Some(preset_rpn()),
        _ => None,
    }
}

/// Occupied voxels with their (capped) member point indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVoxelSet {
    /// Occupied coordinates in first-seen order.
    pub coords: Vec<[i32; 3]>,
    /// Member indices into the source cloud, ascending.
    pub members: Vec<Vec<usize>>,
    pub dims: [usize; 3],
}

impl SparseVoxelSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn total_points(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[i32; 3], &[usize])> {
        self.coords.iter().zip(self.members.iter().map(Vec::as_slice))
    }
}

/// Groups points into occupied voxels.
pub fn group_points(cloud: &[Point], config: &VoxelGridConfig) -> Result<SparseVoxelSet> {
    let dims = config.validate()?;
    let cap = config.max_points_per_voxel;
    let keep_all = matches!(config.overflow, OverflowPolicy::RandomSubsample { .. });
    let mut lookup: HashMap<[i32; 3], usize> = HashMap::new();
    let mut coords = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, p) in cloud.iter().enumerate() {
        let Some(c) = config.voxel_of(p, dims) else {
            continue;
        };
        let slot = match lookup.get(&c) {
            Some(&slot) => slot,
            None => {
                if coords.len() >= config.max_voxels {
                    continue;
                }
                lookup.insert(c, coords.len());
                coords.push(c);
                members.push(Vec::new());
                coords.len() - 1
            }
        };
        let list = &mut members[slot];
        if keep_all || list.len() < cap {
            list.push(i);
        }
    }
    if let OverflowPolicy::RandomSubsample { seed } = config.overflow {
        for (slot, list) in members.iter_mut().enumerate() {
            if list.len() > cap {
                let mut rng = rng_from_seed(derive_seed(seed, "voxel-subsample", slot as u64));
                let mut picked: Vec<usize> = sample_indices(&mut rng, list.len(), cap).into_iter().map(|k| list[k]).collect();
                picked.sort_unstable();
                *list = picked;
            }
        }
    }
    Ok(SparseVoxelSet { coords, members, dims })
}

/// Network-boundary input for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub coords: Vec<[i32; 3]>,
    pub counts: Vec<u32>,
    /// Standardized features, `FEATURE_CHANNELS` per point, voxel-major.
    pub features: Vec<f32>,
    pub mean: [f64; FEATURE_CHANNELS],
    pub stddev: [f64; FEATURE_CHANNELS],
}

impl EncodedSample {
    pub fn n_points(&self) -> usize {
        self.features.len() / FEATURE_CHANNELS
    }

    /// Prefix offsets into the point axis, one entry per voxel plus the end.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.counts.len() + 1);
        let mut acc = 0usize;
        out.push(0);
        for &c in &self.counts {
            acc += c as usize;
            out.push(acc);
        }
        out
    }

    pub fn point_features(&self, point: usize) -> &[f32] {
        &self.features[point * FEATURE_CHANNELS..(point + 1) * FEATURE_CHANNELS]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + 112 + self.coords.len() * 16 + self.features.len() * 4);
        out.extend_from_slice(b"PRVX");
        for v in [1u32, self.coords.len() as u32, self.n_points() as u32, FEATURE_CHANNELS as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.mean.iter().chain(self.stddev.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.coords {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for c in &self.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for f in &self.features {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::format("encoded sample", None, msg);
        let mut cur = ByteCursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated header"))? != b"PRVX" {
            return Err(bad("bad magic"));
        }
        let mut header = [0u32; 4];
        for h in header.iter_mut() {
            *h = cur.u32().ok_or_else(|| bad("truncated header"))?;
        }
        let [version, n_voxels, n_points, channels] = header;
        if version != 1 || channels as usize != FEATURE_CHANNELS {
            return Err(bad("unsupported version or channel count"));
        }
        let mut mean = [0f64; FEATURE_CHANNELS];
        let mut stddev = [0f64; FEATURE_CHANNELS];
        for v in mean.iter_mut().chain(stddev.iter_mut()) {
            *v = cur.f64().ok_or_else(|| bad("truncated stats"))?;
        }
        let mut coords = Vec::with_capacity(n_voxels as usize);
        for _ in 0..n_voxels {
            let mut c = [0i32; 3];
            for v in c.iter_mut() {
                *v = cur.u32().ok_or_else(|| bad("truncated coords"))? as i32;
            }
            coords.push(c);
        }
        let counts = (0..n_voxels)
            .map(|_| cur.u32().ok_or_else(|| bad("truncated counts")))
            .collect::<Result<Vec<_>>>()?;
        if counts.iter().map(|&c| c as u64).sum::<u64>() != u64::from(n_points) {
            return Err(bad("counts do not sum to the point count"));
        }
        let features = (0..n_points as usize * FEATURE_CHANNELS)
            .map(|_| cur.u32().map(f32::from_bits).ok_or_else(|| bad("truncated features")))
            .collect::<Result<Vec<_>>>()?;
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            coords,
            counts,
            features,
            mean,
            stddev,
        })
    }
}

pub(crate) struct ByteCursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Option<f64> {
        self.u64().map(f64::from_bits)
    }
}

/// Raw (unnormalized) features of every stored point, voxel-major.
pub fn raw_features(voxels: &SparseVoxelSet, cloud: &[Point]) -> Vec<[f64; FEATURE_CHANNELS]> {
    let mut out = Vec::with_capacity(voxels.total_points());
    for (_, members) in voxels.iter() {
        let n = members.len() as f64;
        let mut centroid = [0f64; 3];
        for &i in members {
            let p = &cloud[i];
            centroid[0] += p.x;
            centroid[1] += p.y;
            centroid[2] += p.z;
        }
        centroid.iter_mut().for_each(|c| *c /= n);
        for &i in members {
            let p = &cloud[i];
            out.push([p.x, p.y, p.z, p.r, p.x - centroid[0], p.y - centroid[1], p.z - centroid[2]]);
        }
    }
    out
}

/// Builds ragged features and standardizes every channel with statistics over
/// the real points of this sample.
pub fn encode_sample(voxels: &SparseVoxelSet, cloud: &[Point]) -> Result<EncodedSample> {
    if voxels.is_empty() {
        return Err(Error::EmptySample);
    }
    let raw = raw_features(voxels, cloud);
    let n = raw.len() as f64;
    let mut mean = [0f64; FEATURE_CHANNELS];
    let mut stddev = [0f64; FEATURE_CHANNELS];
    for ch in 0..FEATURE_CHANNELS {
        let column: Vec<f64> = raw.iter().map(|f| f[ch]).collect();
        let m = par::pairwise_sum(&column) / n;
        let sq: Vec<f64> = column.iter().map(|v| (v - m) * (v - m)).collect();
        mean[ch] = m;
        stddev[ch] = (par::pairwise_sum(&sq) / n).sqrt();
    }
    let mut features = Vec::with_capacity(raw.len() * FEATURE_CHANNELS);
    for f in &raw {
        for ch in 0..FEATURE_CHANNELS {
            let centered = f[ch] - mean[ch];
            let v = if stddev[ch] < MIN_STDDEV { centered } else { centered / stddev[ch] };
            features.push(v as f32);
        }
    }
    Ok(EncodedSample {
        coords: voxels.coords.clone(),
        counts: voxels.members.iter().map(|m| m.len() as u32).collect(),
        features,
        mean,
        stddev,
    })
}

/// Groups and encodes many clouds.
pub fn encode_batch(clouds: &[PointCloud], config: &VoxelGridConfig, exec: Execution) -> Vec<Result<EncodedSample>> {
    par::map_collect(exec, clouds, |c| group_points(&c.points, config).and_then(|v| encode_sample(&v, &c.points)))
}
