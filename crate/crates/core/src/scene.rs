//! Voxel grids, ground-truth and prediction point sets, occupancy metrics and
//! the binary scene file format.
//!
//! Voxels are stored X-major: the linear index of `(x, y, z)` is
//! `(x * Y + y) * Z + z`. Label `0` is the empty class; semantic class `c`
//! (`1 <= c <= K`) maps to logit index `c - 1`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, Intrinsics, Vec3};
use crate::tensor::{argmax, softmax};
use crate::{Error, Result};

pub const EMPTY: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: Vec3,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: f64, origin: Vec3) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("grid dims must be positive".into()));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::InvalidArgument("voxel size must be positive".into()));
        }
        Ok(GridSpec {
            dims,
            voxel_size,
            origin,
        })
    }

    /// 24 x 24 x 16 at 0.2 m.
    pub fn toy() -> Self {
        GridSpec {
            dims: [24, 24, 16],
            voxel_size: 0.2,
            origin: [0.0; 3],
        }
    }

    /// 60 x 60 x 36 at 0.08 m, the benchmark geometry.
    pub fn paper() -> Self {
        GridSpec {
            dims: [60, 60, 36],
            voxel_size: 0.08,
            origin: [0.0; 3],
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn extent(&self) -> Vec3 {
        [
            self.dims[0] as f64 * self.voxel_size,
            self.dims[1] as f64 * self.voxel_size,
            self.dims[2] as f64 * self.voxel_size,
        ]
    }

    pub fn diagonal(&self) -> f64 {
        crate::geometry::norm(self.extent())
    }

    #[inline]
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    #[inline]
    pub fn unlinear(&self, i: usize) -> [usize; 3] {
        let z = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        let x = i / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    /// Voxel containing `p` under half-open `[lo, hi)` cells.
    pub fn locate(&self, p: Vec3) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    pub fn center(&self, idx: [usize; 3]) -> Vec3 {
        [
            self.origin[0] + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (idx[2] as f64 + 0.5) * self.voxel_size,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub labels: Vec<u8>,
}

impl VoxelGrid {
    pub fn empty(spec: GridSpec) -> Self {
        VoxelGrid {
            spec,
            labels: vec![EMPTY; spec.num_voxels()],
        }
    }

    pub fn get(&self, idx: [usize; 3]) -> u8 {
        self.labels[self.spec.linear(idx)]
    }

    pub fn set(&mut self, idx: [usize; 3], label: u8) {
        let i = self.spec.linear(idx);
        self.labels[i] = label;
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != EMPTY).count()
    }

    /// Checks every label against `num_classes` (semantic classes + empty).
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.labels.len() != self.spec.num_voxels() {
            return Err(Error::ShapeMismatch("label array length".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidClass {
                class: bad as usize,
                limit: num_classes,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthSet {
    pub positions: Vec<Vec3>,
    pub classes: Vec<u8>,
}

impl GroundTruthSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Predicted points with one score vector over the semantic classes each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pub positions: Vec<Vec3>,
    /// Row-major `M' x K`.
    pub logits: Vec<f64>,
    pub num_semantic: usize,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn logits_of(&self, i: usize) -> &[f64] {
        &self.logits[i * self.num_semantic..(i + 1) * self.num_semantic]
    }
}

/// Points dropped by [`voxelize_with_stats`] for falling outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VoxelizeStats {
    pub dropped: usize,
}

pub fn voxelize(points: &[(Vec3, u8)], spec: GridSpec) -> VoxelGrid {
    voxelize_with_stats(points, spec).0
}

/// Majority vote per voxel; ties go to the lowest class id.
pub fn voxelize_with_stats(points: &[(Vec3, u8)], spec: GridSpec) -> (VoxelGrid, VoxelizeStats) {
    let mut votes: Vec<(usize, u8)> = Vec::with_capacity(points.len());
    let mut stats = VoxelizeStats::default();
    for &(p, c) in points {
        match spec.locate(p) {
            Some(idx) => votes.push((spec.linear(idx), c)),
            None => stats.dropped += 1,
        }
    }
    votes.sort_unstable();
    let mut grid = VoxelGrid::empty(spec);
    let mut i = 0;
    while i < votes.len() {
        let voxel = votes[i].0;
        let (mut best, mut best_count) = (votes[i].1, 0usize);
        while i < votes.len() && votes[i].0 == voxel {
            let class = votes[i].1;
            let mut run = 0;
            while i < votes.len() && votes[i] == (voxel, class) {
                run += 1;
                i += 1;
            }
            // classes arrive ascending, strict > keeps the lowest on ties
            if run > best_count {
                best = class;
                best_count = run;
            }
        }
        grid.labels[voxel] = best;
    }
    (grid, stats)
}

/// One entry per occupied voxel, in X-major order.
pub fn extract_gt_set(grid: &VoxelGrid) -> GroundTruthSet {
    let mut gt = GroundTruthSet::default();
    for (i, &l) in grid.labels.iter().enumerate() {
        if l != EMPTY {
            gt.positions.push(grid.spec.center(grid.spec.unlinear(i)));
            gt.classes.push(l);
        }
    }
    gt
}

/// Rasterises predicted points: a point votes its argmax class when its top
/// softmax probability reaches `score_threshold`.
pub fn predset_to_grid(pred: &PredictionSet, spec: GridSpec, score_threshold: f64) -> VoxelGrid {
    let mut voters = Vec::with_capacity(pred.len());
    for (i, &p) in pred.positions.iter().enumerate() {
        let z = pred.logits_of(i);
        let probs = softmax(z);
        let k = argmax(z);
        if probs[k] >= score_threshold {
            voters.push((p, (k + 1) as u8));
        }
    }
    voxelize(&voters, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    /// Entry `k` is the IoU of class `k + 1`; `None` when the class is absent
    /// from both grids.
    pub per_class_iou: Vec<Option<f64>>,
    /// `None` when no semantic class is present in either grid.
    pub miou: Option<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }
}

/// Intersection/false-positive/false-negative counts, accumulated over one
/// or more grid pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsAccumulator {
    occ: [u64; 3],
    per_class: Vec<[u64; 3]>,
}

impl MetricsAccumulator {
    pub fn new(num_semantic: usize) -> Self {
        MetricsAccumulator {
            occ: [0; 3],
            per_class: vec![[0; 3]; num_semantic],
        }
    }

    pub fn add(&mut self, pred: &VoxelGrid, gt: &VoxelGrid) -> Result<()> {
        if pred.spec != gt.spec {
            return Err(Error::GridSpecMismatch);
        }
        let k = self.per_class.len();
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            for &l in &[p, g] {
                if l as usize > k {
                    return Err(Error::InvalidClass {
                        class: l as usize,
                        limit: k + 1,
                    });
                }
            }
            match (p != EMPTY, g != EMPTY) {
                (true, true) => self.occ[0] += 1,
                (true, false) => self.occ[1] += 1,
                (false, true) => self.occ[2] += 1,
                _ => {}
            }
            if p == g {
                if p != EMPTY {
                    self.per_class[p as usize - 1][0] += 1;
                }
            } else {
                if p != EMPTY {
                    self.per_class[p as usize - 1][1] += 1;
                }
                if g != EMPTY {
                    self.per_class[g as usize - 1][2] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let ratio = |c: &[u64; 3]| {
            let denom = c[0] + c[1] + c[2];
            (denom > 0).then(|| c[0] as f64 / denom as f64)
        };
        let iou = ratio(&self.occ).unwrap_or(1.0);
        let per_class_iou: Vec<Option<f64>> = self.per_class.iter().map(ratio).collect();
        let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        MetricsReport {
            iou,
            per_class_iou,
            miou,
        }
    }
}

/// Binary occupied/empty IoU; 1 when both grids are entirely empty.
pub fn occupancy_iou(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<f64> {
    if pred.spec != gt.spec {
        return Err(Error::GridSpecMismatch);
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        match (p != EMPTY, g != EMPTY) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = tp + fp + fn_;
    Ok(if denom == 0 { 1.0 } else { tp as f64 / denom as f64 })
}

/// Per-class IoU over `num_semantic` classes plus their mean over the
/// classes present in either grid.
pub fn miou(pred: &VoxelGrid, gt: &VoxelGrid, num_semantic: usize) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(num_semantic);
    acc.add(pred, gt)?;
    Ok(acc.report())
}

// ---------------------------------------------------------------------------
// Scene files

pub const SCENE_MAGIC: &[u8; 4] = b"DSC1";
pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub grid: VoxelGrid,
    pub camera: Camera,
}

impl SceneFile {
    pub fn encode(&self) -> Vec<u8> {
        let spec = &self.grid.spec;
        let mut out = Vec::with_capacity(64 + self.grid.labels.len());
        out.extend_from_slice(SCENE_MAGIC);
        out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
        for d in spec.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(spec.voxel_size as f32).to_le_bytes());
        for o in spec.origin {
            out.extend_from_slice(&(o as f32).to_le_bytes());
        }
        out.extend_from_slice(&self.grid.labels);
        let k = &self.camera.intrinsics;
        for v in [k.fx, k.fy, k.cx, k.cy] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for v in self.camera.pose_3x4() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != SCENE_MAGIC {
            return Err(Error::Format("bad scene magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != SCENE_VERSION {
            return Err(Error::Format(format!("unsupported scene version {version}")));
        }
        let dims = [
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
        ];
        let voxel_size = read_f32(&mut r)?;
        let origin = [read_f32(&mut r)?, read_f32(&mut r)?, read_f32(&mut r)?];
        let spec = GridSpec::new(dims, voxel_size, origin).map_err(|e| Error::Format(format!("scene header: {e}")))?;
        let mut labels = vec![0u8; spec.num_voxels()];
        read_exact(&mut r, &mut labels)?;
        let intrinsics = Intrinsics {
            fx: read_f32(&mut r)?,
            fy: read_f32(&mut r)?,
            cx: read_f32(&mut r)?,
            cy: read_f32(&mut r)?,
        };
        let mut pose = [0.0; 12];
        for p in pose.iter_mut() {
            *p = read_f32(&mut r)?;
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after camera block".into()));
        }
        let camera =
            Camera::from_pose_3x4(intrinsics, &pose).map_err(|e| Error::Format(format!("camera block: {e}")))?;
        Ok(SceneFile {
            grid: VoxelGrid { spec, labels },
            camera,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        SceneFile::decode(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated scene file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b) as f64)
}
