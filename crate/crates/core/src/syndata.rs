//! Procedural indoor scenes and exact voxel ray casting.
//!
//! A scene is an axis-aligned room shell (floor, ceiling and walls, one
//! voxel thick) holding non-overlapping furniture boxes that stand on the
//! floor, plus one pinhole camera inside the free space looking towards the
//! room centre. Generation is a pure function of `(recipe, seed)`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, DepthImage, Intrinsics, Vec3};
use crate::par::{self, Exec};
use crate::scene::{GridSpec, SceneFile, VoxelGrid, EMPTY};
use crate::{Error, Result};

pub const FLOOR: u8 = 1;
pub const CEILING: u8 = 2;
pub const WALL: u8 = 3;

pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    pub grid: GridSpec,
    /// Room footprint edge range in metres (x and y drawn independently).
    pub room_xy: [f64; 2],
    /// Room height range in metres, floor slab to ceiling slab inclusive.
    pub room_z: [f64; 2],
    pub furniture_min: usize,
    pub furniture_max: usize,
    /// Box footprint edge range in metres.
    pub box_xy: [f64; 2],
    pub box_z: [f64; 2],
    /// Semantic classes: floor, ceiling, wall and `n_semantic - 3` furniture.
    pub n_semantic: usize,
    /// Rendered image `[height, width]`.
    pub image: [usize; 2],
    pub fov_degrees: f64,
    /// Camera height above the floor slab, metres.
    pub eye_height: [f64; 2],
}

impl SceneRecipe {
    pub fn toy() -> Self {
        SceneRecipe {
            grid: GridSpec::toy(),
            room_xy: [3.2, 4.8],
            room_z: [2.4, 3.2],
            furniture_min: 2,
            furniture_max: 5,
            box_xy: [0.4, 1.2],
            box_z: [0.4, 1.0],
            n_semantic: 6,
            image: [32, 32],
            fov_degrees: 90.0,
            eye_height: [1.0, 1.6],
        }
    }

    pub fn paper() -> Self {
        SceneRecipe {
            grid: GridSpec::paper(),
            room_z: [2.24, 2.88],
            ..SceneRecipe::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_semantic < 4 {
            return bad("recipe needs at least 4 semantic classes".into());
        }
        if self.n_semantic > 255 {
            return bad("class ids must fit in a byte".into());
        }
        let ext = self.grid.extent();
        let eps = 1e-9;
        if self.room_xy[1] > ext[0].min(ext[1]) + eps || self.room_z[1] > ext[2] + eps {
            return bad(format!(
                "room up to {:?}/{:?} m exceeds grid extent {:?}",
                self.room_xy, self.room_z, ext
            ));
        }
        for (name, r) in [
            ("room_xy", self.room_xy),
            ("room_z", self.room_z),
            ("box_xy", self.box_xy),
            ("box_z", self.box_z),
            ("eye_height", self.eye_height),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(format!("{name} must be a positive nondecreasing range"));
            }
        }
        if self.furniture_min > self.furniture_max {
            return bad("furniture_min exceeds furniture_max".into());
        }
        if self.image[0] == 0 || self.image[1] == 0 || !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return bad("invalid image size or field of view".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let [h, w] = self.image;
        let f = (w as f64 / 2.0) / (self.fov_degrees.to_radians() / 2.0).tan();
        Intrinsics {
            fx: f as f32 as f64,
            fy: f as f32 as f64,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
        }
    }
}

fn voxels(range: [f64; 2], vs: f64, rng: &mut ChaCha8Rng) -> usize {
    let lo = (range[0] / vs).round().max(1.0) as usize;
    let hi = ((range[1] / vs).round() as usize).max(lo);
    rng.random_range(lo..=hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Box3 {
    lo: [usize; 3],
    /// Exclusive.
    hi: [usize; 3],
}

impl Box3 {
    fn overlaps(&self, o: &Box3) -> bool {
        (0..3).all(|a| self.lo[a] < o.hi[a] && o.lo[a] < self.hi[a])
    }
}

/// Builds one scene. Errors when box or camera placement needs more than
/// [`MAX_ATTEMPTS`] rejection-sampling draws in total.
pub fn generate_scene(recipe: &SceneRecipe, seed: u64) -> Result<(VoxelGrid, Camera)> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = recipe.grid;
    let vs = spec.voxel_size;
    let dims = spec.dims;
    let size = [
        voxels(recipe.room_xy, vs, &mut rng).clamp(3, dims[0]),
        voxels(recipe.room_xy, vs, &mut rng).clamp(3, dims[1]),
        voxels(recipe.room_z, vs, &mut rng).clamp(3, dims[2]),
    ];
    let mut lo = [0usize; 3];
    for a in 0..3 {
        lo[a] = rng.random_range(0..=dims[a] - size[a]);
    }
    let hi = [lo[0] + size[0] - 1, lo[1] + size[1] - 1, lo[2] + size[2] - 1];

    let mut grid = VoxelGrid::empty(spec);
    for x in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            grid.set([x, y, lo[2]], FLOOR);
            grid.set([x, y, hi[2]], CEILING);
            for z in lo[2] + 1..hi[2] {
                if x == lo[0] || x == hi[0] || y == lo[1] || y == hi[1] {
                    grid.set([x, y, z], WALL);
                }
            }
        }
    }

    // interior free space: [lo+1, hi-1] on every axis
    let inner_lo = [lo[0] + 1, lo[1] + 1, lo[2] + 1];
    let inner_hi = [hi[0], hi[1], hi[2]]; // exclusive
    let mut attempts = 0usize;
    let count = rng.random_range(recipe.furniture_min..=recipe.furniture_max);
    let n_furniture_classes = recipe.n_semantic - 3;
    let mut boxes: Vec<Box3> = Vec::with_capacity(count);
    while boxes.len() < count {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::PlacementExhausted(MAX_ATTEMPTS));
        }
        let bsize = [
            voxels(recipe.box_xy, vs, &mut rng),
            voxels(recipe.box_xy, vs, &mut rng),
            voxels(recipe.box_z, vs, &mut rng),
        ];
        if (0..3).any(|a| inner_lo[a] + bsize[a] > inner_hi[a]) {
            continue;
        }
        let bx = rng.random_range(inner_lo[0]..=inner_hi[0] - bsize[0]);
        let by = rng.random_range(inner_lo[1]..=inner_hi[1] - bsize[1]);
        let b = Box3 {
            lo: [bx, by, inner_lo[2]],
            hi: [bx + bsize[0], by + bsize[1], inner_lo[2] + bsize[2]],
        };
        if boxes.iter().any(|o| o.overlaps(&b)) {
            continue;
        }
        let class = 4 + rng.random_range(0..n_furniture_classes) as u8;
        for x in b.lo[0]..b.hi[0] {
            for y in b.lo[1]..b.hi[1] {
                for z in b.lo[2]..b.hi[2] {
                    grid.set([x, y, z], class);
                }
            }
        }
        boxes.push(b);
    }

    let intr = recipe.intrinsics();
    let floor_top = spec.origin[2] + (lo[2] + 1) as f64 * vs;
    let ceil_bottom = spec.origin[2] + hi[2] as f64 * vs;
    let room_lo = [
        spec.origin[0] + inner_lo[0] as f64 * vs,
        spec.origin[1] + inner_lo[1] as f64 * vs,
    ];
    let room_hi = [
        spec.origin[0] + inner_hi[0] as f64 * vs,
        spec.origin[1] + inner_hi[1] as f64 * vs,
    ];
    let room_center = [(room_lo[0] + room_hi[0]) / 2.0, (room_lo[1] + room_hi[1]) / 2.0];
    let min_offset = 0.25 * ((room_hi[0] - room_lo[0]).min(room_hi[1] - room_lo[1]) / 2.0);
    let target = [
        room_center[0],
        room_center[1],
        floor_top + 0.3 * (ceil_bottom - floor_top),
    ];
    loop {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::PlacementExhausted(MAX_ATTEMPTS));
        }
        let q = |v: f64| v as f32 as f64;
        let eye = [
            q(rng.random_range(room_lo[0] + vs..room_hi[0] - vs)),
            q(rng.random_range(room_lo[1] + vs..room_hi[1] - vs)),
            q((floor_top + rng.random_range(recipe.eye_height[0]..=recipe.eye_height[1])).min(ceil_bottom - vs)),
        ];
        let horizontal = ((eye[0] - room_center[0]).powi(2) + (eye[1] - room_center[1]).powi(2)).sqrt();
        if horizontal < min_offset.max(vs) {
            continue;
        }
        if !clear_around(&grid, eye) {
            continue;
        }
        let mut camera = Camera::look_at(intr, eye, target)?;
        for row in camera.rotation.iter_mut() {
            row.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        return Ok((grid, camera));
    }
}

/// True when the voxel containing `p` and its 26 neighbours are empty.
fn clear_around(grid: &VoxelGrid, p: Vec3) -> bool {
    let Some(idx) = grid.spec.locate(p) else {
        return false;
    };
    for dx in -1i64..=1 {
        for dy in -1i64..=1 {
            for dz in -1i64..=1 {
                let n = [idx[0] as i64 + dx, idx[1] as i64 + dy, idx[2] as i64 + dz];
                if (0..3).any(|a| n[a] < 0 || n[a] >= grid.spec.dims[a] as i64) {
                    continue;
                }
                if grid.get([n[0] as usize, n[1] as usize, n[2] as usize]) != EMPTY {
                    return false;
                }
            }
        }
    }
    true
}

/// Result of casting one ray through the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Camera-frame depth of the entry point into the hit voxel.
    pub depth: f64,
    pub voxel: [usize; 3],
}

/// Amanatides-Woo traversal along `origin + t * dir`. With `dir` expressed
/// so that its camera-frame `z` is 1, `t` is the camera-frame depth.
pub fn cast_ray(grid: &VoxelGrid, origin: Vec3, dir: Vec3) -> Option<RayHit> {
    let spec = &grid.spec;
    let mut idx = spec.locate(origin)?;
    if grid.get(idx) != EMPTY {
        return Some(RayHit { depth: 0.0, voxel: idx });
    }
    let vs = spec.voxel_size;
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (spec.origin[a] + (idx[a] + 1) as f64 * vs - origin[a]) / dir[a];
            t_delta[a] = vs / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (spec.origin[a] + idx[a] as f64 * vs - origin[a]) / dir[a];
            t_delta[a] = -vs / dir[a];
        }
    }
    loop {
        let mut axis = 0;
        for a in 1..3 {
            if t_max[a] < t_max[axis] {
                axis = a;
            }
        }
        if !t_max[axis].is_finite() {
            return None;
        }
        let t_entry = t_max[axis];
        let next = idx[axis] as i64 + step[axis];
        if next < 0 || next >= spec.dims[axis] as i64 {
            return None;
        }
        idx[axis] = next as usize;
        if grid.get(idx) != EMPTY {
            return Some(RayHit {
                depth: t_entry,
                voxel: idx,
            });
        }
        t_max[axis] += t_delta[axis];
    }
}

/// Ray direction through the centre of pixel `(row, col)`, scaled so its
/// camera-frame `z` component is 1.
pub fn pixel_ray(camera: &Camera, row: usize, col: usize) -> Vec3 {
    let k = &camera.intrinsics;
    camera.rotate_to_world([(col as f64 + 0.5 - k.cx) / k.fx, (row as f64 + 0.5 - k.cy) / k.fy, 1.0])
}

/// Depth image of the first occupied voxel along each pixel ray; 0 where the
/// ray leaves the grid without a hit.
pub fn render_depth(grid: &VoxelGrid, camera: &Camera, height: usize, width: usize) -> DepthImage {
    render_depth_with(Exec::default(), grid, camera, height, width)
}

pub fn render_depth_with(exec: Exec, grid: &VoxelGrid, camera: &Camera, height: usize, width: usize) -> DepthImage {
    let rows = par::map_range(exec, height, |row| {
        (0..width)
            .map(|col| cast_ray(grid, camera.position, pixel_ray(camera, row, col)).map_or(0.0, |h| h.depth))
            .collect::<Vec<_>>()
    });
    DepthImage {
        height,
        width,
        data: rows.concat(),
    }
}

/// Voxel hit by the ray through each pixel, row-major.
pub fn render_hits(grid: &VoxelGrid, camera: &Camera, height: usize, width: usize) -> Vec<Option<RayHit>> {
    let rows = par::map_range(Exec::default(), height, |row| {
        (0..width)
            .map(|col| cast_ray(grid, camera.position, pixel_ray(camera, row, col)))
            .collect::<Vec<_>>()
    });
    rows.concat()
}

// ---------------------------------------------------------------------------
// Datasets on disk

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub recipe: SceneRecipe,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
}

pub fn scene_file_name(i: usize) -> String {
    format!("scene_{i:05}.dsc")
}

/// Generates `seeds.len()` scenes into `dir` together with the manifest.
pub fn write_dataset(dir: &Path, recipe: &SceneRecipe, seeds: &[u64]) -> Result<Manifest> {
    write_dataset_with(Exec::default(), dir, recipe, seeds)
}

pub fn write_dataset_with(exec: Exec, dir: &Path, recipe: &SceneRecipe, seeds: &[u64]) -> Result<Manifest> {
    recipe.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scenes = par::map_slice(exec, seeds, |&s| generate_scene(recipe, s));
    let mut files = Vec::with_capacity(seeds.len());
    for (i, scene) in scenes.into_iter().enumerate() {
        let (grid, camera) = scene?;
        let name = scene_file_name(i);
        SceneFile { grid, camera }.write(&dir.join(&name))?;
        files.push(name);
    }
    let manifest = Manifest {
        recipe: recipe.clone(),
        seeds: seeds.to_vec(),
        files,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Scenes of a dataset directory in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub scenes: Vec<SceneFile>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let scenes = manifest
            .files
            .iter()
            .map(|f| SceneFile::read(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        for s in &scenes {
            s.grid.validate(manifest.recipe.n_semantic + 1)?;
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            scenes,
        })
    }

    /// In-memory dataset, as if written and reloaded.
    pub fn generate(recipe: &SceneRecipe, seeds: &[u64]) -> Result<Self> {
        let scenes = par::map_slice(Exec::default(), seeds, |&s| generate_scene(recipe, s))
            .into_iter()
            .map(|r| r.map(|(grid, camera)| SceneFile { grid, camera }))
            .collect::<Result<Vec<_>>>()?;
        // file round trip stores f32; match it exactly
        let scenes = scenes
            .into_iter()
            .map(|s| SceneFile::decode(&s.encode()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            dir: PathBuf::new(),
            manifest: Manifest {
                recipe: recipe.clone(),
                seeds: seeds.to_vec(),
                files: (0..seeds.len()).map(scene_file_name).collect(),
            },
            scenes,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_furniture_gives_shell_only() {
        let recipe = SceneRecipe {
            furniture_min: 0,
            furniture_max: 0,
            ..SceneRecipe::toy()
        };
        let (g, _) = generate_scene(&recipe, 3).unwrap();
        let mut present: Vec<u8> = g.labels.iter().copied().filter(|&l| l != EMPTY).collect();
        present.sort_unstable();
        present.dedup();
        assert_eq!(present, vec![FLOOR, CEILING, WALL]);
    }

    #[test]
    fn generation_is_deterministic() {
        let r = SceneRecipe::toy();
        assert_eq!(generate_scene(&r, 42).unwrap(), generate_scene(&r, 42).unwrap());
        assert_ne!(generate_scene(&r, 42).unwrap().0, generate_scene(&r, 43).unwrap().0);
    }

    #[test]
    fn impossible_furniture_errors() {
        let recipe = SceneRecipe {
            furniture_min: 400,
            furniture_max: 400,
            ..SceneRecipe::toy()
        };
        assert!(matches!(generate_scene(&recipe, 0), Err(Error::PlacementExhausted(_))));
    }

    #[test]
    fn recipe_validation() {
        let mut r = SceneRecipe::toy();
        r.n_semantic = 3;
        assert!(r.validate().is_err());
        let mut r = SceneRecipe::toy();
        r.room_xy = [3.0, 6.0];
        assert!(r.validate().is_err());
        assert!(SceneRecipe::paper().validate().is_ok());
    }

    #[test]
    fn flat_wall_depth() {
        // a single wall plane at x = 3.5 m; camera at x = 0.5 m facing +x
        let spec = GridSpec::new([24, 8, 8], 0.25, [0.0; 3]).unwrap();
        let mut g = VoxelGrid::empty(spec);
        for y in 0..8 {
            for z in 0..8 {
                g.set([14, y, z], WALL);
            }
        }
        let k = Intrinsics {
            fx: 16.0,
            fy: 16.0,
            cx: 16.0,
            cy: 16.0,
        };
        let cam = Camera::look_at(k, [0.5, 1.0, 1.0], [5.0, 1.0, 1.0]).unwrap();
        let img = render_depth(&g, &cam, 32, 32);
        assert!((img.at(16, 16) - 3.0).abs() <= 0.25);
        assert!(img.data.iter().all(|&d| d <= spec.diagonal()));
        let empty = render_depth(&VoxelGrid::empty(spec), &cam, 8, 8);
        assert!(empty.data.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn render_strategies_agree() {
        let r = SceneRecipe::toy();
        let (g, cam) = generate_scene(&r, 5).unwrap();
        assert_eq!(
            render_depth_with(Exec::Sequential, &g, &cam, 32, 32),
            render_depth_with(Exec::Parallel, &g, &cam, 32, 32)
        );
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recipe = SceneRecipe::toy();
        let m = write_dataset(dir.path(), &recipe, &[1, 2, 3]).unwrap();
        assert_eq!(m.files.len(), 3);
        let ds = Dataset::load(dir.path()).unwrap();
        let mem = Dataset::generate(&recipe, &[1, 2, 3]).unwrap();
        assert_eq!(ds.scenes, mem.scenes);
        let empty = tempfile::tempdir().unwrap();
        write_dataset(empty.path(), &recipe, &[]).unwrap();
        assert!(Dataset::load(empty.path()).unwrap().is_empty());
    }
}
