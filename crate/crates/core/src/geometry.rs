//! Points and the pinhole camera shared by rendering and the query decoder.
//!
//! Camera frame convention: `x` right, `y` down, `z` forward. Pixel `(u, v)`
//! covers `[u, u+1) x [v, v+1)`; the principal point is in pixel units.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

/// Squared Euclidean distance, always evaluated in the same order so that
/// brute-force and accelerated searches agree bit for bit.
#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    scale(a, 1.0 / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// Camera-to-world rotation, row-major; columns are the camera axes
    /// expressed in world coordinates.
    pub rotation: [[f64; 3]; 3],
    /// Camera centre in world coordinates.
    pub position: Vec3,
}

/// A world point expressed in camera coordinates and on the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub cam: Vec3,
    /// Present when `cam.z` is strictly positive.
    pub pixel: Option<(f64, f64)>,
}

pub const MIN_DEPTH: f64 = 1e-3;

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: [[f64; 3]; 3], position: Vec3) -> Result<Self> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        Ok(Camera {
            intrinsics,
            rotation,
            position,
        })
    }

    /// Camera at `eye` looking at `target` with world `+z` up.
    pub fn look_at(intrinsics: Intrinsics, eye: Vec3, target: Vec3) -> Result<Self> {
        let forward = normalize(sub(target, eye));
        let side = cross(forward, [0.0, 0.0, 1.0]);
        if norm(side) < 1e-9 {
            return Err(Error::InvalidArgument("viewing direction is vertical".into()));
        }
        let right = normalize(side);
        let down = cross(forward, right);
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Camera::new(intrinsics, rotation, eye)
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.position);
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Rotates a camera-frame vector into the world frame.
    pub fn rotate_to_world(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn project(&self, p: Vec3) -> Projection {
        let cam = self.world_to_camera(p);
        let pixel = (cam[2] > MIN_DEPTH).then(|| {
            let k = &self.intrinsics;
            (k.fx * cam[0] / cam[2] + k.cx, k.fy * cam[1] / cam[2] + k.cy)
        });
        Projection { cam, pixel }
    }

    /// Row-major 3x4 camera-to-world pose `[R | t]`.
    pub fn pose_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = self.position;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2], t[2],
        ]
    }

    pub fn from_pose_3x4(intrinsics: Intrinsics, m: &[f64; 12]) -> Result<Self> {
        Camera::new(
            intrinsics,
            [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            [m[3], m[7], m[11]],
        )
    }
}

/// Single-channel depth image in metres, row-major `H x W`; 0 means no hit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        DepthImage {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Bilinear weights over a `w x h` lattice at continuous lattice
/// coordinates, clamped to the lattice, with their derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bilinear {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub d_dx: [f64; 4],
    pub d_dy: [f64; 4],
    /// Top-left cell, for branch fingerprints.
    pub cell: (usize, usize),
}

fn bilinear_axis(g: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, true);
    }
    let hi = (n - 1) as f64;
    let clamped = !(0.0..=hi).contains(&g);
    let c = g.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64, clamped)
}

impl Bilinear {
    pub fn new(gx: f64, gy: f64, w: usize, h: usize) -> Self {
        let (x0, x1, tx, cx) = bilinear_axis(gx, w);
        let (y0, y1, ty, cy) = bilinear_axis(gy, h);
        let kx = if cx { 0.0 } else { 1.0 };
        let ky = if cy { 0.0 } else { 1.0 };
        Bilinear {
            index: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            weight: [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty],
            d_dx: [-(1.0 - ty) * kx, (1.0 - ty) * kx, -ty * kx, ty * kx],
            d_dy: [-(1.0 - tx) * ky, -tx * ky, (1.0 - tx) * ky, tx * ky],
            cell: (x0 + usize::from(cx) * 1000, y0 + usize::from(cy) * 1000),
        }
    }

    pub fn sample(&self, values: &[f64]) -> f64 {
        (0..4).map(|k| self.weight[k] * values[self.index[k]]).sum()
    }

    /// Derivatives of [`Bilinear::sample`] w.r.t. the lattice coordinates.
    pub fn gradient(&self, values: &[f64]) -> (f64, f64) {
        let mut gx = 0.0;
        let mut gy = 0.0;
        for k in 0..4 {
            gx += self.d_dx[k] * values[self.index[k]];
            gy += self.d_dy[k] * values[self.index[k]];
        }
        (gx, gy)
    }
}
