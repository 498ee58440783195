//! Pinhole cameras, per-patch depth pooling and back-projection of patch
//! centers into the metric ego frame.
//!
//! Frames: ego is x forward, y left, z up with the origin at the rear-axle
//! center. Camera frames are x right, y down, z forward (optical axis). Every
//! change of frame lives in [`Camera::ego_from_camera`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metric position in the ego frame, meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Coordinate3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Coordinate3D {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Ground-plane point (`z = 0`).
    pub const fn bev(x: f64, y: f64) -> Self {
        Self { x, y, z: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn distance(&self, other: &Coordinate3D) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Rotation (row-major 3×3) followed by translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    };

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Applies the inverse transform (rotation is orthonormal).
    pub fn apply_inverse(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let q = [p[0] - self.translation[0], p[1] - self.translation[1], p[2] - self.translation[2]];
        [
            r[0][0] * q[0] + r[1][0] * q[1] + r[2][0] * q[2],
            r[0][1] * q[0] + r[1][1] * q[1] + r[2][1] * q[2],
            r[0][2] * q[0] + r[1][2] * q[1] + r[2][2] * q[2],
        ]
    }

    /// Rotates a direction (no translation).
    pub fn rotate(&self, d: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2],
            r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2],
            r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Largest deviation of `RᵀR` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub name: String,
    pub intrinsics: Intrinsics,
    pub ego_from_camera: RigidTransform,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Level camera at `position` looking along ego heading `yaw` (radians).
    pub fn level(name: &str, position: [f64; 3], yaw: f64, width: usize, height: usize) -> Self {
        let (s, c) = yaw.sin_cos();
        // Columns are the camera axes (right, down, forward) expressed in ego.
        let right = [s, -c, 0.0];
        let down = [0.0, 0.0, -1.0];
        let forward = [c, s, 0.0];
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        let f = width as f64 / 2.0;
        Self {
            name: name.to_string(),
            intrinsics: Intrinsics { fx: f, fy: f, cx: width as f64 / 2.0, cy: height as f64 / 2.0 },
            ego_from_camera: RigidTransform { rotation, translation: position },
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::Geometry(format!("camera `{}`: focal lengths must be positive", self.name)));
        }
        let err = self.ego_from_camera.orthonormality_error();
        if err > 1e-6 {
            return Err(Error::Geometry(format!("camera `{}`: rotation not orthonormal (error {err:e})", self.name)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Geometry(format!("camera `{}`: empty image", self.name)));
        }
        Ok(())
    }

    /// Ray direction in ego frame through image point `(u, v)` for unit z-depth.
    pub fn ray_ego(&self, u: f64, v: f64) -> [f64; 3] {
        let k = &self.intrinsics;
        self.ego_from_camera.rotate([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        for cam in &cameras {
            cam.validate()?;
        }
        Ok(Self { cameras })
    }

    /// Front and rear level cameras at 1.5 m above the rear axle.
    pub fn front_rear(width: usize, height: usize) -> Self {
        Self {
            cameras: vec![
                Camera::level("front", [0.0, 0.0, 1.5], 0.0, width, height),
                Camera::level("rear", [0.0, 0.0, 1.5], std::f64::consts::PI, width, height),
            ],
        }
    }

    pub fn camera(&self, index: usize) -> Result<&Camera> {
        self.cameras
            .get(index)
            .ok_or_else(|| Error::Geometry(format!("camera index {index} out of {}", self.cameras.len())))
    }
}

/// Metric z-depth per pixel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Geometry(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn constant(width: usize, height: usize, depth: f32) -> Self {
        Self { width, height, values: vec![depth; width * height] }
    }

    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.values[v * self.width + u]
    }
}

/// Square patches tiling an image exactly, enumerated row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch: usize) -> Result<Self> {
        if patch == 0 || width % patch != 0 || height % patch != 0 {
            return Err(Error::Geometry(format!("patch size {patch} does not tile a {width}x{height} image")));
        }
        Ok(Self { patch, rows: height / patch, cols: width / patch })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Geometric center of patch `index`, in pixels.
    pub fn center(&self, index: usize) -> (f64, f64) {
        let (r, c) = (index / self.cols, index % self.cols);
        let half = self.patch as f64 / 2.0;
        ((c * self.patch) as f64 + half, (r * self.patch) as f64 + half)
    }

    fn check(&self, depth: &DepthMap) -> Result<()> {
        if self.cols * self.patch != depth.width || self.rows * self.patch != depth.height {
            return Err(Error::Geometry(format!(
                "grid {}x{} of {}px patches does not tile a {}x{} depth map",
                self.cols, self.rows, self.patch, depth.width, depth.height
            )));
        }
        Ok(())
    }
}

/// Minimum depth inside each patch, row-major over the grid.
pub fn patch_min_depth(depth: &DepthMap, grid: &PatchGrid) -> Result<Vec<f64>> {
    grid.check(depth)?;
    let mut out = vec![f64::INFINITY; grid.len()];
    for v in 0..depth.height {
        let row_base = (v / grid.patch) * grid.cols;
        for u in 0..depth.width {
            let slot = &mut out[row_base + u / grid.patch];
            *slot = slot.min(depth.at(u, v) as f64);
        }
    }
    Ok(out)
}

/// Lifts image point `(u, v)` at z-depth `d` into the ego frame.
pub fn backproject(u: f64, v: f64, d: f64, camera: usize, rig: &CameraRig) -> Result<Coordinate3D> {
    if !(d > 0.0) {
        return Err(Error::Geometry(format!("depth must be positive, got {d}")));
    }
    let cam = rig.camera(camera)?;
    let k = &cam.intrinsics;
    let p = cam.ego_from_camera.apply([(u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d]);
    Ok(Coordinate3D::new(p[0], p[1], p[2]))
}

/// Projects an ego-frame point to `(u, v, z-depth)`; `None` behind the camera.
pub fn project(c: Coordinate3D, camera: usize, rig: &CameraRig) -> Result<Option<(f64, f64, f64)>> {
    let cam = rig.camera(camera)?;
    let p = cam.ego_from_camera.apply_inverse(c.to_array());
    if p[2] <= 0.0 {
        return Ok(None);
    }
    let k = &cam.intrinsics;
    Ok(Some((k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy, p[2])))
}

/// Ego-frame coordinate of every patch: its center lifted at the patch's
/// minimum depth.
pub fn patch_coordinates(depth: &DepthMap, grid: &PatchGrid, camera: usize, rig: &CameraRig) -> Result<Vec<Coordinate3D>> {
    let depths = patch_min_depth(depth, grid)?;
    depths
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let (u, v) = grid.center(i);
            backproject(u, v, d, camera, rig)
        })
        .collect()
}
