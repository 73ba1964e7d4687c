//! Scene primitives, cameras, frames and the tile/subtile pixel partition.

use serde::{Deserialize, Serialize};

use crate::math::{cross, Mat3, Quat, Vec3};
use crate::scalar::Real;

/// Trainable anisotropic Gaussian. Covariance is stored factored as scale + rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D<T> {
    pub id: u32,
    pub mean: Vec3<T>,
    /// Per-axis standard deviations, strictly positive.
    pub scale: Vec3<T>,
    pub rotation: Quat<T>,
    pub opacity: T,
    pub color: Vec3<T>,
    pub masked: bool,
    pub mask_age: u32,
}

impl<T: Real> Gaussian3D<T> {
    pub fn new(id: u32, mean: Vec3<T>, scale: Vec3<T>, rotation: Quat<T>, opacity: T, color: Vec3<T>) -> Self {
        Self {
            id,
            mean,
            scale,
            rotation,
            opacity,
            color,
            masked: false,
            mask_age: 0,
        }
    }

    pub fn isotropic(id: u32, mean: Vec3<T>, sigma: T, opacity: T, color: Vec3<T>) -> Self {
        Self::new(id, mean, Vec3::new(sigma, sigma, sigma), Quat::identity(), opacity, color)
    }

    /// Checks the documented invariants; `Err` carries the first violated one.
    pub fn validate(&self) -> Result<(), String> {
        let all_finite = self.mean.iter().chain(self.scale.iter()).chain(self.color.iter()).all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.rotation.norm().is_finite();
        if !all_finite {
            return Err(format!("gaussian {}: non-finite parameter", self.id));
        }
        if self.scale.iter().any(|s| *s <= T::zero()) {
            return Err(format!("gaussian {}: non-positive scale", self.id));
        }
        if (self.rotation.norm() - T::one()).abs() > T::lit(1e-6) {
            return Err(format!("gaussian {}: rotation not unit", self.id));
        }
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if !unit(self.opacity) || !self.color.iter().all(|c| unit(*c)) {
            return Err(format!("gaussian {}: opacity/color outside [0,1]", self.id));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Mat3<T> {
        reconstruct_covariance(self)
    }
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn reconstruct_covariance<T: Real>(g: &Gaussian3D<T>) -> Mat3<T> {
    let r = g.rotation.to_matrix();
    let s2 = Vec3::new(g.scale.x * g.scale.x, g.scale.y * g.scale.y, g.scale.z * g.scale.z);
    let m = r * Mat3::from_diagonal(&s2) * r.transpose();
    // exact symmetry regardless of rounding in the triple product
    (m + m.transpose()) * T::lit(0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Real> Intrinsics<T> {
    /// Intrinsics for a frame rendered at `target` when these describe `native`.
    pub fn scaled_to(&self, native: Resolution, target: Resolution) -> Self {
        let sx = T::lit(target.width as f64 / native.width as f64);
        let sy = T::lit(target.height as f64 / native.height as f64);
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
        }
    }
}

/// World→camera rigid transform plus pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose<T> {
    pub rotation: Quat<T>,
    pub translation: Vec3<T>,
    pub intrinsics: Intrinsics<T>,
}

impl<T: Real> CameraPose<T> {
    pub fn new(rotation: Quat<T>, translation: Vec3<T>, intrinsics: Intrinsics<T>) -> Self {
        Self {
            rotation,
            translation,
            intrinsics,
        }
    }

    pub fn to_camera(&self, p: &Vec3<T>) -> Vec3<T> {
        self.rotation.rotate(p) + self.translation
    }

    /// Camera center in world coordinates, `-Wᵀ τ`.
    pub fn center(&self) -> Vec3<T> {
        -(self.rotation.to_matrix().transpose() * self.translation)
    }

    /// Pose looking from `eye` toward `target` with the camera y axis roughly along `down`.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, down: Vec3<T>, intrinsics: Intrinsics<T>) -> Self {
        let z = (target - eye).normalize_generic();
        let x = cross(&down, &z).normalize_generic();
        let y = cross(&z, &x);
        // rows are camera axes expressed in world coordinates
        let r = Mat3::new(x.x, x.y, x.z, y.x, y.y, y.z, z.x, z.y, z.z);
        let rotation = Quat::from_matrix(&r);
        let translation = -(rotation.to_matrix() * eye);
        Self::new(rotation, translation, intrinsics)
    }

    /// Left retraction on the 6-vector `[φ, ρ]`: `W' = Exp(φ) W`, `τ' = Exp(φ) τ + ρ`,
    /// so camera-space points move as `t' = Exp(φ) t + ρ`.
    pub fn retract(&self, delta: &[T; 6]) -> Self {
        let phi = Vec3::new(delta[0], delta[1], delta[2]);
        let rho = Vec3::new(delta[3], delta[4], delta[5]);
        let dq = Quat::from_rotation_vector(&phi);
        Self {
            rotation: dq.mul(&self.rotation).normalized(),
            translation: dq.rotate(&self.translation) + rho,
            intrinsics: self.intrinsics,
        }
    }
}

trait NormalizeGeneric<T> {
    fn normalize_generic(&self) -> Self;
}

impl<T: Real> NormalizeGeneric<T> for Vec3<T> {
    fn normalize_generic(&self) -> Self {
        self / crate::math::norm3(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl Resolution {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Integer per-axis divisors, `None` unless both axes divide exactly.
    pub fn divide(&self, div_x: usize, div_y: usize) -> Option<Self> {
        (div_x > 0 && div_y > 0 && self.width % div_x == 0 && self.height % div_y == 0)
            .then(|| Self::new(self.width / div_x, self.height / div_y))
    }
}

/// Interleaved RGB buffer, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[T; 3]>,
}

impl<T: Real> ColorImage<T> {
    pub fn filled(width: usize, height: usize, value: [T; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [T; 3] {
        self.data[y * self.width + x]
    }

    /// Box-filter by integer factors; pixel centers stay aligned with scaled intrinsics.
    pub fn box_downsample(&self, fx: usize, fy: usize) -> Self {
        let (w, h) = (self.width / fx, self.height / fy);
        let norm = T::lit(1.0 / (fx * fy) as f64);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [T::zero(); 3];
                for dy in 0..fy {
                    for dx in 0..fx {
                        let p = self.get(x * fx + dx, y * fy + dy);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                data.push([acc[0] * norm, acc[1] * norm, acc[2] * norm]);
            }
        }
        Self { width: w, height: h, data }
    }
}

/// Depth buffer; 0 marks an invalid sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Real> DepthImage<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    /// Averages the valid samples of each block; blocks without any stay invalid.
    pub fn box_downsample(&self, fx: usize, fy: usize) -> Self {
        let (w, h) = (self.width / fx, self.height / fy);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                let mut n = 0usize;
                for dy in 0..fy {
                    for dx in 0..fx {
                        let d = self.get(x * fx + dx, y * fy + dy);
                        if d > T::zero() {
                            acc += d;
                            n += 1;
                        }
                    }
                }
                data.push(if n > 0 { acc / T::lit(n as f64) } else { T::zero() });
            }
        }
        Self { width: w, height: h, data }
    }
}

/// One input frame at the resolution it will be processed at.
#[derive(Debug, Clone)]
pub struct FrameState<T> {
    pub frame_index: usize,
    pub is_keyframe: bool,
    /// Native resolution the intrinsics in `pose` refer to.
    pub native: Resolution,
    pub resolution: Resolution,
    pub observed_color: ColorImage<T>,
    pub observed_depth: DepthImage<T>,
    pub pose: CameraPose<T>,
    pub last_keyframe_index: usize,
}

impl<T: Real> FrameState<T> {
    pub fn new(
        frame_index: usize,
        is_keyframe: bool,
        color: ColorImage<T>,
        depth: DepthImage<T>,
        pose: CameraPose<T>,
    ) -> Self {
        let res = Resolution::new(color.width, color.height);
        Self {
            frame_index,
            is_keyframe,
            native: res,
            resolution: res,
            observed_color: color,
            observed_depth: depth,
            pose,
            last_keyframe_index: frame_index,
        }
    }

    /// Copy processed at `target`, which must divide the native resolution exactly.
    pub fn at_resolution(&self, target: Resolution) -> Option<Self> {
        if target == self.resolution {
            return Some(self.clone());
        }
        if self.resolution != self.native
            || target.width == 0
            || target.height == 0
            || self.native.width % target.width != 0
            || self.native.height % target.height != 0
        {
            return None;
        }
        let (fx, fy) = (self.native.width / target.width, self.native.height / target.height);
        Some(Self {
            resolution: target,
            observed_color: self.observed_color.box_downsample(fx, fy),
            observed_depth: self.observed_depth.box_downsample(fx, fy),
            ..self.clone()
        })
    }

    pub fn intrinsics(&self) -> Intrinsics<T> {
        self.pose.intrinsics.scaled_to(self.native, self.resolution)
    }
}

/// Ordered Gaussian collection with a monotone id allocator.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T> {
    pub gaussians: Vec<Gaussian3D<T>>,
    pub next_id: u32,
}

impl<T: Real> Default for Scene<T> {
    fn default() -> Self {
        Self {
            gaussians: Vec::new(),
            next_id: 0,
        }
    }
}

impl<T: Real> Scene<T> {
    pub fn new(gaussians: Vec<Gaussian3D<T>>) -> Self {
        let next_id = gaussians.iter().map(|g| g.id + 1).max().unwrap_or(0);
        Self { gaussians, next_id }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, mut g: Gaussian3D<T>) -> u32 {
        g.id = self.next_id;
        self.next_id += 1;
        let id = g.id;
        self.gaussians.push(g);
        id
    }

    pub fn active_count(&self) -> usize {
        self.gaussians.iter().filter(|g| !g.masked).count()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.gaussians.iter().position(|g| g.id == id)
    }
}

pub const TILE_SIZE: usize = 16;
pub const SUBTILE_SIZE: usize = 4;
pub const SUBTILES_PER_TILE_SIDE: usize = TILE_SIZE / SUBTILE_SIZE;

/// 16×16 tiles split into 4×4 subtiles, covering a frame (edge tiles may be partial).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub subtile_size: usize,
}

impl TileLayout {
    pub fn new(res: Resolution) -> Self {
        Self {
            width: res.width,
            height: res.height,
            tile_size: TILE_SIZE,
            subtile_size: SUBTILE_SIZE,
        }
    }

    pub fn tiles_x(&self) -> usize {
        self.width.div_ceil(self.tile_size)
    }

    pub fn tiles_y(&self) -> usize {
        self.height.div_ceil(self.tile_size)
    }

    pub fn num_tiles(&self) -> usize {
        self.tiles_x() * self.tiles_y()
    }

    pub fn subtiles_x(&self) -> usize {
        self.tiles_x() * SUBTILES_PER_TILE_SIDE
    }

    pub fn subtiles_y(&self) -> usize {
        self.tiles_y() * SUBTILES_PER_TILE_SIDE
    }

    pub fn num_subtiles(&self) -> usize {
        self.subtiles_x() * self.subtiles_y()
    }

    #[inline]
    pub fn tile_of(&self, x: usize, y: usize) -> usize {
        (y / self.tile_size) * self.tiles_x() + x / self.tile_size
    }

    #[inline]
    pub fn subtile_of(&self, x: usize, y: usize) -> usize {
        (y / self.subtile_size) * self.subtiles_x() + x / self.subtile_size
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)` of a tile, clipped to the frame.
    pub fn tile_rect(&self, tile: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x();
        let ty = tile / self.tiles_x();
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, y0, (x0 + self.tile_size).min(self.width), (y0 + self.tile_size).min(self.height))
    }

    /// Origin of a subtile and the 16 pixel coordinates in row-major local order;
    /// pixels past the frame edge are `None`.
    pub fn subtile_pixels(&self, subtile: usize) -> [Option<(usize, usize)>; 16] {
        let sx = subtile % self.subtiles_x();
        let sy = subtile / self.subtiles_x();
        let mut out = [None; 16];
        for (i, slot) in out.iter_mut().enumerate() {
            let x = sx * self.subtile_size + i % self.subtile_size;
            let y = sy * self.subtile_size + i / self.subtile_size;
            if x < self.width && y < self.height {
                *slot = Some((x, y));
            }
        }
        out
    }
}
