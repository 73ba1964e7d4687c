//! Synthetic scenes and RGB-D sequences rendered by the rasterizer itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::math::{Quat, Vec3};
use crate::raster::{render_view, RenderConfig};
use crate::scalar::Real;
use crate::scene::{CameraPose, ColorImage, DepthImage, FrameState, Gaussian3D, Intrinsics, Resolution, Scene};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub count: usize,
    /// Half-width of the axis-aligned box holding the means.
    pub extent: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self { count: 500, extent: 1.0, scale_min: 0.02, scale_max: 0.15 }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quat<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    Quat::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng)).normalized()
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..=hi.ln())).exp()
}

/// Pseudo-random Gaussians inside `[-extent, extent]³`, log-uniform scales and
/// opacities in `[0.3, 0.99]`.
pub fn gen_scene(seed: u64, spec: &SceneSpec) -> Scene<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = Scene::default();
    let e = spec.extent;
    for _ in 0..spec.count {
        let mean = Vec3::new(rng.random_range(-e..=e), rng.random_range(-e..=e), rng.random_range(-e..=e));
        let scale = Vec3::new(
            log_uniform(&mut rng, spec.scale_min, spec.scale_max),
            log_uniform(&mut rng, spec.scale_min, spec.scale_max),
            log_uniform(&mut rng, spec.scale_min, spec.scale_max),
        );
        let q = random_rotation(&mut rng);
        let opacity = rng.random_range(0.3..=0.99);
        let color = Vec3::new(rng.random(), rng.random(), rng.random());
        scene.push(Gaussian3D::new(0, mean, scale, q, opacity, color));
    }
    scene
}

/// Textured floor and back wall with boxes standing on the floor; the scene
/// used by the sequence benchmarks.
pub fn standard_scene(seed: u64) -> Scene<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = Scene::default();
    let flat = |rng: &mut ChaCha8Rng, normal_axis: usize| {
        let mut s = Vec3::new(0.22, 0.22, 0.22);
        s[normal_axis] = 0.015;
        let rv = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        (s * rng.random_range(0.8..1.2), Quat::from_rotation_vector(&rv))
    };
    let patch_color = |rng: &mut ChaCha8Rng, x: f64, z: f64| {
        // low-frequency stripes plus per-splat noise so tracking has gradients everywhere
        let base = Vec3::new(
            0.5 + 0.35 * (2.1 * x).sin(),
            0.5 + 0.35 * (1.7 * z + 0.5).cos(),
            0.5 + 0.3 * (1.3 * (x + z)).sin(),
        );
        base.map(|c: f64| (c + rng.random_range(-0.08..0.08)).clamp(0.02, 0.98))
    };
    // floor at y = 1 (camera "down" is +y)
    let n = 16;
    for i in 0..n {
        for j in 0..n {
            let x = -3.0 + 6.0 * (i as f64 + rng.random_range(0.2..0.8)) / n as f64;
            let z = -3.0 + 6.0 * (j as f64 + rng.random_range(0.2..0.8)) / n as f64;
            let (s, q) = flat(&mut rng, 1);
            // keep the floor out from under the orbit cameras
            if z < 0.0 && x * x + z * z > 2.0 * 2.0 {
                continue;
            }
            let c = patch_color(&mut rng, x, z);
            scene.push(Gaussian3D::new(0, Vec3::new(x, 1.0, z), s, q, 0.95, c));
        }
    }
    // back wall at z = 3
    for i in 0..n {
        for j in 0..9 {
            let x = -3.0 + 6.0 * (i as f64 + rng.random_range(0.2..0.8)) / n as f64;
            let y = 1.0 - 3.0 * (j as f64 + rng.random_range(0.2..0.8)) / 9.0;
            let (s, q) = flat(&mut rng, 2);
            let c = patch_color(&mut rng, y * 1.7, x);
            scene.push(Gaussian3D::new(0, Vec3::new(x, y, 3.0), s, q, 0.95, c));
        }
    }
    // boxes standing on the floor, faces tiled with flat splats
    for _ in 0..7 {
        let half: Vec3<f64> = Vec3::new(rng.random_range(0.15..0.3), rng.random_range(0.2..0.5), rng.random_range(0.15..0.3));
        let center = Vec3::new(rng.random_range(-1.2..1.2), 1.0 - half.y, rng.random_range(-1.2..1.2));
        let tint = Vec3::new(rng.random(), rng.random(), rng.random());
        for axis in 0..3 {
            for side in [-1.0, 1.0] {
                // the bottom face is hidden by the floor
                if axis == 1 && side > 0.0 {
                    continue;
                }
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                let nu = (2.0 * half[u] / 0.12).ceil() as usize;
                let nv = (2.0 * half[v] / 0.12).ceil() as usize;
                for i in 0..nu {
                    for j in 0..nv {
                        let mut p = center;
                        p[axis] += side * half[axis];
                        p[u] += half[u] * (2.0 * (i as f64 + 0.5) / nu as f64 - 1.0);
                        p[v] += half[v] * (2.0 * (j as f64 + 0.5) / nv as f64 - 1.0);
                        let mut sc = Vec3::new(0.09, 0.09, 0.09);
                        sc[axis] = 0.01;
                        let stripe = 0.5 + 0.5 * (7.0 * (p[u] + p[v])).sin();
                        let c = (tint * (0.55 + 0.45 * stripe)).map(|c: f64| (c + rng.random_range(-0.05..0.05)).clamp(0.02, 0.98));
                        scene.push(Gaussian3D::new(0, p, sc, Quat::identity(), 0.97, c));
                    }
                }
            }
        }
    }
    scene
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    /// Circle of `radius` at height `height` around the origin, spanning `arc` radians.
    Orbit { radius: f64, height: f64, arc: f64 },
    /// Straight segment from `from` to `to`, looking along +z.
    Line { from: [f64; 3], to: [f64; 3] },
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory::Orbit { radius: 3.0, height: -0.4, arc: std::f64::consts::FRAC_PI_2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TrajectoryError {
    #[error("trajectory has zero baseline")]
    ZeroBaseline,
    #[error("trajectory needs at least one frame")]
    NoFrames,
}

/// Ground-truth camera poses along the trajectory. Orbit cameras look at the
/// origin; the first pose of an orbit sits at angle 0 (on the −z side).
pub fn trajectory_poses(
    traj: &Trajectory,
    frames: usize,
    k: Intrinsics<f64>,
) -> Result<Vec<CameraPose<f64>>, TrajectoryError> {
    if frames == 0 {
        return Err(TrajectoryError::NoFrames);
    }
    let down = Vec3::new(0.0, 1.0, 0.0);
    let steps = (frames.max(2) - 1) as f64;
    match *traj {
        Trajectory::Orbit { radius, height, arc } => {
            if !(radius > 0.0) || (frames > 1 && arc == 0.0) {
                return Err(TrajectoryError::ZeroBaseline);
            }
            Ok((0..frames)
                .map(|i| {
                    let a = -0.5 * arc + arc * i as f64 / steps;
                    let eye = Vec3::new(radius * a.sin(), height, -radius * a.cos());
                    CameraPose::look_at(eye, Vec3::zeros(), down, k)
                })
                .collect())
        }
        Trajectory::Line { from, to } => {
            let a = Vec3::from(from);
            let b = Vec3::from(to);
            if frames > 1 && (b - a).norm() == 0.0 {
                return Err(TrajectoryError::ZeroBaseline);
            }
            Ok((0..frames)
                .map(|i| {
                    let eye = a + (b - a) * (i as f64 / steps);
                    CameraPose::look_at(eye, eye + Vec3::new(0.0, 0.0, 1.0), down, k)
                })
                .collect())
        }
    }
}

/// A rendered RGB-D sequence with ground-truth poses.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub native: Resolution,
    pub intrinsics: Intrinsics<f64>,
    pub frames: Vec<FrameState<f64>>,
    pub ground_truth: Vec<CameraPose<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceSpec {
    pub frames: usize,
    pub resolution: Resolution,
    pub intrinsics: Intrinsics<f64>,
    pub trajectory: Trajectory,
    /// Standard deviation of additive Gaussian noise on color and depth.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self {
            frames: 60,
            resolution: Resolution::new(64, 48),
            intrinsics: Intrinsics { fx: 55.0, fy: 55.0, cx: 32.0, cy: 24.0 },
            trajectory: Trajectory::default(),
            noise: 0.0,
            seed: 7,
        }
    }
}

/// Renders ground-truth color and depth at every trajectory pose. The stored
/// frame poses are the ground truth; trackers overwrite them with estimates.
pub fn gen_sequence(scene: &Scene<f64>, spec: &SequenceSpec) -> Result<Sequence, TrajectoryError> {
    let poses = trajectory_poses(&spec.trajectory, spec.frames, spec.intrinsics)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).unwrap();
    let cfg = RenderConfig::default();
    let mut frames = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let rec = render_view(&scene.gaussians, pose, spec.intrinsics, spec.resolution, &cfg)
            .expect("synthetic scene projects");
        let mut color = rec.color;
        let mut depth = rec.depth;
        if spec.noise > 0.0 {
            for p in color.data.iter_mut() {
                for c in p.iter_mut() {
                    *c = (*c + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            for d in depth.data.iter_mut() {
                if *d > 0.0 {
                    *d = (*d + noise.sample(&mut rng)).max(1e-3);
                }
            }
        }
        frames.push(FrameState::new(i, i == 0, color, depth, *pose));
    }
    Ok(Sequence { native: spec.resolution, intrinsics: spec.intrinsics, frames, ground_truth: poses })
}

/// Seeds isotropic Gaussians from observed depth on a `stride` pixel lattice.
/// Each seed sits on the back-projected pixel center with the observed color and
/// a footprint of `footprint` lattice cells. `keep` filters candidate pixels.
pub fn back_project<T: Real>(
    frame: &FrameState<T>,
    stride: usize,
    footprint: T,
    opacity: T,
    keep: impl Fn(usize, usize) -> bool,
) -> Vec<Gaussian3D<T>> {
    let k = frame.intrinsics();
    let w_inv = frame.pose.rotation.conj().to_matrix();
    let res = frame.resolution;
    let mut out = Vec::new();
    let half = stride / 2;
    for y in (half..res.height).step_by(stride.max(1)) {
        for x in (half..res.width).step_by(stride.max(1)) {
            let z = frame.observed_depth.get(x, y);
            if !(z > T::zero()) || !keep(x, y) {
                continue;
            }
            let u = T::lit(x as f64 + 0.5);
            let v = T::lit(y as f64 + 0.5);
            let cam = Vec3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
            let mean = w_inv * (cam - frame.pose.translation);
            let sigma = footprint * T::lit(stride as f64) * z / k.fx;
            let c = frame.observed_color.get(x, y);
            let color = Vec3::new(c[0], c[1], c[2]).map(|v| v.max(T::zero()).min(T::one()));
            out.push(Gaussian3D::isotropic(0, mean, sigma, opacity, color));
        }
    }
    out
}

/// Initial map from the first frame's depth.
pub fn bootstrap_scene<T: Real>(frame: &FrameState<T>, stride: usize) -> Scene<T> {
    let mut scene = Scene::default();
    for g in back_project(frame, stride, T::lit(0.6), T::lit(0.9), |_, _| true) {
        scene.push(g);
    }
    scene
}

/// Adds Gaussian noise to an image pair with a dedicated stream.
pub fn add_noise(color: &mut ColorImage<f64>, depth: &mut DepthImage<f64>, sigma: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    for p in color.data.iter_mut() {
        for c in p.iter_mut() {
            *c = (*c + n.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    for d in depth.data.iter_mut() {
        if *d > 0.0 {
            *d = (*d + n.sample(&mut rng)).max(1e-3);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_inside_box_and_valid() {
        let s = gen_scene(3, &SceneSpec { count: 200, extent: 0.5, ..Default::default() });
        assert_eq!(s.len(), 200);
        for g in &s.gaussians {
            assert!(g.mean.iter().all(|v| v.abs() <= 0.5));
            g.validate().unwrap();
        }
    }

    #[test]
    fn orbit_radius_constant() {
        let k = Intrinsics { fx: 100.0, fy: 100.0, cx: 32.0, cy: 32.0 };
        let poses = trajectory_poses(&Trajectory::Orbit { radius: 2.5, height: 0.0, arc: 1.0 }, 60, k).unwrap();
        for p in &poses {
            assert!((p.center().norm() - 2.5).abs() < 1e-9);
        }
        assert_eq!(
            trajectory_poses(&Trajectory::Line { from: [0.0; 3], to: [0.0; 3] }, 5, k),
            Err(TrajectoryError::ZeroBaseline)
        );
    }

    #[test]
    fn back_projection_lands_on_seed_pixels() {
        let scene = standard_scene(1);
        let spec = SequenceSpec { frames: 1, ..Default::default() };
        let seq = gen_sequence(&scene, &spec).unwrap();
        let f = &seq.frames[0];
        let seeds = back_project(f, 8, 0.6, 0.9, |_, _| true);
        assert!(!seeds.is_empty());
        let k = f.intrinsics();
        for g in &seeds {
            let t = f.pose.to_camera(&g.mean);
            let u = k.fx * t.x / t.z + k.cx - 0.5;
            let v = k.fy * t.y / t.z + k.cy - 0.5;
            assert!((u - u.round()).abs() < 1e-6 && (v - v.round()).abs() < 1e-6);
        }
    }
}
