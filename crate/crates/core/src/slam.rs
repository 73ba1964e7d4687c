//! Tracking and mapping loop with adaptive Gaussian pruning and dynamic
//! downsampling of non-keyframes.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backprop::{full_backward, full_backward_masked, BackpropError, Grad3D, GradientSet, Mode};
use crate::math::{Quat, Vec3};
use crate::projection::{intersection_change_ratio, project_scene, ProjectionError, TileBinning};
use crate::raster::{render_frame, render_view, RenderConfig, RenderRecord};
use crate::scalar::Real;
use crate::scene::{CameraPose, FrameState, Resolution, Scene, TileLayout};
use crate::synth::{back_project, bootstrap_scene, Sequence};

#[derive(Debug, Error)]
pub enum SlamError {
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Backprop(#[from] BackpropError),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("scene is empty")]
    EmptyScene,
    #[error("resolution {0:?} does not divide the native resolution")]
    Resolution(Resolution),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub tracking_iterations: usize,
    pub mapping_iterations: usize,
    pub lr_pose_rot: f64,
    pub lr_pose_trans: f64,
    pub lr_mean: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    /// Per-iteration multiplicative decay of all step sizes within a frame.
    pub lr_decay: f64,
    pub lambda_pho: f64,
    pub keyframe_interval: usize,
    pub native: Resolution,
    /// Downsampling growth factor `m`.
    pub m: f64,
    pub k0: usize,
    /// Covariance weight `λ` of the importance score.
    pub lambda: f64,
    pub prune_fraction_cap: f64,
    pub prune_floor: usize,
    pub pruning: bool,
    pub downsampling: bool,
    pub insertion: bool,
    /// Lattice stride, in native pixels, for bootstrap and insertion seeds.
    pub seed_stride: usize,
    pub insertion_coverage: f64,
    /// Keyframes, the current one included, that each mapping call cycles over.
    pub mapping_window: usize,
    /// Tracking ignores pixels whose rendered coverage is below this; 0 keeps all.
    pub tracking_coverage: f64,
    pub render: RenderConfig,
    pub tracking_lost_factor: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            tracking_iterations: 50,
            mapping_iterations: 50,
            lr_pose_rot: 0.005,
            lr_pose_trans: 0.02,
            lr_mean: 2.0,
            lr_scale: 20.0,
            lr_rotation: 20.0,
            lr_opacity: 40.0,
            lr_color: 40.0,
            lr_decay: 0.95,
            lambda_pho: 0.9,
            keyframe_interval: 8,
            native: Resolution::new(64, 48),
            m: 2.0,
            k0: 5,
            lambda: 0.8,
            prune_fraction_cap: 0.5,
            prune_floor: 64,
            pruning: true,
            downsampling: true,
            insertion: true,
            seed_stride: 2,
            insertion_coverage: 0.1,
            mapping_window: 3,
            tracking_coverage: 0.9,
            render: RenderConfig::default(),
            tracking_lost_factor: 10.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), SlamError> {
        let bad = |m: &str| Err(SlamError::Config(m.to_string()));
        if !(self.m > 1.0) {
            return bad("m must exceed 1");
        }
        if !(0.0..=1.0).contains(&self.prune_fraction_cap) {
            return bad("prune_fraction_cap must lie in [0, 1]");
        }
        if self.k0 == 0 || self.keyframe_interval == 0 || self.seed_stride == 0 {
            return bad("k0, keyframe_interval and seed_stride must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda_pho) {
            return bad("lambda_pho must lie in [0, 1]");
        }
        Ok(())
    }
}

/// `‖dL/dμ‖ + λ‖[dL/dscale, dL/drotation]‖`.
pub fn importance_score<T: Real>(g: &Grad3D<T>, lambda: f64) -> f64 {
    let mean = g.mean.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    mean + lambda * g.covariance_block_norm().to_f64_lossy()
}

pub const MAX_PRUNE_INTERVAL: usize = 64;

/// Next window length after observing `ratio`.
pub fn next_interval(k: usize, ratio: f64) -> usize {
    if ratio > 0.05 {
        (k / 2).max(1)
    } else {
        (k * 2).min(MAX_PRUNE_INTERVAL)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneState {
    pub k: usize,
    pub k0: usize,
    pub iter_in_window: usize,
    pub lambda: f64,
    pub prune_fraction_cap: f64,
    pub floor: usize,
    pub scores: BTreeMap<u32, f64>,
    /// Gaussians permanently removed so far.
    pub removed_total: usize,
    #[serde(skip)]
    window_start: Option<BTreeSet<(u32, usize)>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub masked: Vec<u32>,
    pub removed: Vec<u32>,
    pub change_ratio: Option<f64>,
    pub next_k: Option<usize>,
    /// The floor count stopped a mask or a removal.
    pub floor_hit: bool,
}

impl PruneState {
    pub fn new(k0: usize, lambda: f64, cap: f64, floor: usize) -> Self {
        Self {
            k: k0.max(1),
            k0: k0.max(1),
            iter_in_window: 0,
            lambda,
            prune_fraction_cap: cap,
            floor,
            scores: BTreeMap::new(),
            removed_total: 0,
            window_start: None,
        }
    }

    pub fn from_config(cfg: &TrackerConfig) -> Self {
        Self::new(cfg.k0, cfg.lambda, cfg.prune_fraction_cap, cfg.prune_floor)
    }

    /// One tracking iteration of mask-prune bookkeeping.
    ///
    /// Scores accumulate over a window of `k` iterations. At the window's end the
    /// lowest-scoring unmasked Gaussians are masked (ties to the smaller id), at
    /// most `cap` of the unmasked population and never pushing the cumulative
    /// pruned share of all Gaussians ever created past `cap`. Masked Gaussians are
    /// deleted once they have been masked for `k` iterations. `pairs` yields the
    /// (gaussian, tile) intersections of the whole scene, masked included, on a
    /// fixed layout.
    pub fn step<T: Real>(
        &mut self,
        scene: &mut Scene<T>,
        grads: &GradientSet<T>,
        pairs: impl Fn(&Scene<T>) -> BTreeSet<(u32, usize)>,
    ) -> PruneEvent {
        let mut ev = PruneEvent::default();
        if self.window_start.is_none() {
            self.window_start = Some(pairs(scene));
        }
        for (id, g) in &grads.gaussian3d_level {
            *self.scores.entry(*id).or_insert(0.0) += importance_score(g, self.lambda);
        }

        for g in scene.gaussians.iter_mut().filter(|g| g.masked) {
            g.mask_age += 1;
        }
        let mut expired: Vec<u32> = scene
            .gaussians
            .iter()
            .filter(|g| g.masked && g.mask_age as usize >= self.k)
            .map(|g| g.id)
            .collect();
        let removable = scene.len().saturating_sub(self.floor);
        if expired.len() > removable {
            expired.truncate(removable);
            ev.floor_hit = true;
        }
        if !expired.is_empty() {
            let gone: BTreeSet<u32> = expired.iter().copied().collect();
            scene.gaussians.retain(|g| !gone.contains(&g.id));
            self.removed_total += gone.len();
            ev.removed = expired;
        }

        self.iter_in_window += 1;
        if self.iter_in_window >= self.k {
            let end = pairs(scene);
            let start = self.window_start.take().unwrap_or_default();
            let ratio = intersection_change_ratio_sets(&start, &end);

            let mut unmasked: Vec<(f64, u32, usize)> = scene
                .gaussians
                .iter()
                .enumerate()
                .filter(|(_, g)| !g.masked)
                .map(|(i, g)| (self.scores.get(&g.id).copied().unwrap_or(0.0), g.id, i))
                .collect();
            unmasked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let masked_now = scene.gaussians.iter().filter(|g| g.masked).count();
            let per_window = (self.prune_fraction_cap * unmasked.len() as f64).floor() as usize;
            let global = ((self.prune_fraction_cap * scene.next_id as f64).floor() as usize)
                .saturating_sub(self.removed_total + masked_now);
            let wanted = per_window.min(global);
            let allowed = unmasked.len().saturating_sub(self.floor);
            if wanted > allowed {
                ev.floor_hit = true;
            }
            for &(_, id, i) in unmasked.iter().take(wanted.min(allowed)) {
                scene.gaussians[i].masked = true;
                scene.gaussians[i].mask_age = 0;
                ev.masked.push(id);
            }

            self.k = next_interval(self.k, ratio);
            ev.change_ratio = Some(ratio);
            ev.next_k = Some(self.k);
            self.scores.clear();
            self.iter_in_window = 0;
            self.window_start = Some(end);
        }
        ev
    }
}

fn intersection_change_ratio_sets(prev: &BTreeSet<(u32, usize)>, curr: &BTreeSet<(u32, usize)>) -> f64 {
    let diff = prev.symmetric_difference(curr).count();
    diff as f64 / prev.len().max(1) as f64
}

/// Change ratio between two binnings of the same layout.
pub fn binning_change_ratio(prev: &TileBinning, curr: &TileBinning) -> f64 {
    intersection_change_ratio(prev, curr)
}

/// Processing resolution of frame `n`. Keyframes run at `r0`; other frames at
/// area `min(m^(n-k-1)/16, 1/4)` of `r0`, rounded to a power-of-two area and
/// split into power-of-two per-axis divisors (the x axis takes the larger one).
pub fn select_resolution(n: usize, k_last: usize, is_keyframe: bool, r0: Resolution, m: f64) -> Resolution {
    if is_keyframe {
        return r0;
    }
    let steps = n.saturating_sub(k_last).saturating_sub(1) as f64;
    let area = (m.powf(steps) / 16.0).min(0.25);
    let exp = (1.0 / area).log2().round().clamp(2.0, 4.0) as u32;
    let (ex, ey) = (exp.div_ceil(2), exp / 2);
    let (dx, dy) = (1usize << ex, 1usize << ey);
    if r0.width % dx == 0 && r0.height % dy == 0 {
        Resolution::new(r0.width / dx, r0.height / dy)
    } else {
        r0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Tracking,
    Mapping,
}

/// Emitted after every render + backward iteration.
pub struct IterationEvent<'a, T: Real> {
    /// Frame being tracked or mapped.
    pub frame_index: usize,
    pub is_keyframe: bool,
    /// Frame whose view was rendered; differs from `frame_index` for window keyframes during mapping.
    pub view_index: usize,
    /// Gaussians taking part in rendering.
    pub gaussians: usize,
    pub stage: Stage,
    pub iteration: usize,
    pub loss: T,
    pub record: &'a RenderRecord<T>,
    pub grads: &'a GradientSet<T>,
}

pub type Observer<'o, T> = dyn FnMut(&IterationEvent<'_, T>) + 'o;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackStats {
    pub losses: Vec<f64>,
    pub prune_events: Vec<PruneEvent>,
    /// Iterations at which the step size was halved.
    pub step_halvings: Vec<usize>,
    pub rendered_pixels: usize,
    pub fragments: usize,
}

fn pair_set<T: Real>(scene: &Scene<T>, pose: &CameraPose<T>, native: Resolution, cfg: &RenderConfig) -> BTreeSet<(u32, usize)> {
    let layout = TileLayout::new(native);
    match project_scene(&scene.gaussians, pose, &pose.intrinsics, &cfg.projection, true) {
        Ok((_, splats)) => TileBinning::build(&splats, &layout).pairs(),
        Err(_) => BTreeSet::new(),
    }
}

/// Optimizes `frame.pose` against the frozen map. `prune` runs the mask-prune
/// schedule each iteration when given.
pub fn track_frame<T: Real>(
    frame: &mut FrameState<T>,
    scene: &mut Scene<T>,
    cfg: &TrackerConfig,
    mut prune: Option<&mut PruneState>,
    observer: &mut Observer<'_, T>,
) -> Result<TrackStats, SlamError> {
    if scene.active_count() == 0 {
        return Err(SlamError::EmptyScene);
    }
    let mut stats = TrackStats {
        losses: Vec::with_capacity(cfg.tracking_iterations),
        prune_events: Vec::new(),
        step_halvings: Vec::new(),
        rendered_pixels: 0,
        fragments: 0,
    };
    let mut step = 1.0;
    let mut rises = 0;
    let mut best: Option<(f64, CameraPose<T>)> = None;
    let pivot = pivot_depth(&frame.observed_depth.data);
    for it in 0..cfg.tracking_iterations {
        let rec = render_frame(&scene.gaussians, frame, &cfg.render)?;
        let mask: Option<Vec<bool>> = (cfg.tracking_coverage > 0.0).then(|| {
            let th = T::lit(cfg.tracking_coverage);
            rec.logs.iter().map(|l| l.coverage >= th).collect()
        });
        let (loss, gs) = full_backward_masked(
            &rec,
            frame,
            &scene.gaussians,
            T::lit(cfg.lambda_pho),
            Mode::Tracking,
            mask.as_deref(),
        )?;
        observer(&IterationEvent {
            frame_index: frame.frame_index,
            is_keyframe: frame.is_keyframe,
            view_index: frame.frame_index,
            gaussians: scene.active_count(),
            stage: Stage::Tracking,
            iteration: it,
            loss,
            record: &rec,
            grads: &gs,
        });
        stats.rendered_pixels += frame.resolution.pixels();
        stats.fragments += rec.fragment_count();
        let loss = loss.to_f64_lossy();
        if let Some(&prev) = stats.losses.last() {
            rises = if loss > prev { rises + 1 } else { 0 };
            if rises >= 5 {
                step *= 0.5;
                rises = 0;
                stats.step_halvings.push(it);
            }
        }
        stats.losses.push(loss);
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, frame.pose));
        }

        let decay = cfg.lr_decay.powi(it as i32) * step;
        let delta = pivot_step(&gs.pose_level, pivot, cfg.lr_pose_rot * decay, cfg.lr_pose_trans * decay);
        frame.pose = frame.pose.retract(&delta);

        if let Some(p) = prune.as_deref_mut() {
            let pose = CameraPose { intrinsics: frame.pose.intrinsics, ..frame.pose };
            let native = frame.native;
            let ev = p.step(scene, &gs, |s| pair_set(s, &pose, native, &cfg.render));
            if !ev.masked.is_empty() || !ev.removed.is_empty() || ev.change_ratio.is_some() {
                stats.prune_events.push(ev);
            }
        }
    }
    if let Some((_, pose)) = best {
        frame.pose = pose;
    }
    Ok(stats)
}

/// Mean valid observed depth, the distance of the tracking rotation pivot.
pub fn pivot_depth<T: Real>(depth: &[T]) -> f64 {
    let (sum, n) = depth
        .iter()
        .map(|d| d.to_f64_lossy())
        .filter(|d| *d > 0.0)
        .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Gradient step on the pose with rotations pivoting about the camera-space
/// point `p = (0, 0, pivot)` instead of the camera center. In those coordinates
/// `t' = R(φ)(t - p) + p + ρ'`, so `dL/dφ' = dL/dφ + dL/dρ × p` and the step maps
/// back to the left retraction as `ρ = ρ' + p - R(φ) p`.
pub fn pivot_step<T: Real>(g: &[T; 6], pivot: f64, lr_rot: f64, lr_trans: f64) -> [T; 6] {
    let g: [f64; 6] = g.map(|v| v.to_f64_lossy());
    let p = Vec3::new(0.0, 0.0, pivot);
    let g_phi = Vec3::new(g[0], g[1], g[2]) + Vec3::new(g[3], g[4], g[5]).cross(&p);
    let phi = g_phi * -lr_rot;
    let rho_p = Vec3::new(g[3], g[4], g[5]) * -lr_trans;
    let rho = rho_p + p - Quat::from_rotation_vector(&phi).rotate(&p);
    [phi.x, phi.y, phi.z, rho.x, rho.y, rho.z].map(T::lit)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub losses: Vec<f64>,
    pub inserted: usize,
    pub rendered_pixels: usize,
    pub fragments: usize,
}

/// Seeds Gaussians at lattice pixels with valid depth that the map leaves
/// mostly uncovered. Returns the number added.
pub fn insert_gaussians<T: Real>(frame: &FrameState<T>, scene: &mut Scene<T>, cfg: &TrackerConfig) -> Result<usize, SlamError> {
    let rec = render_frame(&scene.gaussians, frame, &cfg.render)?;
    let w = frame.resolution.width;
    let thresh = T::lit(cfg.insertion_coverage);
    let seeds = back_project(frame, cfg.seed_stride, T::lit(0.6), T::lit(0.9), |x, y| rec.logs[y * w + x].coverage < thresh);
    let n = seeds.len();
    for g in seeds {
        scene.push(g);
    }
    Ok(n)
}

/// Optimizes Gaussian parameters against a keyframe with all poses frozen.
/// Iterations cycle over the keyframe and the most recent `mapping_window - 1`
/// entries of `history` (earlier keyframes, oldest first). New Gaussians are
/// seeded from `frame` only.
pub fn map_keyframe<T: Real>(
    frame: &FrameState<T>,
    history: &[FrameState<T>],
    scene: &mut Scene<T>,
    cfg: &TrackerConfig,
    observer: &mut Observer<'_, T>,
) -> Result<MapStats, SlamError> {
    let mut stats = MapStats { losses: Vec::new(), inserted: 0, rendered_pixels: 0, fragments: 0 };
    if cfg.insertion {
        stats.inserted = insert_gaussians(frame, scene, cfg)?;
    }
    let older = cfg.mapping_window.saturating_sub(1).min(history.len());
    let window: Vec<&FrameState<T>> =
        std::iter::once(frame).chain(history[history.len() - older..].iter().rev()).collect();
    for it in 0..cfg.mapping_iterations {
        let view = window[it % window.len()];
        let rec = render_frame(&scene.gaussians, view, &cfg.render)?;
        let (loss, gs) = full_backward(&rec, view, &scene.gaussians, T::lit(cfg.lambda_pho), Mode::Mapping)?;
        observer(&IterationEvent {
            frame_index: frame.frame_index,
            is_keyframe: frame.is_keyframe,
            view_index: view.frame_index,
            gaussians: scene.active_count(),
            stage: Stage::Mapping,
            iteration: it,
            loss,
            record: &rec,
            grads: &gs,
        });
        stats.rendered_pixels += view.resolution.pixels();
        stats.fragments += rec.fragment_count();
        stats.losses.push(loss.to_f64_lossy());
        let decay = cfg.lr_decay.powi(it as i32);
        for g in scene.gaussians.iter_mut() {
            let Some(d) = gs.gaussian3d_level.get(&g.id) else { continue };
            apply_update(g, d, cfg, decay);
        }
    }
    Ok(stats)
}

fn apply_update<T: Real>(g: &mut crate::scene::Gaussian3D<T>, d: &Grad3D<T>, cfg: &TrackerConfig, decay: f64) {
    let lit = T::lit;
    g.mean -= d.mean * lit(cfg.lr_mean * decay);
    for i in 0..3 {
        // log-scale step
        let s = g.scale[i];
        let step = (-(cfg.lr_scale * decay) * (d.scale[i] * s).to_f64_lossy()).clamp(-0.5, 0.5);
        g.scale[i] = (s * lit(step.exp())).max(lit(1e-4));
    }
    // exact no-op on zero gradients
    if d.rotation != Vec3::zeros() {
        let rot = d.rotation * lit(-cfg.lr_rotation * decay);
        g.rotation = g.rotation.perturb_left(&rot);
    }
    if d.opacity != T::zero() {
        let o = g.opacity.to_f64_lossy().clamp(1e-4, 1.0 - 1e-4);
        let l = logit(o) - cfg.lr_opacity * decay * d.opacity.to_f64_lossy() * o * (1.0 - o);
        g.opacity = lit(sigmoid(l).clamp(1e-3, 0.999));
    }
    for i in 0..3 {
        g.color[i] = (g.color[i] - d.color[i] * lit(cfg.lr_color * decay)).max(T::zero()).min(T::one());
    }
}

/// Constant-velocity pose prediction from the two previous estimates.
pub fn predict_pose<T: Real>(prev: &CameraPose<T>, prev2: Option<&CameraPose<T>>) -> CameraPose<T> {
    let Some(p2) = prev2 else { return *prev };
    // delta = T1 · T2⁻¹, prediction = delta · T1 (world→camera transforms)
    let r1 = prev.rotation;
    let r2 = p2.rotation;
    let dr = r1.mul(&r2.conj()).normalized();
    let dt = prev.translation - dr.rotate(&p2.translation);
    CameraPose::new(dr.mul(&r1).normalized(), dr.rotate(&prev.translation) + dt, prev.intrinsics)
}

/// RMSE of camera centers after rigid (rotation + translation) alignment of the
/// estimate onto the ground truth.
pub fn ate_rmse(estimated: &[Vec3<f64>], truth: &[Vec3<f64>]) -> f64 {
    assert_eq!(estimated.len(), truth.len());
    let n = estimated.len();
    if n == 0 {
        return 0.0;
    }
    let inv = 1.0 / n as f64;
    let me = estimated.iter().fold(Vec3::zeros(), |a, v| a + v) * inv;
    let mt = truth.iter().fold(Vec3::zeros(), |a, v| a + v) * inv;
    let mut h = Matrix3::<f64>::zeros();
    for (e, t) in estimated.iter().zip(truth) {
        h += (e - me) * (t - mt).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    let t = mt - r * me;
    let sq: f64 = estimated.iter().zip(truth).map(|(e, g)| (r * e + t - g).norm_squared()).sum();
    (sq * inv).sqrt()
}

pub fn psnr<T: Real>(rendered: &crate::scene::ColorImage<T>, observed: &crate::scene::ColorImage<T>) -> f64 {
    let mut se = 0.0;
    for (a, b) in rendered.data.iter().zip(&observed.data) {
        for c in 0..3 {
            let d = (a[c] - b[c]).to_f64_lossy().clamp(-1.0, 1.0);
            se += d * d;
        }
    }
    let mse = se / (3 * rendered.data.len()).max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub index: usize,
    pub is_keyframe: bool,
    pub width: usize,
    pub height: usize,
    pub final_loss: f64,
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    pub position_error: f64,
    pub rotation_error_deg: f64,
    pub gaussians: usize,
    pub active_gaussians: usize,
    pub masked_this_frame: usize,
    pub removed_this_frame: usize,
    pub inserted: usize,
    pub psnr: Option<f64>,
    pub rendered_pixels: usize,
    pub fragments: usize,
    pub step_halvings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub config: TrackerConfig,
    pub frames: Vec<FrameReport>,
    pub ate_rmse: f64,
    pub keyframe_psnr: Vec<(usize, f64)>,
    pub mean_keyframe_psnr: f64,
    /// Gaussians still taking part in rendering at the end (masked ones excluded).
    pub final_gaussians: usize,
    pub gaussian_trace: Vec<usize>,
    pub total_rendered_pixels: usize,
    /// Fragments composited over all iterations: the work proxy for throughput.
    pub total_fragments: usize,
    pub tracking_lost: Vec<usize>,
}

fn orientation_error_deg(a: &Quat<f64>, b: &Quat<f64>) -> f64 {
    a.angle_to(b).to_degrees()
}

/// Runs tracking on every frame and mapping on every keyframe.
pub fn run_sequence(seq: &Sequence, cfg: &TrackerConfig, observer: &mut Observer<'_, f64>) -> Result<SequenceReport, SlamError> {
    cfg.validate()?;
    if seq.frames.is_empty() {
        return Err(SlamError::EmptySequence);
    }
    let native = seq.native;
    let mut first = seq.frames[0].clone();
    first.is_keyframe = true;
    first.pose = seq.ground_truth[0];
    let mut scene = bootstrap_scene(&first, cfg.seed_stride);
    let mut boot_cfg = *cfg;
    boot_cfg.insertion = false;
    let map0 = map_keyframe(&first, &[], &mut scene, &boot_cfg, observer)?;
    let mut keyframes = vec![first.clone()];

    let mut prune = PruneState::from_config(cfg);
    let mut estimates = vec![first.pose];
    let mut keyframe_psnr = Vec::new();
    let mut frames = Vec::with_capacity(seq.frames.len());
    let kf_psnr = |scene: &Scene<f64>, f: &FrameState<f64>| -> Result<f64, SlamError> {
        let rec = render_view(&scene.gaussians, &f.pose, f.intrinsics(), f.resolution, &cfg.render)?;
        Ok(psnr(&rec.color, &f.observed_color))
    };
    let p0 = kf_psnr(&scene, &first)?;
    keyframe_psnr.push((0, p0));
    frames.push(FrameReport {
        index: 0,
        is_keyframe: true,
        width: native.width,
        height: native.height,
        final_loss: map0.losses.last().copied().unwrap_or(0.0),
        rotation: quat_array(&first.pose.rotation),
        translation: first.pose.translation.into(),
        position_error: 0.0,
        rotation_error_deg: 0.0,
        gaussians: scene.len(),
        active_gaussians: scene.active_count(),
        masked_this_frame: 0,
        removed_this_frame: 0,
        inserted: scene.len(),
        psnr: Some(p0),
        rendered_pixels: map0.rendered_pixels,
        fragments: map0.fragments,
        step_halvings: 0,
    });

    let mut k_last = 0;
    for n in 1..seq.frames.len() {
        let is_kf = n % cfg.keyframe_interval == 0;
        let res = if cfg.downsampling { select_resolution(n, k_last, is_kf, native, cfg.m) } else { native };
        let mut base = seq.frames[n].clone();
        base.is_keyframe = is_kf;
        base.last_keyframe_index = k_last;
        base.pose = predict_pose(&estimates[n - 1], n.checked_sub(2).map(|i| &estimates[i]));
        let mut frame = base.at_resolution(res).ok_or(SlamError::Resolution(res))?;
        let use_prune = cfg.pruning && !is_kf && cfg.prune_fraction_cap > 0.0;
        let track = track_frame(&mut frame, &mut scene, cfg, if use_prune { Some(&mut prune) } else { None }, observer)?;
        estimates.push(frame.pose);

        let mut report = FrameReport {
            index: n,
            is_keyframe: is_kf,
            width: res.width,
            height: res.height,
            final_loss: track.losses.last().copied().unwrap_or(0.0),
            rotation: quat_array(&frame.pose.rotation),
            translation: frame.pose.translation.into(),
            position_error: (frame.pose.center() - seq.ground_truth[n].center()).norm(),
            rotation_error_deg: orientation_error_deg(&frame.pose.rotation, &seq.ground_truth[n].rotation),
            gaussians: 0,
            active_gaussians: 0,
            masked_this_frame: track.prune_events.iter().map(|e| e.masked.len()).sum(),
            removed_this_frame: track.prune_events.iter().map(|e| e.removed.len()).sum(),
            inserted: 0,
            psnr: None,
            rendered_pixels: track.rendered_pixels,
            fragments: track.fragments,
            step_halvings: track.step_halvings.len(),
        };
        if is_kf {
            base.pose = frame.pose;
            let map = map_keyframe(&base, &keyframes, &mut scene, cfg, observer)?;
            keyframes.push(base.clone());
            let p = kf_psnr(&scene, &base)?;
            keyframe_psnr.push((n, p));
            report.psnr = Some(p);
            report.inserted = map.inserted;
            report.rendered_pixels += map.rendered_pixels;
            report.fragments += map.fragments;
            k_last = n;
        }
        report.gaussians = scene.len();
        report.active_gaussians = scene.active_count();
        frames.push(report);
    }

    let est: Vec<Vec3<f64>> = estimates.iter().map(|p| p.center()).collect();
    let gt: Vec<Vec3<f64>> = seq.ground_truth.iter().take(est.len()).map(|p| p.center()).collect();
    let mut losses: Vec<f64> = frames.iter().map(|f| f.final_loss).collect();
    losses.sort_by(f64::total_cmp);
    let median = losses[losses.len() / 2];
    let tracking_lost = frames
        .iter()
        .filter(|f| f.final_loss > cfg.tracking_lost_factor * median)
        .map(|f| f.index)
        .collect();
    let mean_psnr = keyframe_psnr.iter().map(|p| p.1).sum::<f64>() / keyframe_psnr.len() as f64;
    Ok(SequenceReport {
        config: *cfg,
        ate_rmse: ate_rmse(&est, &gt),
        mean_keyframe_psnr: mean_psnr,
        keyframe_psnr,
        final_gaussians: scene.active_count(),
        gaussian_trace: frames.iter().map(|f| f.active_gaussians).collect(),
        total_rendered_pixels: frames.iter().map(|f| f.rendered_pixels).sum(),
        total_fragments: frames.iter().map(|f| f.fragments).sum(),
        tracking_lost,
        frames,
    })
}

fn quat_array(q: &Quat<f64>) -> [f64; 4] {
    [q.w, q.x, q.y, q.z]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn importance_examples() {
        let zero = Grad3D::<f64>::default();
        assert_eq!(importance_score(&zero, 0.8), 0.0);
        let g = Grad3D { mean: Vec3::new(3.0, 4.0, 0.0), ..Default::default() };
        assert_eq!(importance_score(&g, 0.8), 5.0);
        let g = Grad3D {
            mean: Vec3::new(1.0, 0.0, 0.0),
            scale: Vec3::new(0.0, 2.0, 0.0),
            ..Default::default()
        };
        assert!((importance_score(&g, 0.8) - 2.6).abs() < 1e-15);
    }

    #[test]
    fn interval_rule() {
        assert_eq!(next_interval(5, 0.06), 2);
        assert_eq!(next_interval(5, 0.04), 10);
        assert_eq!(next_interval(1, 0.5), 1);
        assert_eq!(next_interval(64, 0.0), 64);
    }

    #[test]
    fn resolution_schedule() {
        let r0 = Resolution::new(128, 96);
        assert_eq!(select_resolution(8, 8, true, r0, 2.0), r0);
        assert_eq!(select_resolution(9, 8, false, r0, 2.0), Resolution::new(32, 24));
        assert_eq!(select_resolution(10, 8, false, r0, 2.0), Resolution::new(32, 48));
        assert_eq!(select_resolution(11, 8, false, r0, 2.0), Resolution::new(64, 48));
        assert_eq!(select_resolution(15, 8, false, r0, 2.0), Resolution::new(64, 48));
    }

    #[test]
    fn ate_is_alignment_invariant() {
        let gt: Vec<Vec3<f64>> = (0..10).map(|i| Vec3::new(i as f64, (i * i) as f64 * 0.1, 1.0)).collect();
        let q = Quat::from_rotation_vector(&Vec3::new(0.3, -0.2, 0.5));
        let est: Vec<_> = gt.iter().map(|p| q.rotate(p) + Vec3::new(1.0, 2.0, 3.0)).collect();
        assert!(ate_rmse(&est, &gt) < 1e-12);
        let mut noisy = gt.clone();
        noisy[3].x += 0.5;
        assert!(ate_rmse(&noisy, &gt) > 0.1);
    }

    #[test]
    fn constant_velocity_prediction() {
        let k = crate::scene::Intrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 };
        let p0 = CameraPose::new(Quat::identity(), Vec3::new(0.0, 0.0, 0.0), k);
        let step = [0.01, 0.02, -0.01, 0.1, 0.0, 0.05];
        let p1 = p0.retract(&step);
        let p2 = p1.retract(&step);
        let pred = predict_pose(&p1, Some(&p0));
        assert!((pred.translation - p2.translation).abs().max() < 1e-12);
        assert!(pred.rotation.angle_to(&p2.rotation) < 1e-12);
    }
}
