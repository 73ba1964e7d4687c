//! Central finite-difference checking of the analytic backward pass.
//!
//! The check renders with early termination and the α skip threshold disabled
//! so the loss is smooth in every parameter, and builds observations whose
//! residuals stay away from zero so the L1 kinks are not crossed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backprop::{full_backward, recover_transmittance, BackpropError, GradientSet, Mode};
use crate::math::{Quat, Vec3};
use crate::raster::{render_frame, RenderConfig, RenderRecord};
use crate::scalar::Real;
use crate::scene::{CameraPose, ColorImage, DepthImage, FrameState, Gaussian3D, Intrinsics};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Mean,
    Scale,
    Rotation,
    Opacity,
    Color,
    PoseRotation,
    PoseTranslation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub gaussian_id: Option<u32>,
    pub kind: ParamKind,
    pub component: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Worst relative error of recovered vs logged transmittance.
    pub transmittance_rel_err: f64,
    pub fragments: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self, pred: impl Fn(ParamKind) -> bool) -> f64 {
        self.entries.iter().filter(|e| pred(e.kind)).map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self, pred: impl Fn(ParamKind) -> bool) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| pred(e.kind))
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub gaussians: Vec<Gaussian3D<f64>>,
    pub frame: FrameState<f64>,
    pub lambda_pho: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// A random scene of `count` Gaussians in front of a 32×32 camera, with
/// observations offset from the rendered image by at least 0.05 per channel.
pub fn random_case(seed: u64, count: usize) -> GradCheckCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Intrinsics { fx: 36.0, fy: 36.0, cx: 16.0, cy: 16.0 };
    let rv = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let tr = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let pose = CameraPose::new(Quat::from_rotation_vector(&rv), tr, k);
    let w_inv = pose.rotation.conj().to_matrix();

    let mut gaussians = Vec::with_capacity(count);
    for id in 0..count {
        let u = rng.random_range(-2.0..34.0);
        let v = rng.random_range(-2.0..34.0);
        let z: f64 = rng.random_range(2.0..5.0);
        let cam = Vec3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
        let mean = w_inv * (cam - tr);
        let scale = Vec3::new(
            rng.random_range(0.06..0.35),
            rng.random_range(0.06..0.35),
            rng.random_range(0.06..0.35),
        );
        let q = Quat::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalized();
        let color = Vec3::new(rng.random(), rng.random(), rng.random());
        gaussians.push(Gaussian3D::new(id as u32, mean, scale, q, rng.random_range(0.2..0.95), color));
    }

    let cfg = RenderConfig::exhaustive();
    let mut frame = FrameState::new(
        0,
        true,
        ColorImage::filled(32, 32, [0.0; 3]),
        DepthImage::filled(32, 32, 0.0),
        pose,
    );
    let rec = render_frame(&gaussians, &frame, &cfg).expect("random case projects");
    let offset = |rng: &mut ChaCha8Rng| {
        let m: f64 = rng.random_range(0.05..0.25);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    };
    for (o, r) in frame.observed_color.data.iter_mut().zip(&rec.color.data) {
        for c in 0..3 {
            o[c] = r[c] + offset(&mut rng);
        }
    }
    // depth is only observed where coverage is far from the normalization cutoff
    for ((o, r), log) in frame.observed_depth.data.iter_mut().zip(&rec.depth.data).zip(&rec.logs) {
        let drop = rng.random::<f64>() < 0.1;
        let m = offset(&mut rng);
        *o = if drop || log.coverage < 1e-3 { 0.0 } else { r + m };
    }
    GradCheckCase { gaussians, frame, lambda_pho: 0.7 }
}

fn loss_at(gaussians: &[Gaussian3D<f64>], frame: &FrameState<f64>, lambda: f64, cfg: &RenderConfig) -> f64 {
    let rec = render_frame(gaussians, frame, cfg).expect("perturbed scene projects");
    crate::backprop::compute_loss(&rec, frame, lambda).expect("matching buffers").0
}

fn perturb(g: &mut Gaussian3D<f64>, kind: ParamKind, c: usize, h: f64) {
    match kind {
        ParamKind::Mean => g.mean[c] += h,
        ParamKind::Scale => g.scale[c] += h,
        ParamKind::Rotation => {
            let mut d = Vec3::zeros();
            d[c] = h;
            g.rotation = g.rotation.perturb_left(&d);
        }
        ParamKind::Opacity => g.opacity += h,
        ParamKind::Color => g.color[c] += h,
        ParamKind::PoseRotation | ParamKind::PoseTranslation => unreachable!(),
    }
}

/// Analytic gradients and forward record for a case.
pub fn analytic(case: &GradCheckCase) -> Result<(RenderRecord<f64>, GradientSet<f64>), BackpropError> {
    let cfg = RenderConfig::exhaustive();
    let rec = render_frame(&case.gaussians, &case.frame, &cfg).expect("case projects");
    let (_, gs) = full_backward(&rec, &case.frame, &case.gaussians, case.lambda_pho, Mode::Tracking)?;
    Ok((rec, gs))
}

/// Checks every Gaussian parameter and the pose against central differences.
/// Parameter steps are `h`; rotations (Gaussian and pose) use `h_rot` radians.
pub fn check_case(case: &GradCheckCase, h: f64, h_rot: f64, floor: f64) -> Result<GradCheckReport, BackpropError> {
    let cfg = RenderConfig::exhaustive();
    let (rec, gs) = analytic(case)?;
    let mut report = GradCheckReport::default();

    for log in &rec.logs {
        let recovered = recover_transmittance(log);
        for (e, t) in log.entries.iter().zip(recovered) {
            let err = ((t - e.transmittance) / e.transmittance).abs();
            report.transmittance_rel_err = report.transmittance_rel_err.max(err);
            report.fragments += 1;
        }
    }

    let kinds = [
        ParamKind::Mean,
        ParamKind::Scale,
        ParamKind::Rotation,
        ParamKind::Opacity,
        ParamKind::Color,
    ];
    for (i, g) in case.gaussians.iter().enumerate() {
        let g3 = gs.gaussian3d_level.get(&g.id).copied().unwrap_or_default();
        for kind in kinds {
            let dims = if kind == ParamKind::Opacity { 1 } else { 3 };
            let step = if kind == ParamKind::Rotation { h_rot } else { h };
            for c in 0..dims {
                let a = match kind {
                    ParamKind::Mean => g3.mean[c],
                    ParamKind::Scale => g3.scale[c],
                    ParamKind::Rotation => g3.rotation[c],
                    ParamKind::Opacity => g3.opacity,
                    _ => g3.color[c],
                };
                let mut plus = case.gaussians.clone();
                perturb(&mut plus[i], kind, c, step);
                let mut minus = case.gaussians.clone();
                perturb(&mut minus[i], kind, c, -step);
                let n = (loss_at(&plus, &case.frame, case.lambda_pho, &cfg)
                    - loss_at(&minus, &case.frame, case.lambda_pho, &cfg))
                    / (2.0 * step);
                report.entries.push(GradCheckEntry {
                    gaussian_id: Some(g.id),
                    kind,
                    component: c,
                    analytic: a,
                    numeric: n,
                    rel_err: relative_error(a, n, floor),
                });
            }
        }
    }

    for c in 0..6 {
        let rotational = c < 3;
        let step = if rotational { h_rot } else { h };
        let mut d = [0.0; 6];
        d[c] = step;
        let mut plus = case.frame.clone();
        plus.pose = case.frame.pose.retract(&d);
        d[c] = -step;
        let mut minus = case.frame.clone();
        minus.pose = case.frame.pose.retract(&d);
        let n = (loss_at(&case.gaussians, &plus, case.lambda_pho, &cfg)
            - loss_at(&case.gaussians, &minus, case.lambda_pho, &cfg))
            / (2.0 * step);
        let a = gs.pose_level[c];
        report.entries.push(GradCheckEntry {
            gaussian_id: None,
            kind: if rotational { ParamKind::PoseRotation } else { ParamKind::PoseTranslation },
            component: c % 3,
            analytic: a,
            numeric: n,
            rel_err: relative_error(a, n, floor),
        });
    }
    Ok(report)
}

/// Casts a case's scalar type, for running the same scene through f32.
pub fn cast_gaussians<U: Real>(gs: &[Gaussian3D<f64>]) -> Vec<Gaussian3D<U>> {
    gs.iter()
        .map(|g| {
            let v = |x: &Vec3<f64>| Vec3::new(U::lit(x.x), U::lit(x.y), U::lit(x.z));
            let mut out = Gaussian3D::new(g.id, v(&g.mean), v(&g.scale), g.rotation.cast(), U::lit(g.opacity), v(&g.color));
            out.masked = g.masked;
            out.mask_age = g.mask_age;
            out
        })
        .collect()
}
