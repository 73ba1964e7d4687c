//! Rendering backpropagation and preprocessing backpropagation.
//!
//! Per pixel the compositing log is walked back to front. Transmittance is
//! recovered by repeated division by `1 - α` starting from the final value, and
//! the suffix of logged color contributions gives the occlusion term of the
//! alpha gradient. Pixel-level splat gradients are then summed per tile and per
//! Gaussian, and finally chained through the projection to the 3D parameters and
//! the camera pose.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::ops::{Add, AddAssign};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{cross, left_rotation_grad, Mat2, Mat3, Vec2, Vec3};
use crate::projection::{projection_jacobian, Gaussian2D};
use crate::raster::{alpha_raw, pixel_center, PixelLog, RenderRecord};
use crate::scalar::Real;
use crate::scene::{ColorImage, DepthImage, FrameState, Gaussian3D, TileLayout};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackpropError {
    #[error("pixel ({x}, {y}): 1 - alpha below 1e-6 for gaussian {gaussian}")]
    DegenerateAlpha { x: usize, y: usize, gaussian: u32 },
    #[error("observed buffers are {0:?}, rendered {1:?}")]
    ResolutionMismatch((usize, usize), (usize, usize)),
    #[error("gaussian {0} has 2D gradients but is not in the render record")]
    UnknownGaussian(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Tracking,
    Mapping,
}

/// Per-pixel loss gradients `dL/dC_P` and `dL/dD_P`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients<T> {
    pub color: Vec<[T; 3]>,
    pub depth: Vec<T>,
}

/// `λ·E_pho + (1-λ)·E_geo` with L1 residuals.
///
/// `E_pho` averages the per-pixel L1 color error over all pixels, `E_geo` averages
/// the absolute depth error over pixels whose observed depth is valid (> 0).
pub fn loss_from_buffers<T: Real>(
    rendered_color: &ColorImage<T>,
    rendered_depth: &DepthImage<T>,
    observed_color: &ColorImage<T>,
    observed_depth: &DepthImage<T>,
    lambda_pho: T,
) -> Result<(T, LossGradients<T>), BackpropError> {
    masked_loss_from_buffers(rendered_color, rendered_depth, observed_color, observed_depth, lambda_pho, None)
}

/// Loss restricted to pixels where `mask` is true; both means run over the
/// selected pixels only and excluded pixels get zero gradient.
pub fn masked_loss_from_buffers<T: Real>(
    rendered_color: &ColorImage<T>,
    rendered_depth: &DepthImage<T>,
    observed_color: &ColorImage<T>,
    observed_depth: &DepthImage<T>,
    lambda_pho: T,
    mask: Option<&[bool]>,
) -> Result<(T, LossGradients<T>), BackpropError> {
    let dims = (rendered_color.width, rendered_color.height);
    for other in [
        (observed_color.width, observed_color.height),
        (observed_depth.width, observed_depth.height),
        (rendered_depth.width, rendered_depth.height),
    ] {
        if other != dims {
            return Err(BackpropError::ResolutionMismatch(other, dims));
        }
    }
    let total = rendered_color.data.len();
    if let Some(m) = mask {
        if m.len() != total {
            return Err(BackpropError::ResolutionMismatch((m.len(), 1), (total, 1)));
        }
    }
    let used = |p: usize| mask.is_none_or(|m| m[p]);
    let n = (0..total).filter(|&p| used(p)).count();
    let valid = (0..total).filter(|&p| used(p) && observed_depth.data[p] > T::zero()).count();
    let sign = |r: T| {
        if r > T::zero() {
            T::one()
        } else if r < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    };
    let w_pho = lambda_pho / T::lit(n.max(1) as f64);
    let w_geo = if valid > 0 {
        (T::one() - lambda_pho) / T::lit(valid as f64)
    } else {
        T::zero()
    };
    let mut e_pho = T::zero();
    let mut e_geo = T::zero();
    let mut color = vec![[T::zero(); 3]; total];
    let mut depth = vec![T::zero(); total];
    for p in (0..total).filter(|&p| used(p)) {
        let (rc, oc) = (rendered_color.data[p], observed_color.data[p]);
        for c in 0..3 {
            let r = rc[c] - oc[c];
            e_pho += r.abs();
            color[p][c] = w_pho * sign(r);
        }
        let od = observed_depth.data[p];
        if od > T::zero() {
            let r = rendered_depth.data[p] - od;
            e_geo += r.abs();
            depth[p] = w_geo * sign(r);
        }
    }
    let loss = w_pho * e_pho + w_geo * e_geo;
    Ok((loss, LossGradients { color, depth }))
}

pub fn compute_loss<T: Real>(
    record: &RenderRecord<T>,
    frame: &FrameState<T>,
    lambda_pho: T,
) -> Result<(T, LossGradients<T>), BackpropError> {
    loss_from_buffers(&record.color, &record.depth, &frame.observed_color, &frame.observed_depth, lambda_pho)
}

/// Gradient with respect to one screen-space splat.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Grad2D<T: Real> {
    pub color: Vec3<T>,
    pub alpha: T,
    pub mean2d: Vec2<T>,
    /// Symmetric; `dL = <cov2d, dΣ*>` for symmetric perturbations.
    pub cov2d: Mat2<T>,
    pub opacity: T,
    pub depth: T,
}

impl<T: Real> Grad2D<T> {
    pub fn zero() -> Self {
        Self {
            color: Vec3::zeros(),
            alpha: T::zero(),
            mean2d: Vec2::zeros(),
            cov2d: Mat2::zeros(),
            opacity: T::zero(),
            depth: T::zero(),
        }
    }

    pub fn values(&self) -> [T; 12] {
        [
            self.color.x,
            self.color.y,
            self.color.z,
            self.alpha,
            self.mean2d.x,
            self.mean2d.y,
            self.cov2d[(0, 0)],
            self.cov2d[(0, 1)],
            self.cov2d[(1, 1)],
            self.opacity,
            self.depth,
            T::zero(),
        ]
    }
}

impl<T: Real> AddAssign for Grad2D<T> {
    fn add_assign(&mut self, o: Self) {
        self.color += o.color;
        self.alpha += o.alpha;
        self.mean2d += o.mean2d;
        self.cov2d += o.cov2d;
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

impl<T: Real> Add for Grad2D<T> {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

/// Gradient with respect to the trainable parameters of one 3D Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Grad3D<T: Real> {
    pub mean: Vec3<T>,
    pub scale: Vec3<T>,
    /// Left-perturbation tangent of the Gaussian's rotation.
    pub rotation: Vec3<T>,
    pub opacity: T,
    pub color: Vec3<T>,
}

impl<T: Real> Grad3D<T> {
    /// Concatenated scale and rotation block, the factored stand-in for `dL/dΣ`.
    pub fn covariance_block_norm(&self) -> T {
        let s = self.scale.iter().chain(self.rotation.iter()).fold(T::zero(), |a, v| a + *v * *v);
        s.sqrt()
    }
}

/// One fragment's gradient with provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelGrad<T: Real> {
    pub gaussian_id: u32,
    pub splat: usize,
    pub x: usize,
    pub y: usize,
    pub tile: usize,
    pub grad: Grad2D<T>,
}

/// Transmittance in front of each logged fragment, recovered back to front by
/// `T_k = T_{k+1} / (1 - α_k)` from the final transmittance.
pub fn recover_transmittance<T: Real>(log: &PixelLog<T>) -> Vec<T> {
    let mut out = vec![T::zero(); log.entries.len()];
    let mut t = log.t_final;
    for (k, e) in log.entries.iter().enumerate().rev() {
        t /= T::one() - e.alpha;
        out[k] = t;
    }
    out
}

/// Pixel-level splat gradients for one pixel, in log order.
#[allow(clippy::too_many_arguments)]
pub fn backward_pixel<T: Real>(
    x: usize,
    y: usize,
    log: &PixelLog<T>,
    rendered_depth: T,
    dl_dcolor: [T; 3],
    dl_ddepth: T,
    splats: &[Gaussian2D<T>],
    background: [T; 3],
) -> Result<Vec<(usize, u32, Grad2D<T>)>, BackpropError> {
    let n = log.entries.len();
    let mut out = vec![(0usize, 0u32, Grad2D::zero()); n];
    if n == 0 {
        return Ok(Vec::new());
    }
    let pixel = pixel_center::<T>(x, y);
    let t_final = log.t_final;
    let coverage = log.coverage;
    let depth_active = coverage > T::lit(1e-6) && dl_ddepth != T::zero();
    let bg_term = [background[0] * t_final, background[1] * t_final, background[2] * t_final];

    let mut t = t_final;
    let mut suffix = [T::zero(); 3];
    let mut suffix_depth = T::zero();
    for k in (0..n).rev() {
        let e = &log.entries[k];
        let one_minus = T::one() - e.alpha;
        if one_minus < T::lit(1e-6) {
            return Err(BackpropError::DegenerateAlpha { x, y, gaussian: e.gaussian_id });
        }
        t /= one_minus;
        let g = &splats[e.splat];
        let c = [g.color.x, g.color.y, g.color.z];

        let mut dl_dalpha = T::zero();
        for ch in 0..3 {
            let dc_dalpha = t * c[ch] - (suffix[ch] + bg_term[ch]) / one_minus;
            dl_dalpha += dc_dalpha * dl_dcolor[ch];
        }
        let w = t * e.alpha;
        let mut dl_dd = T::zero();
        if depth_active {
            let d_raw = t * g.depth - suffix_depth / one_minus;
            let d_cov = t_final / one_minus;
            dl_dalpha += (d_raw - rendered_depth * d_cov) / coverage * dl_ddepth;
            dl_dd = w / coverage * dl_ddepth;
        }

        let mut grad = Grad2D {
            color: Vec3::new(w * dl_dcolor[0], w * dl_dcolor[1], w * dl_dcolor[2]),
            alpha: dl_dalpha,
            depth: dl_dd,
            ..Grad2D::zero()
        };
        if !e.clamped {
            let (a, falloff) = alpha_raw(g, &pixel);
            let d = pixel - g.mean2d;
            let q = g.inv_cov2d;
            grad.opacity = falloff * dl_dalpha;
            grad.mean2d = (q * d) * (a * dl_dalpha);
            let g_conic = (d * d.transpose()) * (-T::lit(0.5) * a * dl_dalpha);
            grad.cov2d = -(q * g_conic * q);
        }
        out[k] = (e.splat, e.gaussian_id, grad);

        for ch in 0..3 {
            suffix[ch] += e.contribution[ch];
        }
        suffix_depth += w * g.depth;
    }
    Ok(out)
}

/// Pixel, tile, Gaussian-level 2D gradients plus the 3D and pose gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet<T: Real> {
    /// Sorted by (tile, row-major pixel, log order). Empty unless requested.
    pub pixel_level: Vec<PixelGrad<T>>,
    pub tile_level: BTreeMap<(u32, usize), Grad2D<T>>,
    pub gaussian2d_level: BTreeMap<u32, Grad2D<T>>,
    pub gaussian3d_level: BTreeMap<u32, Grad3D<T>>,
    /// `[φ; ρ]`, rotational then translational.
    pub pose_level: [T; 6],
}

/// Sums pixel-level records per (gaussian, tile) and then per gaussian, visiting
/// records by tile id and then row-major pixel order.
pub fn aggregate_gradients<T: Real>(records: &[PixelGrad<T>], layout: &TileLayout) -> GradientSet<T> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| {
        let r = &records[i];
        (r.tile, r.y * layout.width + r.x, i)
    });
    let mut tile_level: BTreeMap<(u32, usize), Grad2D<T>> = BTreeMap::new();
    for &i in &order {
        let r = &records[i];
        *tile_level.entry((r.gaussian_id, r.tile)).or_insert_with(Grad2D::zero) += r.grad;
    }
    let gaussian2d_level = sum_tiles(&tile_level);
    GradientSet {
        pixel_level: order.iter().map(|&i| records[i]).collect(),
        tile_level,
        gaussian2d_level,
        gaussian3d_level: BTreeMap::new(),
        pose_level: [T::zero(); 6],
    }
}

fn sum_tiles<T: Real>(tile_level: &BTreeMap<(u32, usize), Grad2D<T>>) -> BTreeMap<u32, Grad2D<T>> {
    // BTreeMap iteration is (id, tile) ascending, so each id is summed in tile order
    let mut out: BTreeMap<u32, Grad2D<T>> = BTreeMap::new();
    for (&(id, _), g) in tile_level {
        *out.entry(id).or_insert_with(Grad2D::zero) += *g;
    }
    out
}

/// Rendering backpropagation over a whole frame. Tiles run in parallel; the
/// per-tile sums and the cross-tile merge follow the same fixed order as
/// [`aggregate_gradients`], so results do not depend on the thread count.
pub fn backward_frame<T: Real>(
    record: &RenderRecord<T>,
    loss_grads: &LossGradients<T>,
    keep_pixel_level: bool,
) -> Result<GradientSet<T>, BackpropError> {
    let layout = record.layout;
    let width = record.resolution.width;
    let background = record.config.background.map(T::lit);
    type TileOut<T> = (BTreeMap<(u32, usize), Grad2D<T>>, Vec<PixelGrad<T>>);
    let tiles: Vec<Result<TileOut<T>, BackpropError>> = (0..layout.num_tiles())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = layout.tile_rect(tile);
            let mut sums: BTreeMap<(u32, usize), Grad2D<T>> = BTreeMap::new();
            let mut pixels = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * width + x;
                    let grads = backward_pixel(
                        x,
                        y,
                        &record.logs[p],
                        record.depth.data[p],
                        loss_grads.color[p],
                        loss_grads.depth[p],
                        &record.splats,
                        background,
                    )?;
                    for (splat, id, g) in grads {
                        *sums.entry((id, tile)).or_insert_with(Grad2D::zero) += g;
                        if keep_pixel_level {
                            pixels.push(PixelGrad {
                                gaussian_id: id,
                                splat,
                                x,
                                y,
                                tile,
                                grad: g,
                            });
                        }
                    }
                }
            }
            Ok((sums, pixels))
        })
        .collect();
    let mut tile_level = BTreeMap::new();
    let mut pixel_level = Vec::new();
    for t in tiles {
        let (sums, pixels) = t?;
        tile_level.extend(sums);
        pixel_level.extend(pixels);
    }
    let gaussian2d_level = sum_tiles(&tile_level);
    Ok(GradientSet {
        pixel_level,
        tile_level,
        gaussian2d_level,
        gaussian3d_level: BTreeMap::new(),
        pose_level: [T::zero(); 6],
    })
}

/// 3D gradient of one Gaussian and its pose contribution `dL/dP_k`.
pub fn gaussian_backward<T: Real>(
    g3: &Gaussian3D<T>,
    g2: &Grad2D<T>,
    record: &RenderRecord<T>,
) -> (Grad3D<T>, [T; 6]) {
    let k = &record.intrinsics;
    let w = record.pose.rotation.to_matrix();
    let t = w * g3.mean + record.pose.translation;
    let sigma = g3.covariance();
    let sigma_cam = w * sigma * w.transpose();
    let j = projection_jacobian(k, &t);

    let gm = g2.mean2d;
    let gc = (g2.cov2d + g2.cov2d.transpose()) * T::lit(0.5);
    let iz = T::one() / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;

    // screen mean and depth
    let mut dl_dt = Vec3::new(
        k.fx * iz * gm.x,
        k.fy * iz * gm.y,
        -k.fx * t.x * iz2 * gm.x - k.fy * t.y * iz2 * gm.y + g2.depth,
    );
    // screen covariance through the Jacobian's dependence on t
    let dl_dj = (gc * j * sigma_cam) * T::lit(2.0);
    let two = T::lit(2.0);
    dl_dt.x += dl_dj[(0, 2)] * (-k.fx * iz2);
    dl_dt.y += dl_dj[(1, 2)] * (-k.fy * iz2);
    dl_dt.z += dl_dj[(0, 0)] * (-k.fx * iz2)
        + dl_dj[(0, 2)] * (two * k.fx * t.x * iz3)
        + dl_dj[(1, 1)] * (-k.fy * iz2)
        + dl_dj[(1, 2)] * (two * k.fy * t.y * iz3);

    let g_sigma_cam: Mat3<T> = j.transpose() * gc * j;
    let g_sigma: Mat3<T> = w.transpose() * g_sigma_cam * w;
    let r = g3.rotation.to_matrix();
    let mut dl_dscale = Vec3::zeros();
    for i in 0..3 {
        let col = r.column(i).into_owned();
        dl_dscale[i] = two * g3.scale[i] * (col.transpose() * g_sigma * col)[(0, 0)];
    }
    let grad = Grad3D {
        mean: w.transpose() * dl_dt,
        scale: dl_dscale,
        rotation: left_rotation_grad(&sigma, &g_sigma),
        opacity: g2.opacity,
        color: g2.color,
    };
    let rot = cross(&t, &dl_dt) + left_rotation_grad(&sigma_cam, &g_sigma_cam);
    let pose = [rot.x, rot.y, rot.z, dl_dt.x, dl_dt.y, dl_dt.z];
    (grad, pose)
}

/// Pairwise reduction of per-Gaussian pose gradients, level by level.
pub fn merge_tree<T: Real>(mut parts: Vec<[T; 6]>) -> [T; 6] {
    if parts.is_empty() {
        return [T::zero(); 6];
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        for pair in parts.chunks(2) {
            let mut s = pair[0];
            if let Some(b) = pair.get(1) {
                for i in 0..6 {
                    s[i] += b[i];
                }
            }
            next.push(s);
        }
        parts = next;
    }
    parts[0]
}

/// Chains Gaussian-level 2D gradients to 3D parameters and, when tracking, to the pose.
pub fn preprocess_backward<T: Real>(
    gs: &mut GradientSet<T>,
    gaussians: &[Gaussian3D<T>],
    record: &RenderRecord<T>,
    mode: Mode,
) -> Result<(), BackpropError> {
    let by_id: BTreeMap<u32, usize> = record
        .splats
        .iter()
        .zip(&record.scene_index)
        .map(|(s, &i)| (s.source_id, i))
        .collect();
    let ids: Vec<u32> = gs.gaussian2d_level.keys().copied().collect();
    let results: Vec<Result<(u32, Grad3D<T>, [T; 6]), BackpropError>> = ids
        .par_iter()
        .map(|id| {
            let idx = *by_id.get(id).ok_or(BackpropError::UnknownGaussian(*id))?;
            let (g3, pose) = gaussian_backward(&gaussians[idx], &gs.gaussian2d_level[id], record);
            Ok((*id, g3, pose))
        })
        .collect();
    let mut pose_parts = Vec::with_capacity(results.len());
    gs.gaussian3d_level.clear();
    for r in results {
        let (id, g3, pose) = r?;
        gs.gaussian3d_level.insert(id, g3);
        pose_parts.push(pose);
    }
    gs.pose_level = match mode {
        Mode::Tracking => merge_tree(pose_parts),
        Mode::Mapping => [T::zero(); 6],
    };
    Ok(())
}

/// Loss, rendering BP and preprocessing BP in one call.
pub fn full_backward<T: Real>(
    record: &RenderRecord<T>,
    frame: &FrameState<T>,
    gaussians: &[Gaussian3D<T>],
    lambda_pho: T,
    mode: Mode,
) -> Result<(T, GradientSet<T>), BackpropError> {
    full_backward_masked(record, frame, gaussians, lambda_pho, mode, None)
}

/// [`full_backward`] with the loss restricted to the pixels selected by `mask`.
pub fn full_backward_masked<T: Real>(
    record: &RenderRecord<T>,
    frame: &FrameState<T>,
    gaussians: &[Gaussian3D<T>],
    lambda_pho: T,
    mode: Mode,
    mask: Option<&[bool]>,
) -> Result<(T, GradientSet<T>), BackpropError> {
    let (loss, lg) = masked_loss_from_buffers(
        &record.color,
        &record.depth,
        &frame.observed_color,
        &frame.observed_depth,
        lambda_pho,
        mask,
    )?;
    let mut gs = backward_frame(record, &lg, false)?;
    preprocess_backward(&mut gs, gaussians, record, mode)?;
    Ok((loss, gs))
}

impl<T: Real> GradientSet<T> {
    /// Line-oriented dump: `<id> <level> <values...>`; the pose line uses id `-`.
    pub fn write_dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        let fmt = |vals: &[T]| vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        for p in &self.pixel_level {
            writeln!(w, "{} pixel {} {} {}", p.gaussian_id, p.x, p.y, fmt(&p.grad.values()[..11]))?;
        }
        for ((id, tile), g) in &self.tile_level {
            writeln!(w, "{id} tile {tile} {}", fmt(&g.values()[..11]))?;
        }
        for (id, g) in &self.gaussian2d_level {
            writeln!(w, "{id} g2d {}", fmt(&g.values()[..11]))?;
        }
        for (id, g) in &self.gaussian3d_level {
            let v = [
                g.mean.x, g.mean.y, g.mean.z, g.scale.x, g.scale.y, g.scale.z, g.rotation.x, g.rotation.y,
                g.rotation.z, g.opacity, g.color.x, g.color.y, g.color.z,
            ];
            writeln!(w, "{id} g3d {}", fmt(&v))?;
        }
        writeln!(w, "- pose {}", fmt(&self.pose_level))
    }
}
