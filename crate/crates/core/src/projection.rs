//! Preprocessing: EWA projection of 3D Gaussians to screen-space splats and tile binning.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{inverse2, max_eigen_sym2, Mat2, Mat2x3, Mat3, Vec2, Vec3};
use crate::scalar::Real;
use crate::scene::{CameraPose, Gaussian3D, Intrinsics, Resolution, TileLayout};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("gaussian {0} has non-finite parameters")]
    NonFinite(u32),
    #[error("gaussian {0} projects to a degenerate 2D covariance")]
    Degenerate(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    /// Camera-space depth at or below which splats are culled.
    pub near: f64,
    /// Added to both diagonal entries of the screen covariance, in native px²;
    /// a frame downsampled by `d` along an axis gets `low_pass / d²` there.
    pub low_pass: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { near: 0.01, low_pass: 0.3 }
    }
}

/// Screen-space splat.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian2D<T> {
    pub source_id: u32,
    pub mean2d: Vec2<T>,
    pub cov2d: Mat2<T>,
    /// Conic, the inverse of `cov2d`.
    pub inv_cov2d: Mat2<T>,
    pub depth: T,
    pub color: Vec3<T>,
    pub opacity: T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projected<T> {
    Splat(Gaussian2D<T>),
    Culled,
}

impl<T> Projected<T> {
    pub fn splat(self) -> Option<Gaussian2D<T>> {
        match self {
            Projected::Splat(s) => Some(s),
            Projected::Culled => None,
        }
    }
}

/// Perspective Jacobian of `(fx x/z, fy y/z)` at camera-space point `t`.
pub fn projection_jacobian<T: Real>(k: &Intrinsics<T>, t: &Vec3<T>) -> Mat2x3<T> {
    let iz = T::one() / t.z;
    let iz2 = iz * iz;
    Mat2x3::new(
        k.fx * iz,
        T::zero(),
        -k.fx * t.x * iz2,
        T::zero(),
        k.fy * iz,
        -k.fy * t.y * iz2,
    )
}

/// Projects with intrinsics already expressed at the render resolution.
pub fn project_with_intrinsics<T: Real>(
    g: &Gaussian3D<T>,
    pose: &CameraPose<T>,
    k: &Intrinsics<T>,
    cfg: &ProjectionConfig,
) -> Result<Projected<T>, ProjectionError> {
    let finite = g.mean.iter().chain(g.scale.iter()).all(|v| v.is_finite())
        && g.rotation.norm().is_finite()
        && g.opacity.is_finite();
    if !finite {
        return Err(ProjectionError::NonFinite(g.id));
    }
    let w = pose.rotation.to_matrix();
    let t = w * g.mean + pose.translation;
    if t.z <= T::lit(cfg.near) {
        return Ok(Projected::Culled);
    }
    let mean2d = Vec2::new(k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy);
    let j = projection_jacobian(k, &t);
    let sigma_cam: Mat3<T> = w * g.covariance() * w.transpose();
    let mut cov2d: Mat2<T> = j * sigma_cam * j.transpose();
    // the low-pass is defined in native pixels
    let lp = T::lit(cfg.low_pass);
    let (rx, ry) = (k.fx / pose.intrinsics.fx, k.fy / pose.intrinsics.fy);
    cov2d[(0, 0)] += lp * rx * rx;
    cov2d[(1, 1)] += lp * ry * ry;
    let off = T::lit(0.5) * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    let (inv_cov2d, _) = inverse2(&cov2d).ok_or(ProjectionError::Degenerate(g.id))?;
    Ok(Projected::Splat(Gaussian2D {
        source_id: g.id,
        mean2d,
        cov2d,
        inv_cov2d,
        depth: t.z,
        color: g.color,
        opacity: g.opacity,
    }))
}

/// Projects `g` for a frame rendered at `target`, given intrinsics defined at `native`.
pub fn project_gaussian<T: Real>(
    g: &Gaussian3D<T>,
    pose: &CameraPose<T>,
    native: Resolution,
    target: Resolution,
    cfg: &ProjectionConfig,
) -> Result<Projected<T>, ProjectionError> {
    let k = pose.intrinsics.scaled_to(native, target);
    project_with_intrinsics(g, pose, &k, cfg)
}

/// 3σ radius of the larger principal axis, applied to both screen axes.
pub fn splat_radius<T: Real>(g2d: &Gaussian2D<T>) -> T {
    T::lit(3.0) * max_eigen_sym2(&g2d.cov2d).sqrt()
}

/// Inclusive range of tiles along one axis overlapped by `[lo, hi]`, if any.
fn tile_span(lo: f64, hi: f64, extent: usize, tile: usize) -> Option<(usize, usize)> {
    if !(hi > 0.0) || !(lo < extent as f64) {
        return None;
    }
    let first = (lo.max(0.0) / tile as f64).floor() as usize;
    let last_px = hi.min(extent as f64);
    // a box ending exactly on a boundary does not reach into the next tile
    let mut last = (last_px / tile as f64).ceil() as usize;
    last = last.saturating_sub(1).max(first);
    let max_tile = extent.div_ceil(tile) - 1;
    Some((first, last.min(max_tile)))
}

/// Every tile whose rectangle overlaps the splat's 3σ bounding box.
pub fn intersect_tiles<T: Real>(g2d: &Gaussian2D<T>, layout: &TileLayout) -> Vec<usize> {
    let r = splat_radius(g2d).to_f64_lossy();
    let (mx, my) = (g2d.mean2d.x.to_f64_lossy(), g2d.mean2d.y.to_f64_lossy());
    let Some((tx0, tx1)) = tile_span(mx - r, mx + r, layout.width, layout.tile_size) else {
        return Vec::new();
    };
    let Some((ty0, ty1)) = tile_span(my - r, my + r, layout.height, layout.tile_size) else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity((tx1 - tx0 + 1) * (ty1 - ty0 + 1));
    for ty in ty0..=ty1 {
        for tx in tx0..=tx1 {
            out.push(ty * layout.tiles_x() + tx);
        }
    }
    out
}

/// Splats assigned to tiles. Indices refer to the splat list the binning was built from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TileBinning {
    pub per_tile: Vec<Vec<usize>>,
    pub per_gaussian: Vec<Vec<usize>>,
    /// Source Gaussian id of each splat index.
    pub source_ids: Vec<u32>,
    pub total_intersections: usize,
}

impl TileBinning {
    pub fn build<T: Real>(splats: &[Gaussian2D<T>], layout: &TileLayout) -> Self {
        let per_gaussian: Vec<Vec<usize>> = splats.par_iter().map(|s| intersect_tiles(s, layout)).collect();
        let mut per_tile = vec![Vec::new(); layout.num_tiles()];
        // sequential merge in splat order keeps the output independent of thread count
        for (i, tiles) in per_gaussian.iter().enumerate() {
            for &t in tiles {
                per_tile[t].push(i);
            }
        }
        let source_ids: Vec<u32> = splats.iter().map(|s| s.source_id).collect();
        for list in per_tile.iter_mut() {
            list.sort_by_key(|&i| (source_ids[i], i));
        }
        let total_intersections = per_tile.iter().map(Vec::len).sum();
        Self {
            per_tile,
            per_gaussian,
            source_ids,
            total_intersections,
        }
    }

    /// The (gaussian id, tile) pairs of this binning.
    pub fn pairs(&self) -> BTreeSet<(u32, usize)> {
        self.per_gaussian
            .iter()
            .enumerate()
            .flat_map(|(i, tiles)| tiles.iter().map(move |&t| (self.source_ids[i], t)))
            .collect()
    }
}

/// `|prev △ curr| / max(1, |prev|)` over (gaussian, tile) pairs.
///
/// With an empty `prev` this is the raw size of `curr`, which can exceed 1.
pub fn intersection_change_ratio(prev: &TileBinning, curr: &TileBinning) -> f64 {
    let a = prev.pairs();
    let b = curr.pairs();
    let diff = a.symmetric_difference(&b).count();
    diff as f64 / a.len().max(1) as f64
}

/// Projects every Gaussian of a scene, skipping masked ones unless `include_masked`.
/// Returns the scene index alongside each visible splat.
pub fn project_scene<T: Real>(
    gaussians: &[Gaussian3D<T>],
    pose: &CameraPose<T>,
    k: &Intrinsics<T>,
    cfg: &ProjectionConfig,
    include_masked: bool,
) -> Result<(Vec<usize>, Vec<Gaussian2D<T>>), ProjectionError> {
    let projected: Vec<Result<Option<(usize, Gaussian2D<T>)>, ProjectionError>> = gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            if g.masked && !include_masked {
                return Ok(None);
            }
            Ok(project_with_intrinsics(g, pose, k, cfg)?.splat().map(|s| (i, s)))
        })
        .collect();
    let mut idx = Vec::new();
    let mut splats = Vec::new();
    for p in projected {
        if let Some((i, s)) = p? {
            idx.push(i);
            splats.push(s);
        }
    }
    Ok((idx, splats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Quat;

    fn intr() -> Intrinsics<f64> {
        Intrinsics { fx: 100.0, fy: 120.0, cx: 32.0, cy: 24.0 }
    }

    fn pose() -> CameraPose<f64> {
        CameraPose::new(Quat::identity(), Vec3::zeros(), intr())
    }

    fn res() -> Resolution {
        Resolution::new(64, 48)
    }

    fn splat_at(x: f64, y: f64, var: f64) -> Gaussian2D<f64> {
        let cov2d = Mat2::new(var, 0.0, 0.0, var);
        Gaussian2D {
            source_id: 0,
            mean2d: Vec2::new(x, y),
            cov2d,
            inv_cov2d: inverse2(&cov2d).unwrap().0,
            depth: 1.0,
            color: Vec3::new(1.0, 1.0, 1.0),
            opacity: 1.0,
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let g = Gaussian3D::isotropic(3, Vec3::new(0.0, 0.0, 5.0), 0.1, 0.5, Vec3::new(0.1, 0.2, 0.3));
        let s = project_gaussian(&g, &pose(), res(), res(), &ProjectionConfig::default())
            .unwrap()
            .splat()
            .unwrap();
        assert_eq!(s.mean2d, Vec2::new(32.0, 24.0));
        assert_eq!(s.depth, 5.0);
        assert_eq!(s.source_id, 3);
    }

    #[test]
    fn isotropic_covariance_closed_form() {
        // on-axis: J = diag(fx/z, fy/z) on the first two columns, third column zero
        let (s, z) = (0.2, 4.0);
        let g = Gaussian3D::isotropic(0, Vec3::new(0.0, 0.0, z), s, 0.5, Vec3::zeros());
        let sp = project_gaussian(&g, &pose(), res(), res(), &ProjectionConfig::default())
            .unwrap()
            .splat()
            .unwrap();
        let want_x = (100.0 * s / z) * (100.0 * s / z) + 0.3;
        let want_y = (120.0 * s / z) * (120.0 * s / z) + 0.3;
        assert!((sp.cov2d[(0, 0)] - want_x).abs() < 1e-12);
        assert!((sp.cov2d[(1, 1)] - want_y).abs() < 1e-12);
        assert!(sp.cov2d[(0, 1)].abs() < 1e-12);
        let id = sp.cov2d * sp.inv_cov2d;
        assert!((id - Mat2::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let g = Gaussian3D::isotropic(0, Vec3::new(0.0, 0.0, -1.0), 0.2, 0.5, Vec3::zeros());
        let p = project_gaussian(&g, &pose(), res(), res(), &ProjectionConfig::default()).unwrap();
        assert_eq!(p, Projected::Culled);
        let at_near = Gaussian3D::isotropic(0, Vec3::new(0.0, 0.0, 0.01), 0.2, 0.5, Vec3::zeros());
        let p = project_gaussian(&at_near, &pose(), res(), res(), &ProjectionConfig::default()).unwrap();
        assert_eq!(p, Projected::Culled);
    }

    #[test]
    fn non_finite_is_hard_error() {
        let g = Gaussian3D::isotropic(7, Vec3::new(f64::NAN, 0.0, 2.0), 0.2, 0.5, Vec3::zeros());
        let e = project_gaussian(&g, &pose(), res(), res(), &ProjectionConfig::default()).unwrap_err();
        assert_eq!(e, ProjectionError::NonFinite(7));
    }

    #[test]
    fn downsampled_projection_scales_mean() {
        let g = Gaussian3D::isotropic(0, Vec3::new(0.3, -0.2, 3.0), 0.1, 0.5, Vec3::zeros());
        let full = project_gaussian(&g, &pose(), res(), res(), &ProjectionConfig::default()).unwrap().splat().unwrap();
        let quarter = project_gaussian(&g, &pose(), res(), Resolution::new(16, 12), &ProjectionConfig::default())
            .unwrap()
            .splat()
            .unwrap();
        assert!((quarter.mean2d * 4.0 - full.mean2d).abs().max() < 1e-12);
    }

    #[test]
    fn contained_splat_hits_one_tile() {
        let layout = TileLayout::new(res());
        let s = splat_at(20.5, 20.5, 0.3);
        assert_eq!(intersect_tiles(&s, &layout), vec![layout.tiles_x() + 1]);
    }

    #[test]
    fn corner_splat_hits_four_tiles() {
        let layout = TileLayout::new(res());
        // radius 3·sqrt(var) = 1 px around the corner shared by tiles (0,0),(1,0),(0,1),(1,1)
        let s = splat_at(16.0, 16.0, 1.0 / 9.0);
        let mut got = intersect_tiles(&s, &layout);
        got.sort();
        assert_eq!(got, vec![0, 1, 4, 5]);
    }

    #[test]
    fn offscreen_splat_hits_nothing() {
        let layout = TileLayout::new(res());
        assert!(intersect_tiles(&splat_at(-50.0, 10.0, 1.0), &layout).is_empty());
        assert!(intersect_tiles(&splat_at(10.0, 500.0, 1.0), &layout).is_empty());
    }

    #[test]
    fn change_ratio_cases() {
        let layout = TileLayout::new(Resolution::new(160, 160));
        // 100 tiny splats, one per tile
        let mk = |shift: usize| -> Vec<Gaussian2D<f64>> {
            (0..100)
                .map(|i| {
                    let t = if i < 3 { (i + shift) % 100 } else { i };
                    let mut s = splat_at((t % 10) as f64 * 16.0 + 8.0, (t / 10) as f64 * 16.0 + 8.0, 0.3);
                    s.source_id = i as u32;
                    s
                })
                .collect()
        };
        let a = TileBinning::build(&mk(0), &layout);
        assert_eq!(a.total_intersections, 100);
        assert_eq!(intersection_change_ratio(&a, &a), 0.0);
        // three splats move to a different tile: 3 removed + 3 added pairs
        let b = TileBinning::build(&mk(50), &layout);
        assert!((intersection_change_ratio(&a, &b) - 0.06).abs() < 1e-15);
        let empty = TileBinning::default();
        assert_eq!(intersection_change_ratio(&empty, &a), 100.0);
    }
}
