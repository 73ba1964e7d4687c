//! Depth sorting and per-pixel alpha compositing with early termination.
//!
//! Every composited fragment is logged with its alpha, incoming transmittance and
//! color contribution so the backward pass can reuse them instead of recomputing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::math::{Vec2, Vec3};
use crate::projection::{project_scene, Gaussian2D, ProjectionConfig, ProjectionError, TileBinning};
use crate::scalar::Real;
use crate::scene::{CameraPose, ColorImage, DepthImage, FrameState, Gaussian3D, Intrinsics, Resolution, TileLayout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Fragments with alpha at or below this are skipped. 0 composites every fragment.
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Stop compositing once transmittance drops below this. 0 disables early termination.
    pub t_term: f64,
    pub background: [f64; 3],
    pub projection: ProjectionConfig,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.999,
            t_term: 1e-4,
            background: [0.0; 3],
            projection: ProjectionConfig::default(),
        }
    }
}

impl RenderConfig {
    /// Composites every fragment of every covering splat: no skip threshold, no termination.
    pub fn exhaustive() -> Self {
        Self {
            alpha_min: 0.0,
            t_term: 0.0,
            ..Self::default()
        }
    }
}

/// Per-tile splat indices, ascending by (depth, gaussian id).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SortedTileList {
    pub per_tile: Vec<Vec<usize>>,
}

pub fn sort_tile_fragments<T: Real>(binning: &TileBinning, splats: &[Gaussian2D<T>]) -> SortedTileList {
    let per_tile = binning
        .per_tile
        .iter()
        .map(|list| {
            let mut l = list.clone();
            l.sort_by(|&a, &b| {
                splats[a]
                    .depth
                    .partial_cmp(&splats[b].depth)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(splats[a].source_id.cmp(&splats[b].source_id))
            });
            l
        })
        .collect();
    SortedTileList { per_tile }
}

/// Pixel-center coordinate of pixel (x, y).
#[inline]
pub fn pixel_center<T: Real>(x: usize, y: usize) -> Vec2<T> {
    Vec2::new(T::lit(x as f64 + 0.5), T::lit(y as f64 + 0.5))
}

/// Unclamped `o · exp(-½ dᵀ Q d)` and the Gaussian falloff factor.
#[inline]
pub fn alpha_raw<T: Real>(g: &Gaussian2D<T>, pixel: &Vec2<T>) -> (T, T) {
    let d = pixel - g.mean2d;
    let q = &g.inv_cov2d;
    let power = -T::lit(0.5) * (q[(0, 0)] * d.x * d.x + (q[(0, 1)] + q[(1, 0)]) * d.x * d.y + q[(1, 1)] * d.y * d.y);
    let falloff = power.exp();
    (g.opacity * falloff, falloff)
}

/// Alpha of a splat at a pixel, clamped to `alpha_max` (0.999 by default).
pub fn compute_alpha<T: Real>(g: &Gaussian2D<T>, pixel: &Vec2<T>) -> T {
    alpha_raw(g, pixel).0.min(T::lit(RenderConfig::default().alpha_max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry<T> {
    /// Index into the frame's splat list.
    pub splat: usize,
    pub gaussian_id: u32,
    pub alpha: T,
    /// Transmittance before this fragment.
    pub transmittance: T,
    /// `T · α · C`.
    pub contribution: [T; 3],
    /// Alpha hit the upper clamp, so it carries no gradient.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PixelLog<T> {
    pub entries: Vec<LogEntry<T>>,
    pub t_final: T,
    /// `Σ T·α` over the log; equals `1 - t_final` without the cancellation.
    pub coverage: T,
}

impl<T> PixelLog<T> {
    pub fn n_contrib(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelResult<T> {
    pub color: [T; 3],
    pub depth: T,
    pub log: PixelLog<T>,
}

/// Composites depth-ordered fragments at one pixel. `fragments` yields (splat index, splat).
pub fn render_pixel<'a, T: Real, I>(pixel: Vec2<T>, fragments: I, background: [T; 3], cfg: &RenderConfig) -> PixelResult<T>
where
    I: IntoIterator<Item = (usize, &'a Gaussian2D<T>)>,
{
    let alpha_min = T::lit(cfg.alpha_min);
    let alpha_max = T::lit(cfg.alpha_max);
    let t_term = T::lit(cfg.t_term);
    let mut t = T::one();
    let mut color = [T::zero(); 3];
    let mut depth = T::zero();
    let mut coverage = T::zero();
    let mut entries = Vec::new();
    for (idx, g) in fragments {
        let (raw, _) = alpha_raw(g, &pixel);
        if !(raw > alpha_min) {
            continue;
        }
        let clamped = raw > alpha_max;
        let alpha = if clamped { alpha_max } else { raw };
        let w = t * alpha;
        let contribution = [w * g.color.x, w * g.color.y, w * g.color.z];
        for c in 0..3 {
            color[c] += contribution[c];
        }
        depth += w * g.depth;
        coverage += w;
        entries.push(LogEntry {
            splat: idx,
            gaussian_id: g.source_id,
            alpha,
            transmittance: t,
            contribution,
            clamped,
        });
        t *= T::one() - alpha;
        if t < t_term {
            break;
        }
    }
    for c in 0..3 {
        color[c] += background[c] * t;
    }
    let depth = if coverage > T::lit(1e-6) { depth / coverage } else { T::zero() };
    PixelResult {
        color,
        depth,
        log: PixelLog { entries, t_final: t, coverage },
    }
}

/// Forward outputs of one frame plus everything the backward pass reuses.
#[derive(Debug, Clone)]
pub struct RenderRecord<T> {
    pub resolution: Resolution,
    pub layout: TileLayout,
    pub intrinsics: Intrinsics<T>,
    pub pose: CameraPose<T>,
    pub color: ColorImage<T>,
    pub depth: DepthImage<T>,
    /// Row-major per-pixel compositing logs.
    pub logs: Vec<PixelLog<T>>,
    pub splats: Vec<Gaussian2D<T>>,
    /// Scene index of each splat.
    pub scene_index: Vec<usize>,
    pub binning: TileBinning,
    pub sorted: SortedTileList,
    pub config: RenderConfig,
}

impl<T: Real> RenderRecord<T> {
    pub fn log(&self, x: usize, y: usize) -> &PixelLog<T> {
        &self.logs[y * self.resolution.width + x]
    }

    /// Total composited fragments across the frame.
    pub fn fragment_count(&self) -> usize {
        self.logs.iter().map(PixelLog::n_contrib).sum()
    }
}

/// Renders `gaussians` (masked ones skipped) from `pose` at `res`, with `k` given at `res`.
pub fn render_view<T: Real>(
    gaussians: &[Gaussian3D<T>],
    pose: &CameraPose<T>,
    k: Intrinsics<T>,
    res: Resolution,
    cfg: &RenderConfig,
) -> Result<RenderRecord<T>, ProjectionError> {
    let layout = TileLayout::new(res);
    let (scene_index, splats) = project_scene(gaussians, pose, &k, &cfg.projection, false)?;
    let binning = TileBinning::build(&splats, &layout);
    let sorted = sort_tile_fragments(&binning, &splats);
    let background = cfg.background.map(T::lit);

    let tiles: Vec<Vec<(usize, PixelResult<T>)>> = (0..layout.num_tiles())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = layout.tile_rect(tile);
            let order = &sorted.per_tile[tile];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let frags = order.iter().map(|&i| (i, &splats[i]));
                    out.push((y * res.width + x, render_pixel(pixel_center(x, y), frags, background, cfg)));
                }
            }
            out
        })
        .collect();

    let n = res.pixels();
    let mut color = ColorImage::filled(res.width, res.height, [T::zero(); 3]);
    let mut depth = DepthImage::filled(res.width, res.height, T::zero());
    let mut logs = vec![PixelLog::default(); n];
    for tile in tiles {
        for (p, r) in tile {
            color.data[p] = r.color;
            depth.data[p] = r.depth;
            logs[p] = r.log;
        }
    }
    Ok(RenderRecord {
        resolution: res,
        layout,
        intrinsics: k,
        pose: *pose,
        color,
        depth,
        logs,
        splats,
        scene_index,
        binning,
        sorted,
        config: *cfg,
    })
}

/// Renders the scene for a frame at the frame's processing resolution.
pub fn render_frame<T: Real>(
    gaussians: &[Gaussian3D<T>],
    frame: &FrameState<T>,
    cfg: &RenderConfig,
) -> Result<RenderRecord<T>, ProjectionError> {
    render_view(gaussians, &frame.pose, frame.intrinsics(), frame.resolution, cfg)
}

/// Color vector helper for tests and callers that work with `Vec3` colors.
pub fn rgb<T: Real>(c: [T; 3]) -> Vec3<T> {
    Vec3::new(c[0], c[1], c[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{inverse2, Mat2};

    fn splat(id: u32, depth: f64, opacity: f64, color: [f64; 3]) -> Gaussian2D<f64> {
        let cov2d = Mat2::new(4.0, 0.0, 0.0, 4.0);
        Gaussian2D {
            source_id: id,
            mean2d: Vec2::new(0.0, 0.0),
            cov2d,
            inv_cov2d: inverse2(&cov2d).unwrap().0,
            depth,
            color: Vec3::new(color[0], color[1], color[2]),
            opacity,
        }
    }

    #[test]
    fn sort_by_depth_then_id() {
        let splats = vec![splat(10, 3.0, 0.5, [0.0; 3]), splat(11, 1.0, 0.5, [0.0; 3]), splat(12, 2.0, 0.5, [0.0; 3])];
        let b = TileBinning {
            per_tile: vec![vec![0, 1, 2]],
            per_gaussian: vec![vec![0]; 3],
            source_ids: vec![10, 11, 12],
            total_intersections: 3,
        };
        assert_eq!(sort_tile_fragments(&b, &splats).per_tile[0], vec![1, 2, 0]);
        let tie = vec![splat(9, 1.0, 0.5, [0.0; 3]), splat(2, 1.0, 0.5, [0.0; 3])];
        let b = TileBinning {
            per_tile: vec![vec![0, 1]],
            per_gaussian: vec![vec![0]; 2],
            source_ids: vec![9, 2],
            total_intersections: 2,
        };
        assert_eq!(sort_tile_fragments(&b, &tie).per_tile[0], vec![1, 0]);
    }

    #[test]
    fn alpha_cases() {
        let mut g = splat(0, 1.0, 0.7, [1.0; 3]);
        assert_eq!(compute_alpha(&g, &Vec2::new(0.0, 0.0)), 0.7);
        g.opacity = 0.0;
        assert_eq!(compute_alpha(&g, &Vec2::new(1.0, 2.0)), 0.0);
        let cov = Mat2::identity();
        let unit = Gaussian2D {
            inv_cov2d: cov,
            cov2d: cov,
            opacity: 1.0,
            ..splat(0, 1.0, 1.0, [1.0; 3])
        };
        assert!((compute_alpha(&unit, &Vec2::new(1.0, 0.0)) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(compute_alpha(&unit, &Vec2::new(0.0, 0.0)), 0.999);
    }

    #[test]
    fn empty_pixel_is_background() {
        let r = render_pixel::<f64, _>(Vec2::zeros(), std::iter::empty(), [0.2, 0.3, 0.4], &RenderConfig::default());
        assert_eq!(r.color, [0.2, 0.3, 0.4]);
        assert_eq!(r.depth, 0.0);
        assert!(r.log.entries.is_empty());
        assert_eq!(r.log.t_final, 1.0);
    }

    #[test]
    fn single_opaque_splat() {
        let s = splat(0, 2.0, 0.999, [0.8, 0.4, 0.2]);
        let bg = [1.0, 1.0, 1.0];
        let r = render_pixel(Vec2::zeros(), [(0usize, &s)], bg, &RenderConfig::default());
        for c in 0..3 {
            let want = 0.999 * [0.8, 0.4, 0.2][c] + 0.001 * bg[c];
            assert!((r.color[c] - want).abs() < 1e-12);
        }
        assert!((r.depth - 2.0).abs() < 1e-12);
        assert_eq!(r.log.n_contrib(), 1);
    }

    #[test]
    fn early_termination_stops_compositing() {
        let splats: Vec<_> = (0..10).map(|i| splat(i, i as f64 + 1.0, 0.99, [1.0; 3])).collect();
        let r = render_pixel(Vec2::zeros(), splats.iter().enumerate(), [0.0; 3], &RenderConfig::default());
        // 0.01^2 = 1e-4 is not below the threshold, 0.01^3 is
        assert_eq!(r.log.n_contrib(), 3);
        let all = render_pixel(Vec2::zeros(), splats.iter().enumerate(), [0.0; 3], &RenderConfig::exhaustive());
        assert_eq!(all.log.n_contrib(), 10);
    }
}
