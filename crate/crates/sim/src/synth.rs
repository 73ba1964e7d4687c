use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Zipf};
use rtgs_core::scene::{Resolution, TileLayout, SUBTILES_PER_TILE_SIDE};
use rtgs_core::slam::Stage;
use serde::{Deserialize, Serialize};

use crate::trace::{grad_stream, processing_order, IterationTrace, SubtileTrace, WorkTrace};
use crate::SUBTILE_PIXELS;

/// Parameters of a skewed synthetic workload.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthTraceSpec {
    pub width: usize,
    pub height: usize,
    pub iterations: usize,
    pub mean_fragments: f64,
    /// Exponent of the per-pixel Zipf weights; larger is more skewed.
    pub zipf_exponent: f64,
    /// Log-normal sigma of per-subtile load.
    pub subtile_sigma: f64,
    /// Hot Gaussians shared by all subtiles of a tile.
    pub hot_gaussians: usize,
    /// Share of each pixel's fragments drawn from the hot pool; at 1.0 pixels hold at most `hot_gaussians` fragments.
    pub hot_fraction: f64,
    /// Relative per-iteration perturbation of pixel counts.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthTraceSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            iterations: 4,
            mean_fragments: 40.0,
            zipf_exponent: 1.1,
            subtile_sigma: 0.5,
            hot_gaussians: 32,
            hot_fraction: 0.5,
            jitter: 0.1,
            seed: 1,
        }
    }
}

/// Deterministic trace with Zipf-distributed per-pixel fragment counts.
pub fn zipf_trace(spec: &SynthTraceSpec) -> WorkTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = TileLayout::new(Resolution::new(spec.width, spec.height));
    let order = processing_order(&layout);
    let zipf = Zipf::new(64.0, spec.zipf_exponent.max(1e-3)).expect("valid zipf");
    let lognormal = LogNormal::new(0.0, spec.subtile_sigma.max(0.0)).expect("valid lognormal");

    let mut raw = vec![[0.0f64; SUBTILE_PIXELS]; layout.num_subtiles()];
    let mut sum = 0.0;
    let mut n = 0usize;
    for &id in &order {
        let load: f64 = lognormal.sample(&mut rng);
        for (p, px) in layout.subtile_pixels(id).iter().enumerate() {
            if px.is_some() {
                raw[id][p] = load * zipf.sample(&mut rng);
                sum += raw[id][p];
                n += 1;
            }
        }
    }
    let scale = if sum > 0.0 { spec.mean_fragments * n as f64 / sum } else { 0.0 };

    let hot = spec.hot_gaussians as u32;
    let mut next_cold = layout.num_tiles() as u32 * hot;
    let mut trace = WorkTrace::new(0, false, Resolution::new(spec.width, spec.height));
    for _ in 0..spec.iterations {
        let mut subtiles = Vec::with_capacity(order.len());
        for &id in &order {
            let (sx, sy) = (id % layout.subtiles_x(), id / layout.subtiles_x());
            let tile = (sy / SUBTILES_PER_TILE_SIDE) * layout.tiles_x() + sx / SUBTILES_PER_TILE_SIDE;
            let pool: Vec<u32> = {
                let base = tile as u32 * hot;
                (base..base + hot).collect()
            };
            let mut counts = [0u32; SUBTILE_PIXELS];
            let mut fragments = vec![Vec::new(); SUBTILE_PIXELS];
            let mut weights = vec![Vec::new(); SUBTILE_PIXELS];
            let mut depth: BTreeMap<u32, f64> = BTreeMap::new();
            for p in 0..SUBTILE_PIXELS {
                if raw[id][p] == 0.0 {
                    continue;
                }
                let wobble = 1.0 + spec.jitter * rng.random_range(-1.0..=1.0);
                let count = (raw[id][p] * scale * wobble).round().max(0.0) as usize;
                let n_hot = ((count as f64 * spec.hot_fraction).round() as usize).min(pool.len());
                // Hot ids are numbered in the tile's depth order; cold ones fall at random depths.
                let mut keyed: Vec<(f64, u32)> = pool
                    .choose_multiple(&mut rng, n_hot)
                    .map(|&id| ((id % hot.max(1)) as f64, id))
                    .collect();
                // Hot-only pixels never leave the pool, so their depth is capped at its size.
                let total = if spec.hot_fraction >= 1.0 { n_hot } else { count };
                for _ in n_hot..total {
                    keyed.push((rng.random_range(0.0..hot.max(1) as f64), next_cold));
                    next_cold += 1;
                }
                keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                depth.extend(keyed.iter().map(|&(d, id)| (id, d)));
                let ids: Vec<u32> = keyed.into_iter().map(|(_, id)| id).collect();
                weights[p] = ids.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
                counts[p] = ids.len() as u32;
                fragments[p] = ids;
            }
            let grads = grad_stream(&fragments, &weights, |g| depth[&g]);
            subtiles.push(SubtileTrace { id, counts, fragments, grads });
        }
        let mut distinct: Vec<u32> = subtiles.iter().flat_map(|s| s.grads.iter().map(|g| g.id)).collect();
        distinct.sort_unstable();
        distinct.dedup();
        trace.iterations.push(IterationTrace { stage: Stage::Tracking, gaussians: distinct.len(), subtiles });
    }
    trace
}

/// The standard skewed suite: five seeds across skew levels at about 40 fragments per pixel.
pub fn standard_suite() -> Vec<WorkTrace> {
    [(1, 0.9), (2, 1.1), (3, 1.3), (4, 1.1), (5, 1.5)]
        .into_iter()
        .map(|(seed, s)| zipf_trace(&SynthTraceSpec { zipf_exponent: s, seed, ..SynthTraceSpec::default() }))
        .collect()
}

/// Suite with every pixel's fragments drawn from the tile's hot pool of `hot` Gaussians.
pub fn clustered_suite(hot: usize) -> Vec<WorkTrace> {
    (1..=3)
        .map(|seed| {
            zipf_trace(&SynthTraceSpec {
                mean_fragments: 12.0,
                hot_gaussians: hot,
                hot_fraction: 1.0,
                seed,
                ..SynthTraceSpec::default()
            })
        })
        .collect()
}

/// Dense variant of the standard suite, about 120 fragments per pixel.
pub fn dense_suite() -> Vec<WorkTrace> {
    [(11, 1.1), (12, 1.4)]
        .into_iter()
        .map(|(seed, s)| {
            zipf_trace(&SynthTraceSpec { mean_fragments: 120.0, zipf_exponent: s, seed, iterations: 2, ..SynthTraceSpec::default() })
        })
        .collect()
}
