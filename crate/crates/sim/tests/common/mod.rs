#![allow(dead_code)]

use rtgs_core::scene::{Resolution, TileLayout};
use rtgs_core::slam::Stage;
use rtgs_sim::trace::{grad_stream, processing_order, IterationTrace, SubtileTrace, WorkTrace};

/// One iteration whose pixel counts come from `count(subtile, pixel)`. Pixel
/// `p` of every subtile draws ids from a shared per-tile list in depth order,
/// so equal counts mean equal id sequences.
pub fn iteration(res: Resolution, count: impl Fn(usize, usize) -> u32) -> IterationTrace {
    let layout = TileLayout::new(res);
    let subtiles = processing_order(&layout)
        .into_iter()
        .map(|id| {
            let pixels = layout.subtile_pixels(id);
            let mut counts = [0u32; 16];
            let mut fragments = vec![Vec::new(); 16];
            let mut weights = vec![Vec::new(); 16];
            for p in 0..16 {
                if pixels[p].is_some() {
                    counts[p] = count(id, p);
                    fragments[p] = (0..counts[p]).collect();
                    weights[p] = (0..counts[p]).map(|k| 0.25 + (k as f64) * 1e-3 + (p as f64) * 1e-5).collect();
                }
            }
            let grads = grad_stream(&fragments, &weights, |g| g as f64);
            SubtileTrace { id, counts, fragments, grads }
        })
        .collect();
    IterationTrace { stage: Stage::Tracking, gaussians: 0, subtiles }
}

pub fn trace(res: Resolution, iterations: usize, count: impl Fn(usize, usize, usize) -> u32) -> WorkTrace {
    let mut t = WorkTrace::new(0, false, res);
    for i in 0..iterations {
        t.iterations.push(iteration(res, |s, p| count(i, s, p)));
    }
    t
}
