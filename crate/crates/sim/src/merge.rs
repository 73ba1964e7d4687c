use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::render::Schedule;
use crate::trace::{GradEntry, IterationTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeMode {
    Gmu,
    Atomic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeResult {
    pub cycles: u64,
    /// Cycles in which adds were issued or stalled, excluding pipeline fill.
    pub issue_cycles: u64,
    pub fill_cycles: u64,
    pub stage_buffer_stalls: u64,
    /// Merged gradient per Gaussian id.
    pub merged: BTreeMap<u32, f64>,
}

/// Gradients one RE emits in one cycle: every pixel-level entry for one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step<'a> {
    pub id: u32,
    pub entries: &'a [GradEntry],
}

/// Splits a subtile's stream into maximal runs of one id.
pub fn steps(stream: &[GradEntry]) -> Vec<Step<'_>> {
    stream
        .chunk_by(|a, b| a.id == b.id)
        .map(|entries| Step { id: entries[0].id, entries })
        .collect()
}

/// Per-RE step streams: each RE emits the streams of the subtiles it ran in the
/// backward pass, in start order.
pub fn lane_streams<'a>(it: &'a IterationTrace, bp: &Schedule, num_res: usize) -> Vec<Vec<Step<'a>>> {
    let mut per_re: Vec<Vec<(u64, usize)>> = vec![Vec::new(); num_res];
    for (i, &(re, start)) in bp.placement.iter().enumerate() {
        per_re[re].push((start, i));
    }
    per_re
        .into_iter()
        .map(|mut v| {
            v.sort_unstable();
            v.into_iter().flat_map(|(_, i)| steps(&it.subtiles[i].grads)).collect()
        })
        .collect()
}

/// Sums every contribution per id in (lane, position) order. Both merge modes
/// commit through this order, so their results are bit-identical.
pub fn ordered_sum(streams: &[Vec<Step<'_>>]) -> BTreeMap<u32, f64> {
    let mut ids: Vec<u32> = streams.iter().flatten().map(|st| st.id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut sums = vec![0.0f64; ids.len()];
    for lane in streams {
        for step in lane {
            let i = ids.binary_search(&step.id).expect("id collected");
            for g in step.entries {
                sums[i] += g.value;
            }
        }
    }
    ids.into_iter().zip(sums).collect()
}

pub fn simulate_gradient_merge(streams: &[Vec<Step<'_>>], mode: MergeMode, cfg: &SimConfig) -> MergeResult {
    match mode {
        MergeMode::Atomic => atomic(streams, cfg),
        MergeMode::Gmu => gmu(streams, cfg),
    }
}

/// Every add is an atomic read-modify-write: per cycle at most
/// `atomic_commits_per_cycle` adds commit per id, granted to the lowest lane
/// first, and a lane moves to its next step once all its adds are in.
fn atomic(streams: &[Vec<Step<'_>>], cfg: &SimConfig) -> MergeResult {
    let mut pos = vec![0usize; streams.len()];
    let mut left: Vec<usize> = streams.iter().map(|s| s.first().map_or(0, |st| st.entries.len())).collect();
    let mut active = streams.iter().filter(|s| !s.is_empty()).count();
    let mut cycles = 0u64;
    let mut granted: Vec<(u32, u64)> = Vec::with_capacity(streams.len());
    while active > 0 {
        cycles += 1;
        granted.clear();
        for (lane, s) in streams.iter().enumerate() {
            let Some(step) = s.get(pos[lane]) else { continue };
            let budget = match granted.iter_mut().find(|(id, _)| *id == step.id) {
                Some((_, used)) => {
                    let b = cfg.latency.atomic_commits_per_cycle.saturating_sub(*used);
                    *used += b;
                    b
                }
                None => {
                    granted.push((step.id, cfg.latency.atomic_commits_per_cycle));
                    cfg.latency.atomic_commits_per_cycle
                }
            };
            let n = (budget as usize).min(left[lane]);
            left[lane] -= n;
            if left[lane] == 0 {
                pos[lane] += 1;
                match s.get(pos[lane]) {
                    Some(next) => left[lane] = next.entries.len(),
                    None => active -= 1,
                }
            }
        }
    }
    MergeResult {
        cycles,
        issue_cycles: cycles,
        fill_cycles: 0,
        stage_buffer_stalls: 0,
        merged: ordered_sum(streams),
    }
}

/// Every lane retires one step per cycle: the permutation stage clusters equal
/// ids inside each group, the group trees and the cross-group combine reduce
/// each cluster to one partial, and the Stage Buffer accumulates partials by
/// id. A new id needing a slot in a full buffer evicts the live entry used
/// furthest in the future; that costs a writeback stall unless its next use
/// lies beyond the lookahead window. Entries free themselves once their id is
/// exhausted.
fn gmu(streams: &[Vec<Step<'_>>], cfg: &SimConfig) -> MergeResult {
    let batches = streams.iter().map(Vec::len).max().unwrap_or(0);
    let mut all: Vec<u32> = streams.iter().flatten().map(|st| st.id).collect();
    all.sort_unstable();
    all.dedup();
    let dense = |id: u32| all.binary_search(&id).expect("id collected");

    let mut uses: Vec<Vec<usize>> = vec![Vec::new(); all.len()];
    let mut batch_ids: Vec<Vec<usize>> = Vec::with_capacity(batches);
    for b in 0..batches {
        let mut ids: Vec<usize> = streams.iter().filter_map(|s| s.get(b).map(|st| dense(st.id))).collect();
        ids.sort_unstable();
        ids.dedup();
        for &i in &ids {
            uses[i].push(b);
        }
        batch_ids.push(ids);
    }
    let mut next = vec![0usize; all.len()];
    // Live entries as a slot list plus each id's position in it.
    let mut live: Vec<usize> = Vec::new();
    let mut slot: Vec<Option<usize>> = vec![None; all.len()];
    let capacity = cfg.stage_buffer_capacity.max(cfg.num_res);
    let mut stalls = 0u64;
    let remove = |live: &mut Vec<usize>, slot: &mut Vec<Option<usize>>, i: usize| {
        let at = slot[i].take().expect("live id");
        live.swap_remove(at);
        if let Some(&moved) = live.get(at) {
            slot[moved] = Some(at);
        }
    };
    for (b, ids) in batch_ids.iter().enumerate() {
        for &i in ids {
            if slot[i].is_some() {
                continue;
            }
            if live.len() >= capacity {
                let (victim, next_use) = live
                    .iter()
                    .filter(|v| ids.binary_search(v).is_err())
                    .map(|&v| (v, uses[v][next[v]]))
                    .max_by_key(|&(v, n)| (n, all[v]))
                    .expect("capacity exceeds the lanes in one batch");
                if next_use - b <= cfg.eviction_lookahead {
                    stalls += cfg.latency.stage_buffer_writeback;
                }
                remove(&mut live, &mut slot, victim);
            }
            slot[i] = Some(live.len());
            live.push(i);
        }
        for &i in ids {
            next[i] += 1;
            if next[i] == uses[i].len() {
                remove(&mut live, &mut slot, i);
            }
        }
    }
    let fill = if batches == 0 {
        0
    } else {
        1 + (cfg.group_tree_depth() + cfg.combine_depth()) * cfg.latency.gmu_adder_stage
    };
    MergeResult {
        cycles: batches as u64 + stalls + fill,
        issue_cycles: batches as u64 + stalls,
        fill_cycles: fill,
        stage_buffer_stalls: stalls,
        merged: ordered_sum(streams),
    }
}

/// Preprocessing backpropagation on the PE array: one Gaussian per PE per cycle
/// through a pipelined PBC, plus the pose Merging Tree when tracking.
pub fn preprocess_cycles(gaussians: usize, tracking: bool, cfg: &SimConfig) -> u64 {
    if gaussians == 0 {
        return 0;
    }
    let waves = gaussians.div_ceil(cfg.num_pes) as u64;
    let tree = if tracking { crate::config::ceil_log2(cfg.num_pes) * cfg.latency.merge_tree_stage } else { 0 };
    waves - 1 + cfg.latency.pbc + tree
}
