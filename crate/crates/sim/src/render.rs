use std::collections::BTreeMap;

use rtgs_core::scene::TileLayout;
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::trace::{IterationTrace, SubtileTrace};
use crate::{SimError, SUBTILE_PIXELS};

/// Eight pixel pairs, one per lane, covering a subtile.
pub type Pairs = [(u8, u8); 8];

/// Static pairing of neighbouring pixels.
pub const ADJACENT_PAIRS: Pairs = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9), (10, 11), (12, 13), (14, 15)];

/// Per-subtile pairing table filled from the previous iteration's completion
/// orders. Subtiles without an entry fall back to [`ADJACENT_PAIRS`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    table: BTreeMap<usize, Pairs>,
}

impl PairConfig {
    pub fn get(&self, subtile: usize) -> Option<&Pairs> {
        self.table.get(&subtile)
    }

    pub fn is_valid(&self, subtile: usize) -> bool {
        self.table.contains_key(&subtile)
    }

    pub fn set(&mut self, subtile: usize, pairs: Pairs) {
        debug_assert!(covers_subtile(&pairs));
        self.table.insert(subtile, pairs);
    }

    pub fn clear(&mut self) {
        self.table.clear();
    }

    pub fn pairs_for(&self, subtile: usize) -> Pairs {
        self.get(subtile).copied().unwrap_or(ADJACENT_PAIRS)
    }

    /// Refreshes every subtile from its latest completion order.
    pub fn update(&mut self, orders: &[(usize, CompletionOrder)]) {
        for (id, order) in orders {
            self.set(*id, update_pair_config(order));
        }
    }
}

/// Pixels of a subtile sorted by completion, earliest first.
pub type CompletionOrder = [u8; SUBTILE_PIXELS];

/// The first eight completers go through a FIFO, the last eight through a LIFO;
/// popping both at once pairs the lightest pixel with the heaviest.
pub fn update_pair_config(order: &CompletionOrder) -> Pairs {
    let fifo = &order[..8];
    let mut lifo: Vec<u8> = order[8..].to_vec();
    let mut out = [(0, 0); 8];
    for (slot, &light) in out.iter_mut().zip(fifo) {
        *slot = (light, lifo.pop().expect("eight heavy pixels"));
    }
    out
}

/// Every pixel appears in exactly one pair.
pub fn covers_subtile(pairs: &Pairs) -> bool {
    let mut seen = [false; SUBTILE_PIXELS];
    for &(a, b) in pairs {
        for p in [a, b] {
            match seen.get_mut(p as usize) {
                Some(s) if !*s => *s = true,
                _ => return false,
            }
        }
    }
    true
}

/// Issue-completion cycles of the two pixels on one lane. With shared slots the
/// lane issues two fragments per cycle and hands both slots to whichever pixel
/// is left; otherwise each pixel owns one slot.
pub fn lane_completion(a: u64, b: u64, shared: bool) -> (u64, u64) {
    if !shared || a == b {
        return (a, b);
    }
    let lo = a.min(b);
    let hi = lo + (a.max(b) - lo).div_ceil(2);
    if a < b {
        (lo, hi)
    } else {
        (hi, lo)
    }
}

/// Render timing of one subtile.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtileTiming {
    pub cycles: u64,
    pub order: CompletionOrder,
    pub issued: u64,
}

pub fn render_subtile(st: &SubtileTrace, pairs: &Pairs, shared: bool, cfg: &SimConfig) -> SubtileTiming {
    let mut done = [0u64; SUBTILE_PIXELS];
    let mut issued = 0;
    for &(a, b) in pairs {
        let (ca, cb) = (st.counts[a as usize] as u64, st.counts[b as usize] as u64);
        let (ta, tb) = lane_completion(ca, cb, shared);
        done[a as usize] = ta;
        done[b as usize] = tb;
        issued += ca + cb;
    }
    let mut order: CompletionOrder = std::array::from_fn(|i| i as u8);
    order.sort_by_key(|&p| (done[p as usize], p));
    let last = done.iter().copied().max().unwrap_or(0);
    let cycles = if issued == 0 { 0 } else { last + cfg.latency.alpha_compute + cfg.latency.alpha_blend };
    SubtileTiming { cycles, order, issued }
}

/// Assignment of subtiles (in processing order) to REs.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub makespan: u64,
    pub busy: Vec<u64>,
    /// RE and start cycle per subtile.
    pub placement: Vec<(usize, u64)>,
}

/// With streaming each RE takes the next subtile the moment it is free (lowest
/// index wins ties); without it REs run in lockstep waves of `num_res` subtiles.
pub fn schedule(times: &[u64], num_res: usize, streaming: bool) -> Schedule {
    let mut busy = vec![0u64; num_res];
    let mut placement = Vec::with_capacity(times.len());
    let makespan = if streaming {
        let mut free = vec![0u64; num_res];
        for &t in times {
            let (re, start) = free.iter().copied().enumerate().min_by_key(|&(i, f)| (f, i)).expect("at least one RE");
            free[re] = start + t;
            busy[re] += t;
            placement.push((re, start));
        }
        free.into_iter().max().unwrap_or(0)
    } else {
        let mut wave_start = 0;
        for wave in times.chunks(num_res) {
            for (re, &t) in wave.iter().enumerate() {
                busy[re] += t;
                placement.push((re, wave_start));
            }
            wave_start += wave.iter().copied().max().unwrap_or(0);
        }
        wave_start
    };
    Schedule { makespan, busy, placement }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderPhase {
    pub schedule: Schedule,
    pub orders: Vec<(usize, CompletionOrder)>,
    pub issued: u64,
}

/// Forward rendering of one iteration on the RE array.
pub fn simulate_render_phase(
    it: &IterationTrace,
    layout: &TileLayout,
    pairs: &PairConfig,
    cfg: &SimConfig,
) -> Result<RenderPhase, SimError> {
    check_layout(it, layout)?;
    let shared = cfg.toggles.pairing;
    let mut times = Vec::with_capacity(it.subtiles.len());
    let mut orders = Vec::with_capacity(it.subtiles.len());
    let mut issued = 0;
    for st in &it.subtiles {
        let p = if shared { pairs.pairs_for(st.id) } else { ADJACENT_PAIRS };
        let t = render_subtile(st, &p, shared, cfg);
        times.push(t.cycles);
        orders.push((st.id, t.order));
        issued += t.issued;
    }
    Ok(RenderPhase { schedule: schedule(&times, cfg.num_res, cfg.toggles.streaming), orders, issued })
}

pub(crate) fn check_layout(it: &IterationTrace, layout: &TileLayout) -> Result<(), SimError> {
    if it.subtiles.len() != layout.num_subtiles() {
        return Err(SimError::Mismatch(format!(
            "iteration has {} subtiles, layout has {}",
            it.subtiles.len(),
            layout.num_subtiles()
        )));
    }
    if let Some(st) = it.subtiles.iter().find(|s| s.id >= layout.num_subtiles()) {
        return Err(SimError::Mismatch(format!("subtile {} outside the layout", st.id)));
    }
    Ok(())
}

/// Backward timing of one lane: the pair shares one alpha-gradient unit, then
/// each pixel owns parallel covariance and position units. Every unit takes its
/// full latency per fragment.
pub fn bp_lane_cycles(a: u64, b: u64, reuse_rb: bool, cfg: &SimConfig) -> u64 {
    let alpha = if reuse_rb { cfg.latency.bp_alpha_grad_reused } else { cfg.latency.bp_alpha_grad_baseline };
    let tail = cfg.latency.bp_cov_pos_grad;
    let mut alpha_free = 0u64;
    let mut pixel_free = [0u64; 2];
    let mut left = [a, b];
    let mut turn = 0;
    while left[0] + left[1] > 0 {
        if left[turn] == 0 {
            turn ^= 1;
        }
        alpha_free += alpha;
        pixel_free[turn] = alpha_free.max(pixel_free[turn]) + tail;
        left[turn] -= 1;
        turn ^= 1;
    }
    pixel_free[0].max(pixel_free[1])
}

pub fn bp_subtile(st: &SubtileTrace, pairs: &Pairs, reuse_rb: bool, cfg: &SimConfig) -> u64 {
    pairs
        .iter()
        .map(|&(a, b)| bp_lane_cycles(st.counts[a as usize] as u64, st.counts[b as usize] as u64, reuse_rb, cfg))
        .max()
        .unwrap_or(0)
}

/// Rendering backpropagation of one iteration; uses the same pairing as the forward pass.
pub fn simulate_bp_phase(
    it: &IterationTrace,
    layout: &TileLayout,
    pairs: &PairConfig,
    cfg: &SimConfig,
) -> Result<Schedule, SimError> {
    check_layout(it, layout)?;
    let times: Vec<u64> = it
        .subtiles
        .iter()
        .map(|st| {
            let p = if cfg.toggles.pairing { pairs.pairs_for(st.id) } else { ADJACENT_PAIRS };
            bp_subtile(st, &p, cfg.toggles.reuse_rb, cfg)
        })
        .collect();
    Ok(schedule(&times, cfg.num_res, cfg.toggles.streaming))
}
