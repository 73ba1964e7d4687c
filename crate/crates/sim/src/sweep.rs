use serde::{Deserialize, Serialize};

use crate::config::{SimConfig, Toggles};
use crate::report::simulate_trace;
use crate::trace::WorkTrace;
use crate::SimError;

/// Cycle totals of one toggle combination summed over a trace set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub streaming: bool,
    pub pairing: bool,
    pub reuse_rb: bool,
    pub gmu: bool,
    pub render_cycles: u64,
    pub render_bp_cycles: u64,
    pub merge_cycles: u64,
    pub preprocess_bp_cycles: u64,
    pub total_cycles: u64,
    /// Relative to all toggles off.
    pub speedup: f64,
}

impl SweepRow {
    pub fn toggles(&self) -> Toggles {
        Toggles { streaming: self.streaming, pairing: self.pairing, reuse_rb: self.reuse_rb, gmu: self.gmu }
    }
}

/// All 16 toggle combinations, in bit order, over `traces`.
pub fn sweep(traces: &[WorkTrace], base: &SimConfig) -> Result<Vec<SweepRow>, SimError> {
    let mut rows = Vec::with_capacity(16);
    for t in Toggles::all_combinations() {
        let cfg = base.with_toggles(t);
        let mut row = SweepRow {
            streaming: t.streaming,
            pairing: t.pairing,
            reuse_rb: t.reuse_rb,
            gmu: t.gmu,
            render_cycles: 0,
            render_bp_cycles: 0,
            merge_cycles: 0,
            preprocess_bp_cycles: 0,
            total_cycles: 0,
            speedup: 1.0,
        };
        for trace in traces {
            let r = simulate_trace(trace, &cfg)?.report;
            row.render_cycles += r.render_cycles;
            row.render_bp_cycles += r.render_bp_cycles;
            row.merge_cycles += r.merge_cycles;
            row.preprocess_bp_cycles += r.preprocess_bp_cycles;
            row.total_cycles += r.total_cycles;
        }
        rows.push(row);
    }
    let none = rows[0].total_cycles.max(1) as f64;
    for r in rows.iter_mut() {
        r.speedup = none / r.total_cycles.max(1) as f64;
    }
    Ok(rows)
}

/// Pairs `(a, b)` where `b` adds one toggle to `a` yet costs more cycles.
pub fn chain_violations(rows: &[SweepRow]) -> Vec<(Toggles, Toggles)> {
    let mut out = Vec::new();
    for a in rows {
        for b in rows {
            let (ta, tb) = (a.toggles().to_bits(), b.toggles().to_bits());
            if ta & tb == ta && (tb ^ ta).count_ones() == 1 && b.total_cycles > a.total_cycles {
                out.push((a.toggles(), b.toggles()));
            }
        }
    }
    out
}
