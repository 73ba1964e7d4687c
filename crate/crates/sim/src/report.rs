use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{SimConfig, Toggles};
use crate::merge::{lane_streams, preprocess_cycles, simulate_gradient_merge, MergeMode};
use crate::render::{simulate_bp_phase, simulate_render_phase, PairConfig};
use crate::trace::WorkTrace;
use crate::SimError;
use rtgs_core::slam::Stage;

/// Speedup from enabling one toggle, all others as configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToggleSpeedup {
    pub toggle: String,
    pub cycles_without: u64,
    pub cycles_with: u64,
    pub speedup: f64,
}

/// Cycle accounting for one traced frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub config: SimConfig,
    pub frame_id: usize,
    pub is_keyframe: bool,
    pub iterations: usize,
    pub render_cycles: u64,
    pub render_bp_cycles: u64,
    pub merge_cycles: u64,
    pub preprocess_bp_cycles: u64,
    pub total_cycles: u64,
    /// Per RE over the render and render-BP phases.
    pub re_busy: Vec<u64>,
    pub re_idle: Vec<u64>,
    /// `(max - mean) / mean` of `re_busy`.
    pub imbalance: f64,
    pub gmu_merge_cycles: u64,
    pub atomic_merge_cycles: u64,
    pub stage_buffer_stalls: u64,
    pub fragment_issues: u64,
    /// Filled by [`with_speedups`]; empty otherwise.
    pub speedups: Vec<ToggleSpeedup>,
}

/// Report plus the merged gradients of every iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRun {
    pub report: CycleReport,
    pub merged: Vec<BTreeMap<u32, f64>>,
    pub gmu_merged: Vec<BTreeMap<u32, f64>>,
    pub atomic_merged: Vec<BTreeMap<u32, f64>>,
}

pub fn imbalance(busy: &[u64]) -> f64 {
    if busy.is_empty() {
        return 0.0;
    }
    let mean = busy.iter().sum::<u64>() as f64 / busy.len() as f64;
    let max = busy.iter().copied().max().unwrap_or(0) as f64;
    if mean > 0.0 {
        (max - mean) / mean
    } else {
        0.0
    }
}

/// Where pairs come from when pairing is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairPolicy {
    /// WSU: refreshed from each iteration's completion orders.
    Adaptive,
    /// Adjacent pairs throughout, with shared issue slots.
    Adjacent,
}

/// Runs every iteration of `trace` through render, render-BP, merge and
/// preprocess-BP. Pairing starts from adjacent pairs and is refreshed from each
/// iteration's completion orders.
pub fn simulate_trace(trace: &WorkTrace, cfg: &SimConfig) -> Result<TraceRun, SimError> {
    simulate_trace_with(trace, cfg, PairPolicy::Adaptive)
}

pub fn simulate_trace_with(trace: &WorkTrace, cfg: &SimConfig, policy: PairPolicy) -> Result<TraceRun, SimError> {
    cfg.validate()?;
    let layout = trace.layout();
    trace.validate(&layout)?;
    let mut pairs = PairConfig::default();
    let mut report = CycleReport {
        config: *cfg,
        frame_id: trace.frame_id,
        is_keyframe: trace.is_keyframe,
        iterations: trace.iterations.len(),
        render_cycles: 0,
        render_bp_cycles: 0,
        merge_cycles: 0,
        preprocess_bp_cycles: 0,
        total_cycles: 0,
        re_busy: vec![0; cfg.num_res],
        re_idle: vec![0; cfg.num_res],
        imbalance: 0.0,
        gmu_merge_cycles: 0,
        atomic_merge_cycles: 0,
        stage_buffer_stalls: 0,
        fragment_issues: 0,
        speedups: Vec::new(),
    };
    let mut merged = Vec::new();
    let mut gmu_merged = Vec::new();
    let mut atomic_merged = Vec::new();
    for it in &trace.iterations {
        let render = simulate_render_phase(it, &layout, &pairs, cfg)?;
        let bp = simulate_bp_phase(it, &layout, &pairs, cfg)?;
        if cfg.toggles.pairing && policy == PairPolicy::Adaptive {
            pairs.update(&render.orders);
        }
        let streams = lane_streams(it, &bp, cfg.num_res);
        let gmu = simulate_gradient_merge(&streams, MergeMode::Gmu, cfg);
        let atomic = simulate_gradient_merge(&streams, MergeMode::Atomic, cfg);
        let active = if cfg.toggles.gmu { &gmu } else { &atomic };
        let pre = preprocess_cycles(it.gaussians, it.stage == Stage::Tracking, cfg);

        report.render_cycles += render.schedule.makespan;
        report.render_bp_cycles += bp.makespan;
        report.merge_cycles += active.cycles;
        report.preprocess_bp_cycles += pre;
        report.gmu_merge_cycles += gmu.cycles;
        report.atomic_merge_cycles += atomic.cycles;
        report.stage_buffer_stalls += if cfg.toggles.gmu { gmu.stage_buffer_stalls } else { 0 };
        report.fragment_issues += render.issued;
        for re in 0..cfg.num_res {
            let busy = render.schedule.busy[re] + bp.busy[re];
            report.re_busy[re] += busy;
            report.re_idle[re] += render.schedule.makespan + bp.makespan - busy;
        }
        merged.push(active.merged.clone());
        gmu_merged.push(gmu.merged);
        atomic_merged.push(atomic.merged);
    }
    report.total_cycles =
        report.render_cycles + report.render_bp_cycles + report.merge_cycles + report.preprocess_bp_cycles;
    report.imbalance = imbalance(&report.re_busy);
    Ok(TraceRun { report, merged, gmu_merged, atomic_merged })
}

/// [`simulate_trace`] plus, for every enabled toggle, the cost of switching it off.
pub fn with_speedups(trace: &WorkTrace, cfg: &SimConfig) -> Result<CycleReport, SimError> {
    let mut report = simulate_trace(trace, cfg)?.report;
    let t = cfg.toggles;
    let variants: [(&str, bool, Toggles); 4] = [
        ("streaming", t.streaming, Toggles { streaming: false, ..t }),
        ("pairing", t.pairing, Toggles { pairing: false, ..t }),
        ("reuse_rb", t.reuse_rb, Toggles { reuse_rb: false, ..t }),
        ("gmu", t.gmu, Toggles { gmu: false, ..t }),
    ];
    for (name, on, off) in variants {
        if !on {
            continue;
        }
        let without = simulate_trace(trace, &cfg.with_toggles(off))?.report.total_cycles;
        report.speedups.push(ToggleSpeedup {
            toggle: name.to_string(),
            cycles_without: without,
            cycles_with: report.total_cycles,
            speedup: without as f64 / report.total_cycles.max(1) as f64,
        });
    }
    Ok(report)
}
