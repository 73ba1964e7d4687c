mod common;

use proptest::prelude::*;
use rtgs_core::scene::{Resolution, TileLayout};
use rtgs_sim::config::{SimConfig, Toggles};
use rtgs_sim::render::{
    covers_subtile, lane_completion, schedule, simulate_render_phase, update_pair_config, PairConfig, ADJACENT_PAIRS,
};
use rtgs_sim::report::{simulate_trace, simulate_trace_with, PairPolicy};
use rtgs_sim::synth::{clustered_suite, dense_suite, standard_suite};

#[test]
fn latency_defaults() {
    let l = SimConfig::default().latency;
    assert_eq!((l.alpha_compute, l.alpha_blend), (12, 3));
    assert_eq!((l.bp_alpha_grad_baseline, l.bp_alpha_grad_reused, l.bp_cov_pos_grad), (20, 4, 8));
    assert!(l.validate().is_ok());
    let mut bad = l;
    bad.bp_alpha_grad_reused = 20;
    assert!(bad.validate().is_err());
    bad = l;
    bad.alpha_blend = 0;
    assert!(bad.validate().is_err());
}

#[test]
fn uniform_workload_is_balanced() {
    let it = common::iteration(Resolution::new(64, 64), |_, _| 10);
    for t in Toggles::all_combinations() {
        let cfg = SimConfig::default().with_toggles(t);
        let r = simulate_render_phase(&it, &TileLayout::new(Resolution::new(64, 64)), &PairConfig::default(), &cfg).unwrap();
        let b = &r.schedule.busy;
        assert!(b.iter().all(|&x| x == b[0]), "{t:?}: {b:?}");
    }
    let rep = simulate_trace(&common::trace(Resolution::new(64, 64), 1, |_, _, _| 10), &SimConfig::default()).unwrap();
    assert_eq!(rep.report.imbalance, 0.0);
}

#[test]
fn heavy_light_lane_hand_count() {
    let f = 40;
    // Shared slots: both slots go to the heavy pixel, two fragments per cycle.
    assert_eq!(lane_completion(2 * f, 0, true), (f, 0));
    // One slot per pixel.
    assert_eq!(lane_completion(2 * f, 0, false), (2 * f, 0));
    assert_eq!(lane_completion(10, 4, true), (7, 4));
    assert_eq!(lane_completion(5, 5, true), (5, 5));
}

#[test]
fn pair_config_sorted_order() {
    let order: [u8; 16] = std::array::from_fn(|i| i as u8);
    let pairs = update_pair_config(&order);
    let expect: Vec<(u8, u8)> = (0..8).map(|i| (i, 15 - i)).collect();
    assert_eq!(pairs.to_vec(), expect);
    assert!(covers_subtile(&pairs));
    assert!(covers_subtile(&ADJACENT_PAIRS));
    assert!(!covers_subtile(&[(0, 0); 8]));
}

#[test]
fn simultaneous_completions_break_ties_by_index() {
    use rtgs_sim::render::render_subtile;
    let it = common::iteration(Resolution::new(16, 16), |_, _| 7);
    let t = render_subtile(&it.subtiles[0], &ADJACENT_PAIRS, true, &SimConfig::default());
    let expect: [u8; 16] = std::array::from_fn(|i| i as u8);
    assert_eq!(t.order, expect);
    assert_eq!(update_pair_config(&t.order)[0], (0, 15));
}

proptest! {
    #[test]
    fn pairing_matches_sort_and_match(times in proptest::collection::vec(0u64..50, 16)) {
        let mut order: Vec<u8> = (0..16).collect();
        order.sort_by_key(|&p| (times[p as usize], p));
        let order: [u8; 16] = order.try_into().unwrap();
        let pairs = update_pair_config(&order);
        prop_assert!(covers_subtile(&pairs));
        let mut by_time: Vec<u8> = (0..16).collect();
        by_time.sort_by_key(|&p| (times[p as usize], p));
        for i in 0..8 {
            prop_assert_eq!(pairs[i], (by_time[i], by_time[15 - i]));
        }
    }

    #[test]
    fn streaming_never_loses_to_waves(times in proptest::collection::vec(0u64..200, 1..80), res in 1usize..20) {
        let s = schedule(&times, res, true);
        let w = schedule(&times, res, false);
        prop_assert!(s.makespan <= w.makespan);
        prop_assert_eq!(s.busy.iter().sum::<u64>(), w.busy.iter().sum::<u64>());
    }

}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fragment_issues_are_conserved(seed in 0u64..1000) {
        let trace = common::trace(Resolution::new(32, 32), 2, |i, s, p| ((seed as usize * 31 + i * 7 + s * 13 + p * 5) % 23) as u32);
        let base = simulate_trace(&trace, &SimConfig::default().with_toggles(Toggles::NONE)).unwrap().report;
        for t in Toggles::all_combinations() {
            let r = simulate_trace(&trace, &SimConfig::default().with_toggles(t)).unwrap().report;
            prop_assert_eq!(r.fragment_issues, base.fragment_issues);
            prop_assert_eq!(r.fragment_issues, trace.total_fragments());
            for re in 0..16 {
                prop_assert_eq!(r.re_busy[re] + r.re_idle[re], r.render_cycles + r.render_bp_cycles);
            }
        }
    }
}

#[test]
fn wsu_pairing_never_loses_to_adjacent() {
    for trace in standard_suite().iter().chain(&dense_suite()).chain(&clustered_suite(32)) {
        for streaming in [false, true] {
            let cfg = SimConfig::default().with_toggles(Toggles { streaming, ..Toggles::ALL });
            let wsu = simulate_trace_with(trace, &cfg, PairPolicy::Adaptive).unwrap().report;
            let adj = simulate_trace_with(trace, &cfg, PairPolicy::Adjacent).unwrap().report;
            assert!(wsu.render_cycles <= adj.render_cycles, "{} > {}", wsu.render_cycles, adj.render_cycles);
        }
    }
}

#[test]
fn streaming_and_pairing_cut_render_cycles() {
    for trace in standard_suite() {
        let none = simulate_trace(&trace, &SimConfig::default().with_toggles(Toggles::NONE)).unwrap().report;
        let on = Toggles { streaming: true, pairing: true, ..Toggles::NONE };
        let both = simulate_trace(&trace, &SimConfig::default().with_toggles(on)).unwrap().report;
        assert!((both.render_cycles as f64) <= 0.8 * none.render_cycles as f64);
        assert!(both.imbalance < none.imbalance);
    }
}

#[test]
fn layout_mismatch_is_an_error() {
    let it = common::iteration(Resolution::new(32, 32), |_, _| 3);
    let wrong = TileLayout::new(Resolution::new(64, 32));
    assert!(simulate_render_phase(&it, &wrong, &PairConfig::default(), &SimConfig::default()).is_err());
}
