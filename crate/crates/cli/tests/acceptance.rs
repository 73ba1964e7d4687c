//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and a
//! summary line. Failing criteria make the process exit non-zero only when
//! `RTGS_ACCEPTANCE_STRICT=1`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtgs_cli::config::RunManifest;
use rtgs_cli::{execute_run, RunOutcome};
use rtgs_core::backprop::recover_transmittance;
use rtgs_core::gradcheck::{analytic, check_case, random_case, ParamKind};
use rtgs_core::math::{Mat2, Vec2, Vec3};
use rtgs_core::projection::Gaussian2D;
use rtgs_core::raster::{render_pixel, RenderConfig};
use rtgs_core::scene::Resolution;
use rtgs_core::slam::{select_resolution, SequenceReport};
use rtgs_sim::report::{simulate_trace_with, PairPolicy};
use rtgs_sim::sweep::{chain_violations, sweep};
use rtgs_sim::synth::{clustered_suite, dense_suite, standard_suite};
use rtgs_sim::{simulate_trace, SimConfig, Toggles};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn gradient_seeds() -> impl Iterator<Item = (u64, usize)> {
    (0..20u64).map(|seed| (seed, 10 + (seed as usize * 7) % 21))
}

fn is_rotation(k: ParamKind) -> bool {
    matches!(k, ParamKind::Rotation | ParamKind::PoseRotation)
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let (mut lin, mut rot, mut scenes, mut entries) = (0.0f64, 0.0f64, 0, 0);
    for (seed, count) in gradient_seeds() {
        let case = random_case(seed, count);
        assert!(case.gaussians.len() <= 30);
        assert_eq!((case.frame.resolution.width, case.frame.resolution.height), (32, 32));
        let r = check_case(&case, 1e-5, 1e-5, 1e-9).expect("gradient check runs");
        lin = lin.max(r.max_rel_err(|k| !is_rotation(k)));
        rot = rot.max(r.max_rel_err(is_rotation));
        entries += r.entries.len();
        scenes += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        scenes >= 20 && lin <= 1e-4 && rot <= 1e-3 && secs < 120.0,
        format!("{scenes} scenes, {entries} gradients, max rel err {lin:.2e} (rotations {rot:.2e}), {secs:.1} s"),
    )
}

/// Independent compositing loop: conic from the covariance by the adjugate,
/// front-to-back blending with the same skip, clamp and termination rules.
fn composite_oracle(pixel: (f64, f64), splats: &[Gaussian2D<f64>], background: [f64; 3], cfg: &RenderConfig) -> [f64; 3] {
    let mut color = [0.0; 3];
    let mut t = 1.0;
    for s in splats {
        let (a, b, c, d) = (s.cov2d[(0, 0)], s.cov2d[(0, 1)], s.cov2d[(1, 0)], s.cov2d[(1, 1)]);
        let det = a * d - b * c;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        let (dx, dy) = (pixel.0 - s.mean2d.x, pixel.1 - s.mean2d.y);
        let q = dx * (ia * dx + ib * dy) + dy * (ic * dx + id * dy);
        let alpha = s.opacity * (-0.5 * q).exp();
        if alpha <= cfg.alpha_min {
            continue;
        }
        let alpha = alpha.min(cfg.alpha_max);
        for k in 0..3 {
            color[k] += t * alpha * s.color[k];
        }
        t *= 1.0 - alpha;
        if t < cfg.t_term {
            break;
        }
    }
    for k in 0..3 {
        color[k] += t * background[k];
    }
    color
}

fn random_splat(rng: &mut ChaCha8Rng, id: u32, pixel: (f64, f64)) -> Gaussian2D<f64> {
    let sx: f64 = rng.random_range(0.3..6.0);
    let sy: f64 = rng.random_range(0.3..6.0);
    let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (c, s) = (th.cos(), th.sin());
    let r = Mat2::new(c, -s, s, c);
    let cov = r * Mat2::new(sx * sx, 0.0, 0.0, sy * sy) * r.transpose();
    Gaussian2D {
        source_id: id,
        mean2d: Vec2::new(pixel.0 + rng.random_range(-8.0..8.0), pixel.1 + rng.random_range(-8.0..8.0)),
        cov2d: cov,
        inv_cov2d: cov.try_inverse().expect("SPD"),
        depth: rng.random_range(0.5..10.0),
        color: Vec3::new(rng.random(), rng.random(), rng.random()),
        opacity: rng.random_range(0.01..1.0),
    }
}

fn compositing_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut terminated = 0;
    for list in 0..10_000 {
        let pixel = (rng.random_range(0..64) as f64 + 0.5, rng.random_range(0..64) as f64 + 0.5);
        let n = rng.random_range(0..60);
        let mut splats: Vec<Gaussian2D<f64>> = (0..n).map(|i| random_splat(&mut rng, i, pixel)).collect();
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        let background = [rng.random(), rng.random(), rng.random()];
        let cfg = if list % 2 == 0 { RenderConfig::default() } else { RenderConfig::exhaustive() };
        let got = render_pixel(Vec2::new(pixel.0, pixel.1), splats.iter().enumerate(), background, &cfg);
        let want = composite_oracle(pixel, &splats, background, &cfg);
        if got.log.t_final < cfg.t_term {
            terminated += 1;
        }
        for k in 0..3 {
            worst = worst.max((got.color[k] - want[k]).abs());
        }
    }
    verdict(worst <= 1e-6, format!("10000 fragment lists ({terminated} early-terminated), max channel error {worst:.2e}"))
}

fn transmittance_recovery() -> Verdict {
    let (mut worst, mut fragments) = (0.0f64, 0usize);
    for (seed, count) in gradient_seeds() {
        let (rec, _) = analytic(&random_case(seed, count)).expect("case renders");
        for log in &rec.logs {
            for (e, t) in log.entries.iter().zip(recover_transmittance(log)) {
                worst = worst.max(((t - e.transmittance) / e.transmittance).abs());
                fragments += 1;
            }
        }
    }
    verdict(worst <= 1e-6, format!("{fragments} fragments, max rel err {worst:.2e}"))
}

struct SlamRuns {
    full: SequenceReport,
    cap05: SequenceReport,
    cap06: SequenceReport,
    downsampled: SequenceReport,
    pruning_secs: f64,
}

fn orbit_run(pruning: bool, cap: f64, downsampling: bool) -> SequenceReport {
    let mut m = RunManifest { trace_frames: Vec::new(), simulate: false, export_traces: false, ..RunManifest::default() };
    m.tracker.pruning = pruning;
    m.tracker.prune_fraction_cap = cap;
    m.tracker.downsampling = downsampling;
    assert_eq!(m.generator.frames, 60);
    let RunOutcome { report, .. } = execute_run(&m).expect("orbit run");
    report
}

fn slam_runs() -> SlamRuns {
    let start = Instant::now();
    let full = orbit_run(false, 0.5, false);
    let cap05 = orbit_run(true, 0.5, false);
    let pruning_secs = start.elapsed().as_secs_f64();
    SlamRuns { full, cap05, cap06: orbit_run(true, 0.6, false), downsampled: orbit_run(false, 0.5, true), pruning_secs }
}

fn summary(r: &SequenceReport) -> String {
    format!("ATE {:.5} PSNR {:.3} Gaussians {}", r.ate_rmse, r.mean_keyframe_psnr, r.final_gaussians)
}

fn pruning_budget(runs: &SlamRuns) -> Verdict {
    let (f, p) = (&runs.full, &runs.cap05);
    let ate_ok = p.ate_rmse <= 1.1 * f.ate_rmse;
    let psnr_ok = p.mean_keyframe_psnr >= 0.9 * f.mean_keyframe_psnr;
    let reduction = 1.0 - p.final_gaussians as f64 / f.final_gaussians as f64;
    verdict(
        ate_ok && psnr_ok && reduction >= 0.4 && runs.pruning_secs < 600.0,
        format!(
            "unpruned [{}], cap 0.5 [{}]: ATE {:+.1}%, PSNR {:+.1}%, Gaussians -{:.1}%, {:.0} s",
            summary(f),
            summary(p),
            100.0 * (p.ate_rmse / f.ate_rmse - 1.0),
            100.0 * (p.mean_keyframe_psnr / f.mean_keyframe_psnr - 1.0),
            100.0 * reduction,
            runs.pruning_secs
        ),
    )
}

fn pruning_cliff(runs: &SlamRuns) -> Verdict {
    let ratio = runs.cap06.ate_rmse / runs.cap05.ate_rmse;
    verdict(ratio >= 1.5, format!("ATE cap 0.6 {:.5} / cap 0.5 {:.5} = {ratio:.2}", runs.cap06.ate_rmse, runs.cap05.ate_rmse))
}

fn downsampling_schedule(runs: &SlamRuns) -> Verdict {
    let r0 = Resolution::new(64, 48);
    let mut exact = select_resolution(8, 8, true, r0, 2.0) == r0;
    for steps in 0..6u32 {
        let got = select_resolution(9 + steps as usize, 8, false, r0, 2.0);
        let want = (2f64.powi(steps as i32) / 16.0).min(0.25);
        exact &= got.pixels() as f64 / r0.pixels() as f64 == want;
    }
    let (f, d) = (&runs.full, &runs.downsampled);
    let ate_ok = d.ate_rmse <= 1.1 * f.ate_rmse;
    let psnr_ok = d.mean_keyframe_psnr >= 0.9 * f.mean_keyframe_psnr;
    let saved = 1.0 - d.total_rendered_pixels as f64 / f.total_rendered_pixels as f64;
    verdict(
        exact && ate_ok && psnr_ok && saved >= 0.55,
        format!(
            "schedule exact: {exact}; full [{}], downsampled [{}]: ATE {:+.1}%, PSNR {:+.1}%, rendered pixels -{:.1}%",
            summary(f),
            summary(d),
            100.0 * (d.ate_rmse / f.ate_rmse - 1.0),
            100.0 * (d.mean_keyframe_psnr / f.mean_keyframe_psnr - 1.0),
            100.0 * saved
        ),
    )
}

fn wsu_trend() -> Verdict {
    let base = SimConfig::default();
    let on = base.with_toggles(Toggles::ALL);
    let off = base.with_toggles(Toggles { streaming: false, pairing: false, ..Toggles::ALL });
    let (mut worst_cut, mut never_worse) = (f64::INFINITY, true);
    for t in standard_suite() {
        let with = simulate_trace(&t, &on).unwrap().report.render_cycles;
        let without = simulate_trace(&t, &off).unwrap().report.render_cycles;
        worst_cut = worst_cut.min(1.0 - with as f64 / without as f64);
        let adjacent = simulate_trace_with(&t, &on, PairPolicy::Adjacent).unwrap().report.render_cycles;
        never_worse &= with <= adjacent;
    }
    verdict(
        worst_cut >= 0.2 && never_worse,
        format!("smallest render-cycle cut {:.1}% over 5 traces; WSU never worse than adjacent: {never_worse}", 100.0 * worst_cut),
    )
}

fn reuse_trend() -> Verdict {
    let base = SimConfig::default();
    let (mut worst, mut qualifying) = (0.0f64, 0);
    for t in dense_suite() {
        if t.mean_fragments_per_pixel() < 100.0 {
            continue;
        }
        qualifying += 1;
        let with = simulate_trace(&t, &base.with_toggles(Toggles::ALL)).unwrap().report.render_bp_cycles;
        let without =
            simulate_trace(&t, &base.with_toggles(Toggles { reuse_rb: false, ..Toggles::ALL })).unwrap().report.render_bp_cycles;
        worst = worst.max(with as f64 / without as f64);
    }
    verdict(qualifying > 0 && worst <= 0.5, format!("{qualifying} traces with >= 100 fragments/pixel, worst reuse ratio {worst:.3}"))
}

fn gmu_trend() -> Verdict {
    let cfg = SimConfig::default();
    let (mut worst, mut identical, mut max_hot) = (0.0f64, true, 0);
    for t in clustered_suite(32) {
        for it in &t.iterations {
            for st in &it.subtiles {
                let mut ids: Vec<u32> = st.fragments.iter().flatten().copied().collect();
                ids.sort_unstable();
                ids.dedup();
                max_hot = max_hot.max(ids.len());
            }
        }
        let run = simulate_trace(&t, &cfg).unwrap();
        worst = worst.max(run.report.gmu_merge_cycles as f64 / run.report.atomic_merge_cycles as f64);
        for (g, a) in run.gmu_merged.iter().zip(&run.atomic_merged) {
            identical &= g.len() == a.len() && g.iter().zip(a).all(|((i, x), (j, y))| i == j && x.to_bits() == y.to_bits());
        }
    }
    verdict(
        max_hot <= 32 && worst <= 0.5 && identical,
        format!("at most {max_hot} Gaussians per subtile, worst GMU/atomic {worst:.3}, merged values bit-identical: {identical}"),
    )
}

fn composition_monotone() -> Verdict {
    let (mut violations, mut speedups) = (0, Vec::new());
    for t in standard_suite() {
        let rows = sweep(std::slice::from_ref(&t), &SimConfig::default()).unwrap();
        assert_eq!(rows.len(), 16);
        violations += chain_violations(&rows).len();
        speedups.push(format!("{:.2}", rows[15].speedup));
    }
    verdict(violations == 0, format!("{violations} chain violations over 5 traces; all-on speedups {}", speedups.join(" ")))
}

fn short_manifest() -> RunManifest {
    let mut m = RunManifest { trace_frames: vec![3, 4], sweep: false, ..RunManifest::default() };
    m.generator.frames = 10;
    m.generator.noise = 0.01;
    m.tracker.tracking_iterations = 10;
    m.tracker.mapping_iterations = 10;
    m.tracker.keyframe_interval = 4;
    m
}

fn fingerprint(o: &RunOutcome) -> String {
    serde_json::to_string(&(&o.report, &o.traces, &o.cycle_reports, o.driver_clock)).unwrap()
}

fn determinism() -> Verdict {
    let m = short_manifest();
    let in_pool = |n: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        fingerprint(&pool.install(|| execute_run(&m)).unwrap())
    };
    let reference = in_pool(1);
    let runs = [in_pool(1), in_pool(2), in_pool(4)];
    let pipeline = runs.iter().all(|r| *r == reference);
    let t = &standard_suite()[1];
    let a = simulate_trace(t, &SimConfig::default()).unwrap();
    let b = simulate_trace(t, &SimConfig::default()).unwrap();
    let bits = |r: &rtgs_sim::report::TraceRun| {
        r.merged.iter().flat_map(|m| m.iter().map(|(k, v)| (*k, v.to_bits()))).collect::<Vec<_>>()
    };
    let sim = a.report == b.report && bits(&a) == bits(&b);
    verdict(
        pipeline && sim,
        format!("pipeline identical over 1/1/2/4 threads: {pipeline} ({} bytes); simulator identical: {sim}", reference.len()),
    )
}

fn main() {
    let mut failed = Vec::new();
    let mut check = |n: u32, title: &str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|e| verdict(false, format!("panicked: {}", e.downcast_ref::<String>().cloned().unwrap_or_default())));
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {n:>2} {title}: {} [{:.1} s]", v.detail, start.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(n);
        }
    };
    check(1, "gradient correctness", &mut gradient_correctness);
    check(2, "compositing oracle", &mut compositing_oracle);
    check(3, "transmittance recovery", &mut transmittance_recovery);
    let runs = slam_runs();
    check(4, "pruning quality budget", &mut || pruning_budget(&runs));
    check(5, "pruning cliff", &mut || pruning_cliff(&runs));
    check(6, "downsampling schedule", &mut || downsampling_schedule(&runs));
    check(7, "WSU trend", &mut wsu_trend);
    check(8, "R&B reuse trend", &mut reuse_trend);
    check(9, "GMU trend", &mut gmu_trend);
    check(10, "composition monotonicity", &mut composition_monotone);
    check(11, "determinism", &mut determinism);
    if failed.is_empty() {
        println!("acceptance: all 11 criteria pass");
    } else {
        println!("acceptance: {} of 11 criteria fail: {failed:?}", failed.len());
        if std::env::var("RTGS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
