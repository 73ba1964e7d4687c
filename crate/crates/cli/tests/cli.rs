use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rtgs_core::backprop::{full_backward, Mode};
use rtgs_core::io::{load_scene, Manifest};
use rtgs_core::raster::render_frame;
use rtgs_core::synth::{gen_sequence, standard_scene, SequenceSpec};
use serde_json::Value;
use tempfile::TempDir;

fn rtgs(dir: &Path, args: &[&str]) -> Output {
    rtgs_env(dir, args, None)
}

fn rtgs_env(dir: &Path, args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rtgs"));
    cmd.current_dir(dir).args(args);
    if let Some(n) = threads {
        cmd.env("RTGS_THREADS", n.to_string());
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const SHORT_RUN: &[&str] = &[
    "--frames",
    "6",
    "--tracking_iterations",
    "6",
    "--mapping_iterations",
    "6",
    "--keyframe_interval",
    "4",
    "--trace_frames",
    "3,4",
];

#[test]
fn gen_scene_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let gen = |d: &TempDir, seed: &str| {
        ok(&rtgs(d.path(), &["gen-scene", "--seed", seed, "--count", "40", "--out", "s.gscene"]));
        fs::read(d.path().join("s.gscene")).unwrap()
    };
    assert_eq!(gen(&a, "9"), gen(&b, "9"));
    assert_ne!(gen(&a, "9"), gen(&b, "10"));
}

#[test]
fn gen_scene_single_gaussian_has_one_body_line() {
    let dir = TempDir::new().unwrap();
    ok(&rtgs(dir.path(), &["gen-scene", "--count", "1", "--out", "one.gscene"]));
    let text = fs::read_to_string(dir.path().join("one.gscene")).unwrap();
    let body: Vec<&str> = text.lines().skip(1).filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body.len(), 1);
    assert!(text.starts_with("GSCENE v1 1\n"));
}

#[test]
fn gen_scene_means_stay_in_the_box() {
    let dir = TempDir::new().unwrap();
    ok(&rtgs(dir.path(), &["gen-scene", "--count", "500", "--extent", "1.0", "--out", "s.gscene"]));
    let scene = load_scene::<f64>(&dir.path().join("s.gscene")).unwrap();
    assert_eq!(scene.len(), 500);
    for g in &scene.gaussians {
        assert!(g.mean.iter().all(|v| v.abs() <= 1.0), "{:?}", g.mean);
        assert!((0.3..=0.99).contains(&g.opacity));
        assert!(g.scale.iter().all(|s| (0.02..=0.15).contains(s)));
    }
}

#[test]
fn gen_scene_rejects_zero_count() {
    let dir = TempDir::new().unwrap();
    assert_eq!(rtgs(dir.path(), &["gen-scene", "--count", "0"]).status.code(), Some(2));
}

#[test]
fn orbit_poses_lie_on_a_circle() {
    let dir = TempDir::new().unwrap();
    ok(&rtgs(dir.path(), &["gen-seq", "--frames", "60", "--orbit_radius", "2.5", "--out", "seq"]));
    let m = Manifest::load(&dir.path().join("seq/manifest.txt")).unwrap();
    assert_eq!(m.frames.len(), 60);
    for (_, pose) in &m.frames {
        let c = pose.center();
        assert!(((c.x * c.x + c.z * c.z).sqrt() - 2.5).abs() < 1e-9);
        assert!((c.y + 0.4).abs() < 1e-9);
    }
}

#[test]
fn gen_seq_same_seed_same_bytes() {
    let dir = TempDir::new().unwrap();
    let args = |out: &'static str| ["gen-seq", "--frames", "3", "--noise", "0.02", "--seed", "5", "--out", out];
    ok(&rtgs(dir.path(), &args("a")));
    ok(&rtgs(dir.path(), &args("b")));
    for f in ["frame_0000.gframe", "frame_0002.gframe"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let poses = |d: &str| {
        let text = fs::read_to_string(dir.path().join(d).join("manifest.txt")).unwrap();
        text.lines().filter(|l| !l.starts_with('#')).map(str::to_string).collect::<Vec<_>>()
    };
    assert_eq!(poses("a"), poses("b"));
}

#[test]
fn degenerate_trajectory_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let out = rtgs(
        dir.path(),
        &["gen-seq", "--trajectory", "line", "--line_from", "[0,0,-3]", "--line_to", "[0,0,-3]", "--out", "x"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("zero baseline"));
}

#[test]
fn ground_truth_poses_reproduce_noise_free_frames() {
    let scene = standard_scene(0);
    let spec = SequenceSpec { frames: 4, ..SequenceSpec::default() };
    let seq = gen_sequence(&scene, &spec).unwrap();
    for f in &seq.frames {
        let rec = render_frame(&scene.gaussians, f, &Default::default()).unwrap();
        let (loss, _) = full_backward(&rec, f, &scene.gaussians, 0.9, Mode::Tracking).unwrap();
        assert!(loss < 1e-12, "frame {}: loss {loss}", f.frame_index);
    }
}

#[test]
fn config_file_then_overrides() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("job.cfg"), "# scene job\ncount = 3\nseed = 4\nout = from_file.gscene\n").unwrap();
    ok(&rtgs(dir.path(), &["gen-scene", "--config", "job.cfg", "--count", "2"]));
    let scene = load_scene::<f64>(&dir.path().join("from_file.gscene")).unwrap();
    assert_eq!(scene.len(), 2);
    assert_eq!(rtgs(dir.path(), &["gen-scene", "--config", "missing.cfg"]).status.code(), Some(2));
    fs::write(dir.path().join("bad.cfg"), "count: 3\n").unwrap();
    assert_eq!(rtgs(dir.path(), &["gen-scene", "--config", "bad.cfg"]).status.code(), Some(2));
}

#[test]
fn run_missing_sequence_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = rtgs(dir.path(), &["run", "--sequence", "nowhere/manifest.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    assert_eq!(rtgs(dir.path(), &["run", "--no_such_field", "1"]).status.code(), Some(2));
}

#[test]
fn run_quality_gate_exits_3_after_writing_reports() {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["run", "--out", "gated", "--max_ate", "0", "--simulate", "false"];
    args.extend_from_slice(SHORT_RUN);
    assert_eq!(rtgs(dir.path(), &args).status.code(), Some(3));
    assert!(dir.path().join("gated/sequence_report.json").exists());
}

fn run_outputs(dir: &Path, out: &str, threads: Option<usize>) -> Vec<(String, Vec<u8>)> {
    let mut args = vec!["run", "--out", out, "--sweep", "true"];
    args.extend_from_slice(SHORT_RUN);
    ok(&rtgs_env(dir, &args, threads));
    let mut files = Vec::new();
    for name in ["sequence_report.json", "frames.csv", "cycle_report.json", "speedups.csv", "ablation.csv"] {
        files.push((name.to_string(), fs::read(dir.join(out).join(name)).unwrap()));
    }
    for f in ["frame_0003.gtrace", "frame_0004.gtrace"] {
        files.push((f.to_string(), fs::read(dir.join(out).join("traces").join(f)).unwrap()));
    }
    files
}

/// Outputs embed the `out` path, so compare with that one field neutralized.
fn normalize(bytes: &[u8], out: &str) -> Vec<u8> {
    String::from_utf8_lossy(bytes).replace(&format!("\"out\":\"{out}\""), "\"out\":\"_\"").replace(
        &format!("\"out\": \"{out}\""),
        "\"out\": \"_\"",
    )
    .into_bytes()
}

#[test]
fn run_is_reproducible_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let a = run_outputs(dir.path(), "a", Some(1));
    let b = run_outputs(dir.path(), "b", Some(1));
    let c = run_outputs(dir.path(), "c", Some(4));
    for ((name, x), ((_, y), (_, z))) in a.iter().zip(b.iter().zip(&c)) {
        assert_eq!(normalize(x, "a"), normalize(y, "b"), "{name} differs between runs");
        assert_eq!(normalize(x, "a"), normalize(z, "c"), "{name} differs between thread counts");
    }
}

#[test]
fn run_reports_embed_the_resolved_manifest() {
    let dir = TempDir::new().unwrap();
    let files = run_outputs(dir.path(), "r", None);
    let report: Value = serde_json::from_slice(&files[0].1).unwrap();
    let m = &report["manifest"];
    for t in ["pruning", "downsampling", "insertion"] {
        assert!(m["tracker"][t].is_boolean(), "tracker.{t}");
    }
    for t in ["streaming", "pairing", "reuse_rb", "gmu"] {
        assert!(m["sim"]["toggles"][t].is_boolean(), "sim.toggles.{t}");
    }
    assert_eq!(m["tracker"]["tracking_iterations"], 6);
    assert!(report["report"]["ate_rmse"].is_number());

    let cycles: Value = serde_json::from_slice(&files[2].1).unwrap();
    assert_eq!(cycles["manifest"], *m);
    let reports = cycles["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["speedups"].as_array().unwrap().len(), 4);
    let total: u64 = reports.iter().map(|r| r["total_cycles"].as_u64().unwrap()).sum();
    assert_eq!(cycles["driver_clock"].as_u64().unwrap(), total);

    for (name, bytes) in &files {
        let text = String::from_utf8_lossy(bytes);
        if name.ends_with(".csv") {
            let first = text.lines().next().unwrap();
            let json: Value = serde_json::from_str(first.strip_prefix("# manifest ").unwrap()).unwrap();
            assert_eq!(json, *m, "{name}");
        }
        if name.ends_with(".gtrace") {
            assert!(text.lines().nth(1).unwrap().starts_with("# manifest {"), "{name}");
        }
    }

    let frames = String::from_utf8_lossy(&files[1].1).to_string();
    assert_eq!(frames.lines().count(), 1 + 1 + 6);
    let ablation = String::from_utf8_lossy(&files[4].1).to_string();
    assert_eq!(ablation.lines().count(), 1 + 1 + 16);
}

#[test]
fn exported_traces_feed_the_sim_command() {
    let dir = TempDir::new().unwrap();
    let files = run_outputs(dir.path(), "r", None);
    ok(&rtgs(dir.path(), &["sim", "--traces", "r/traces/frame_0003.gtrace,r/traces/frame_0004.gtrace", "--out", "s"]));
    let from_sim: Value = serde_json::from_slice(&fs::read(dir.path().join("s/cycle_report.json")).unwrap()).unwrap();
    let from_run: Value = serde_json::from_slice(&files[2].1).unwrap();
    assert_eq!(from_sim["reports"], from_run["reports"]);
    assert_eq!(rtgs(dir.path(), &["sim", "--traces", "r/frames.csv", "--out", "s"]).status.code(), Some(2));
}

#[test]
fn sweep_writes_sixteen_rows() {
    let dir = TempDir::new().unwrap();
    run_outputs(dir.path(), "r", None);
    ok(&rtgs(dir.path(), &["sweep", "--traces", "r/traces/frame_0003.gtrace", "--out", "w"]));
    let text = fs::read_to_string(dir.path().join("w/ablation.csv")).unwrap();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 16);
    let mut seen: Vec<String> = rows.iter().map(|r| r.iter().take(4).collect::<Vec<_>>().join(",")).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 16);
}

#[test]
fn bad_thread_count_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rtgs"));
    let out = cmd.current_dir(dir.path()).env("RTGS_THREADS", "zero").args(["gen-scene"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
