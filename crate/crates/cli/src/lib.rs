//! Library side of the `rtgs` binary: job configs and one function per subcommand.

pub mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rtgs_core::io::{load_scene, load_sequence, save_sequence, write_scene};
use rtgs_core::slam::{run_sequence, IterationEvent, SequenceReport, SlamError};
use rtgs_core::synth::{gen_scene, gen_sequence, standard_scene, SceneSpec, Sequence};
use rtgs_sim::sweep::{sweep, SweepRow};
use rtgs_sim::synth::{clustered_suite, dense_suite, standard_suite};
use rtgs_sim::trace::IterationTrace;
use rtgs_sim::{with_speedups, CycleReport, SimError, Simulator, WorkTrace};
use serde::Serialize;

use config::{GeneratorConfig, RunManifest, SceneJob, SequenceJob, SimJob, Suite};

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Missing or malformed inputs and configs: exit 2.
    Input(String),
    /// Quality gate exceeded: exit 3.
    Quality(String),
    /// Anything else: exit 4.
    Internal(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Input(_) => 2,
            Failure::Quality(_) => 3,
            Failure::Internal(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) => write!(f, "input error: {m}"),
            Failure::Quality(m) => write!(f, "quality gate: {m}"),
            Failure::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<SlamError> for Failure {
    fn from(e: SlamError) -> Self {
        match e {
            SlamError::Config(_) | SlamError::EmptySequence | SlamError::Resolution(_) => Failure::Input(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::Parse { .. } | SimError::Mismatch(_) => Failure::Input(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

fn input(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

fn internal(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::Internal(format!("{}: {e}", path.display()))
}

fn compact<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serializes")
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| internal(dir, e))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| internal(path, e))
}

#[derive(Serialize)]
struct Embedded<'a, M: Serialize, R: Serialize> {
    manifest: &'a M,
    #[serde(flatten)]
    body: R,
}

/// Pretty JSON with the resolved job under `manifest`.
fn write_json<M: Serialize, R: Serialize>(path: &Path, manifest: &M, body: R) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &Embedded { manifest, body }).map_err(|e| internal(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| internal(path, e))
}

/// CSV whose first line is `# manifest <json>`.
fn write_csv<M: Serialize, R: Serialize>(path: &Path, manifest: &M, rows: &[R]) -> Result<(), Failure> {
    let mut w = create(path)?;
    writeln!(w, "# manifest {}", compact(manifest)).map_err(|e| internal(path, e))?;
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r).map_err(|e| internal(path, e))?;
    }
    csv.flush().map_err(|e| internal(path, e))
}

pub fn gen_scene_cmd(job: &SceneJob) -> Result<(), Failure> {
    if job.count == 0 && !job.standard {
        return Err(Failure::Input("count must be at least 1".into()));
    }
    if !(job.extent > 0.0 && job.scale_min > 0.0 && job.scale_max >= job.scale_min) {
        return Err(Failure::Input("need extent > 0 and 0 < scale_min <= scale_max".into()));
    }
    let scene = if job.standard {
        standard_scene(job.seed)
    } else {
        let spec = SceneSpec { count: job.count, extent: job.extent, scale_min: job.scale_min, scale_max: job.scale_max };
        gen_scene(job.seed, &spec)
    };
    let mut buf = Vec::new();
    write_scene(&scene, &mut buf).map_err(|e| internal(&job.out, e))?;
    let split = buf.iter().position(|&b| b == b'\n').map_or(buf.len(), |i| i + 1);
    let mut w = create(&job.out)?;
    w.write_all(&buf[..split])
        .and_then(|_| writeln!(w, "# config {}", compact(job)))
        .and_then(|_| w.write_all(&buf[split..]))
        .and_then(|_| w.flush())
        .map_err(|e| internal(&job.out, e))
}

/// Renders the generator's sequence.
pub fn generate(gen: &GeneratorConfig) -> Result<Sequence, Failure> {
    let scene = match &gen.scene {
        Some(path) => load_scene::<f64>(path).map_err(|e| input(path, e))?,
        None => standard_scene(gen.scene_seed),
    };
    if scene.is_empty() {
        return Err(Failure::Input("scene has no Gaussians".into()));
    }
    if gen.width == 0 || gen.height == 0 || !(gen.fx > 0.0 && gen.fy > 0.0) || !(gen.noise >= 0.0) {
        return Err(Failure::Input("need positive resolution and focal lengths, noise >= 0".into()));
    }
    gen_sequence(&scene, &gen.spec()).map_err(|e| Failure::Input(e.to_string()))
}

pub fn gen_seq_cmd(job: &SequenceJob) -> Result<PathBuf, Failure> {
    let seq = generate(&job.generator)?;
    save_sequence(&seq, &job.out, &format!("config {}", compact(job))).map_err(|e| internal(&job.out, e))
}

fn load_input_sequence(path: &Path) -> Result<Sequence, Failure> {
    load_sequence(path).map_err(|e| input(path, e))
}

/// Per-frame CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRow {
    pub index: usize,
    pub is_keyframe: bool,
    pub width: usize,
    pub height: usize,
    pub final_loss: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub position_error: f64,
    pub rotation_error_deg: f64,
    pub gaussians: usize,
    pub active_gaussians: usize,
    pub masked_this_frame: usize,
    pub removed_this_frame: usize,
    pub inserted: usize,
    pub psnr: Option<f64>,
    pub rendered_pixels: usize,
    pub fragments: usize,
    pub step_halvings: usize,
}

fn frame_rows(report: &SequenceReport) -> Vec<FrameRow> {
    report
        .frames
        .iter()
        .map(|f| FrameRow {
            index: f.index,
            is_keyframe: f.is_keyframe,
            width: f.width,
            height: f.height,
            final_loss: f.final_loss,
            qw: f.rotation[0],
            qx: f.rotation[1],
            qy: f.rotation[2],
            qz: f.rotation[3],
            tx: f.translation[0],
            ty: f.translation[1],
            tz: f.translation[2],
            position_error: f.position_error,
            rotation_error_deg: f.rotation_error_deg,
            gaussians: f.gaussians,
            active_gaussians: f.active_gaussians,
            masked_this_frame: f.masked_this_frame,
            removed_this_frame: f.removed_this_frame,
            inserted: f.inserted,
            psnr: f.psnr,
            rendered_pixels: f.rendered_pixels,
            fragments: f.fragments,
            step_halvings: f.step_halvings,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub frame_id: usize,
    pub toggle: String,
    pub cycles_without: u64,
    pub cycles_with: u64,
    pub speedup: f64,
}

fn speedup_rows(reports: &[CycleReport]) -> Vec<SpeedupRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.speedups.iter().map(|s| SpeedupRow {
                frame_id: r.frame_id,
                toggle: s.toggle.clone(),
                cycles_without: s.cycles_without,
                cycles_with: s.cycles_with,
                speedup: s.speedup,
            })
        })
        .collect()
}

/// Drives the simulator through the host protocol frame by frame and returns
/// per-frame reports with toggle speedups plus the final simulated clock.
pub fn drive(traces: &[WorkTrace], cfg: &rtgs_sim::SimConfig) -> Result<(Vec<CycleReport>, u64), Failure> {
    let mut sim = Simulator::new(*cfg)?;
    let mut reports = Vec::with_capacity(traces.len());
    for t in traces {
        let cycles = sim.execute(t.frame_id, t.is_keyframe, t)?.total_cycles;
        sim.advance(cycles);
        if !t.is_keyframe {
            sim.acknowledge_pruning(t.frame_id)?;
        }
        reports.push(with_speedups(t, cfg)?);
    }
    Ok((reports, sim.clock()))
}

/// Everything `run` computed, for callers that want it in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub report: SequenceReport,
    pub traces: Vec<WorkTrace>,
    pub cycle_reports: Vec<CycleReport>,
    pub driver_clock: u64,
    pub sweep: Vec<SweepRow>,
}

/// Tracking and mapping over the manifest's sequence with trace capture and
/// the optional simulator stages. Writes nothing.
pub fn execute_run(manifest: &RunManifest) -> Result<RunOutcome, Failure> {
    let mut manifest = manifest.clone();
    manifest.sim.validate()?;
    let seq = match &manifest.sequence {
        Some(path) => load_input_sequence(path)?,
        None => generate(&manifest.generator)?,
    };
    manifest.tracker.native = seq.native;
    manifest.tracker.validate()?;

    let wanted: std::collections::BTreeSet<usize> = manifest.trace_frames.iter().copied().collect();
    let mut captured: BTreeMap<usize, WorkTrace> = BTreeMap::new();
    let mut observer = |ev: &IterationEvent<'_, f64>| {
        if wanted.contains(&ev.frame_index) {
            captured
                .entry(ev.frame_index)
                .or_insert_with(|| WorkTrace::new(ev.frame_index, ev.is_keyframe, ev.record.resolution))
                .iterations
                .push(IterationTrace::from_record(ev.record, ev.stage, ev.gaussians));
        }
    };
    let report = run_sequence(&seq, &manifest.tracker, &mut observer)?;
    let traces: Vec<WorkTrace> = captured.into_values().collect();

    let (cycle_reports, driver_clock) =
        if manifest.simulate { drive(&traces, &manifest.sim)? } else { (Vec::new(), 0) };
    let rows = if manifest.sweep && !traces.is_empty() { sweep(&traces, &manifest.sim)? } else { Vec::new() };
    Ok(RunOutcome { manifest, report, traces, cycle_reports, driver_clock, sweep: rows })
}

#[derive(Serialize)]
struct SequenceBody<'a> {
    report: &'a SequenceReport,
}

#[derive(Serialize)]
struct CycleBody<'a> {
    driver_clock: u64,
    reports: &'a [CycleReport],
}

fn write_trace(path: &Path, manifest_json: &str, t: &WorkTrace) -> Result<(), Failure> {
    let mut buf = Vec::new();
    t.write(&mut buf).map_err(|e| internal(path, e))?;
    let split = buf.iter().position(|&b| b == b'\n').map_or(buf.len(), |i| i + 1);
    let mut w = create(path)?;
    w.write_all(&buf[..split])
        .and_then(|_| writeln!(w, "# manifest {manifest_json}"))
        .and_then(|_| w.write_all(&buf[split..]))
        .and_then(|_| w.flush())
        .map_err(|e| internal(path, e))
}

/// `run`: executes, writes every report under `out`, then applies the quality gates.
pub fn run_cmd(manifest: &RunManifest) -> Result<RunOutcome, Failure> {
    let outcome = execute_run(manifest)?;
    let m = &outcome.manifest;
    let out = &m.out;
    write_json(&out.join("sequence_report.json"), m, SequenceBody { report: &outcome.report })?;
    write_csv(&out.join("frames.csv"), m, &frame_rows(&outcome.report))?;
    if m.export_traces {
        let json = compact(m);
        for t in &outcome.traces {
            write_trace(&out.join("traces").join(format!("frame_{:04}.gtrace", t.frame_id)), &json, t)?;
        }
    }
    if m.simulate {
        let body = CycleBody { driver_clock: outcome.driver_clock, reports: &outcome.cycle_reports };
        write_json(&out.join("cycle_report.json"), m, body)?;
        write_csv(&out.join("speedups.csv"), m, &speedup_rows(&outcome.cycle_reports))?;
    }
    if m.sweep {
        write_csv(&out.join("ablation.csv"), m, &outcome.sweep)?;
    }
    let r = &outcome.report;
    if let Some(max) = m.max_ate {
        if !(r.ate_rmse <= max) {
            return Err(Failure::Quality(format!("ATE-RMSE {} exceeds max_ate {max}", r.ate_rmse)));
        }
    }
    if let Some(min) = m.min_psnr {
        if !(r.mean_keyframe_psnr >= min) {
            return Err(Failure::Quality(format!("mean keyframe PSNR {} below min_psnr {min}", r.mean_keyframe_psnr)));
        }
    }
    Ok(outcome)
}

/// Traces named by the job, or its built-in suite.
pub fn load_traces(job: &SimJob) -> Result<Vec<WorkTrace>, Failure> {
    if job.traces.is_empty() {
        return Ok(match job.suite {
            Suite::Standard => standard_suite(),
            Suite::Clustered => clustered_suite(job.hot),
            Suite::Dense => dense_suite(),
        });
    }
    job.traces
        .iter()
        .map(|p| {
            let f = fs::File::open(p).map_err(|e| input(p, e))?;
            WorkTrace::read(f).map_err(|e| input(p, e))
        })
        .collect()
}

/// `sim`: CycleReport JSON and per-toggle speedup CSV.
pub fn sim_cmd(job: &SimJob) -> Result<Vec<CycleReport>, Failure> {
    job.sim.validate()?;
    let traces = load_traces(job)?;
    let (reports, clock) = drive(&traces, &job.sim)?;
    write_json(&job.out.join("cycle_report.json"), job, CycleBody { driver_clock: clock, reports: &reports })?;
    write_csv(&job.out.join("speedups.csv"), job, &speedup_rows(&reports))?;
    Ok(reports)
}

/// `sweep`: one ablation row per toggle combination.
pub fn sweep_cmd(job: &SimJob) -> Result<Vec<SweepRow>, Failure> {
    job.sim.validate()?;
    let traces = load_traces(job)?;
    let rows = sweep(&traces, &job.sim)?;
    write_csv(&job.out.join("ablation.csv"), job, &rows)?;
    Ok(rows)
}
