//! Job configurations and the override mechanism shared by every subcommand.
//!
//! Each subcommand deserializes one job struct. Values are layered: struct
//! defaults, then a `key = value` file, then `--key value` arguments. A key is
//! either a full dotted path (`tracker.native.width`) or any dotted suffix that
//! names exactly one field (`prune_fraction_cap`, `toggles.gmu`).

use std::fs;
use std::path::{Path, PathBuf};

use rtgs_core::slam::TrackerConfig;
use rtgs_core::synth::{SequenceSpec, Trajectory};
use rtgs_core::scene::{Intrinsics, Resolution};
use rtgs_sim::SimConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {msg}")]
    File { path: PathBuf, line: usize, msg: String },
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("key `{key}` is ambiguous: {candidates}")]
    Ambiguous { key: String, candidates: String },
    #[error("bad override arguments: {0}")]
    Args(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("cannot read {0}: {1}")]
    Read(PathBuf, std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneJob {
    pub seed: u64,
    pub count: usize,
    pub extent: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Emit the floor/wall/boxes benchmark scene instead of a random box of Gaussians.
    pub standard: bool,
    pub out: PathBuf,
}

impl Default for SceneJob {
    fn default() -> Self {
        let s = rtgs_core::synth::SceneSpec::default();
        Self {
            seed: 0,
            count: s.count,
            extent: s.extent,
            scale_min: s.scale_min,
            scale_max: s.scale_max,
            standard: false,
            out: PathBuf::from("scene.gscene"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Orbit,
    Line,
}

/// Synthetic sequence description: the scene source, the camera path and the sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// GSCENE file to render; the standard scene with `scene_seed` when absent.
    pub scene: Option<PathBuf>,
    pub scene_seed: u64,
    pub trajectory: TrajectoryKind,
    pub frames: usize,
    pub orbit_radius: f64,
    pub orbit_height: f64,
    pub orbit_arc: f64,
    pub line_from: [f64; 3],
    pub line_to: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let s = SequenceSpec::default();
        let (radius, height, arc) = match s.trajectory {
            Trajectory::Orbit { radius, height, arc } => (radius, height, arc),
            Trajectory::Line { .. } => unreachable!("default trajectory is an orbit"),
        };
        Self {
            scene: None,
            scene_seed: 0,
            trajectory: TrajectoryKind::Orbit,
            frames: s.frames,
            orbit_radius: radius,
            orbit_height: height,
            orbit_arc: arc,
            line_from: [-0.5, -0.4, -3.0],
            line_to: [0.5, -0.4, -3.0],
            width: s.resolution.width,
            height: s.resolution.height,
            fx: s.intrinsics.fx,
            fy: s.intrinsics.fy,
            cx: s.intrinsics.cx,
            cy: s.intrinsics.cy,
            noise: s.noise,
            seed: s.seed,
        }
    }
}

impl GeneratorConfig {
    pub fn spec(&self) -> SequenceSpec {
        let trajectory = match self.trajectory {
            TrajectoryKind::Orbit => {
                Trajectory::Orbit { radius: self.orbit_radius, height: self.orbit_height, arc: self.orbit_arc }
            }
            TrajectoryKind::Line => Trajectory::Line { from: self.line_from, to: self.line_to },
        };
        SequenceSpec {
            frames: self.frames,
            resolution: Resolution::new(self.width, self.height),
            intrinsics: Intrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy },
            trajectory,
            noise: self.noise,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceJob {
    pub generator: GeneratorConfig,
    /// Output directory for the frames and `manifest.txt`.
    pub out: PathBuf,
}

impl Default for SequenceJob {
    fn default() -> Self {
        Self { generator: GeneratorConfig::default(), out: PathBuf::from("sequence") }
    }
}

/// Everything `run` needs; emitted verbatim into every output it writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunManifest {
    pub experiment: String,
    /// Sequence manifest to load; a sequence is generated from `generator` when absent.
    pub sequence: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub tracker: TrackerConfig,
    pub sim: SimConfig,
    /// Frames whose iterations are captured as work traces.
    pub trace_frames: Vec<usize>,
    pub export_traces: bool,
    pub simulate: bool,
    pub sweep: bool,
    /// Quality gate: exit code 3 when ATE-RMSE exceeds this.
    pub max_ate: Option<f64>,
    /// Quality gate: exit code 3 when mean keyframe PSNR falls below this.
    pub min_psnr: Option<f64>,
    pub out: PathBuf,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            experiment: "default".into(),
            sequence: None,
            generator: GeneratorConfig::default(),
            tracker: TrackerConfig::default(),
            sim: SimConfig::default(),
            trace_frames: vec![8, 9],
            export_traces: true,
            simulate: true,
            sweep: false,
            max_ate: None,
            min_psnr: None,
            out: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Standard,
    Clustered,
    Dense,
}

/// Input of `sim` and `sweep`: GTRACE files, or a built-in synthetic suite when none are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimJob {
    pub traces: Vec<PathBuf>,
    pub suite: Suite,
    /// Hot Gaussians per tile for the clustered suite.
    pub hot: usize,
    pub sim: SimConfig,
    pub out: PathBuf,
}

impl Default for SimJob {
    fn default() -> Self {
        Self { traces: Vec::new(), suite: Suite::Standard, hot: 32, sim: SimConfig::default(), out: PathBuf::from("sim") }
    }
}

/// Leaf paths of a JSON tree, dotted.
fn leaves(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(child, &p, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn resolve_key(tree: &Value, key: &str) -> Result<String, ConfigError> {
    let mut all = Vec::new();
    leaves(tree, "", &mut all);
    if all.iter().any(|p| p == key) {
        return Ok(key.to_string());
    }
    let suffix = format!(".{key}");
    let hits: Vec<&String> = all.iter().filter(|p| p.ends_with(&suffix)).collect();
    match hits.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(ConfigError::Unknown(key.to_string())),
        many => Err(ConfigError::Ambiguous {
            key: key.to_string(),
            candidates: many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "),
        }),
    }
}

/// JSON literal when it parses; comma-separated list for array fields (a lone
/// element included); string otherwise.
fn parse_value(raw: &str, current: &Value) -> Value {
    let raw = raw.trim();
    let parsed = serde_json::from_str::<Value>(raw).ok();
    if let Some(v) = parsed.as_ref().filter(|v| !current.is_array() || v.is_array()) {
        return v.clone();
    }
    if current.is_array() {
        return Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string())))
                .collect(),
        );
    }
    Value::String(raw.to_string())
}

fn set(tree: &mut Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let path = resolve_key(tree, key)?;
    let mut node = tree;
    for part in path.split('.') {
        node = node.get_mut(part).ok_or_else(|| ConfigError::Unknown(key.to_string()))?;
    }
    *node = parse_value(raw, node);
    Ok(())
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::File {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected `key = value`".into(),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `--key value` or `--key=value` pairs.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let body = a
            .strip_prefix("--")
            .ok_or_else(|| ConfigError::Args(format!("expected `--key value`, got `{a}`")))?;
        match body.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| ConfigError::Args(format!("`--{body}` needs a value")))?;
                out.push((body.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// Defaults, then the optional config file, then argument overrides.
pub fn resolve<J: Serialize + DeserializeOwned + Default>(
    config: Option<&Path>,
    overrides: &[String],
) -> Result<J, ConfigError> {
    let mut tree = serde_json::to_value(J::default()).map_err(|e| ConfigError::Value(e.to_string()))?;
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        for (line, k, v) in parse_config_file(&text, path)? {
            set(&mut tree, &k, &v).map_err(|e| ConfigError::File { path: path.to_path_buf(), line, msg: e.to_string() })?;
        }
    }
    for (k, v) in parse_override_args(overrides)? {
        set(&mut tree, &k, &v)?;
    }
    serde_json::from_value(tree).map_err(|e| ConfigError::Value(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(a: &[&str]) -> Vec<String> {
        a.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn suffix_keys_resolve_uniquely() {
        let m: RunManifest =
            resolve(None, &args(&["--prune_fraction_cap", "0.6", "--toggles.gmu=false", "--alpha_compute", "7"])).unwrap();
        assert_eq!(m.tracker.prune_fraction_cap, 0.6);
        assert!(!m.sim.toggles.gmu);
        assert_eq!(m.sim.latency.alpha_compute, 7);
    }

    #[test]
    fn ambiguous_and_unknown_keys_are_rejected() {
        assert!(matches!(resolve::<RunManifest>(None, &args(&["--width", "8"])), Err(ConfigError::Ambiguous { .. })));
        assert!(matches!(resolve::<RunManifest>(None, &args(&["--nope", "1"])), Err(ConfigError::Unknown(_))));
        assert!(matches!(resolve::<RunManifest>(None, &args(&["--pruning"])), Err(ConfigError::Args(_))));
        assert!(resolve::<RunManifest>(None, &args(&["--pruning", "maybe"])).is_err());
    }

    #[test]
    fn lists_strings_and_options() {
        let m: RunManifest = resolve(
            None,
            &args(&["--trace_frames", "1, 2,3", "--experiment", "abc", "--max_ate", "0.5", "--sequence", "a/b.txt"]),
        )
        .unwrap();
        assert_eq!(m.trace_frames, vec![1, 2, 3]);
        assert_eq!(m.experiment, "abc");
        assert_eq!(m.max_ate, Some(0.5));
        assert_eq!(m.sequence, Some(PathBuf::from("a/b.txt")));
        let j: SimJob = resolve(None, &args(&["--traces", "x.gtrace,y.gtrace", "--suite", "dense"])).unwrap();
        assert_eq!(j.traces.len(), 2);
        assert_eq!(j.suite, Suite::Dense);
        let one: RunManifest = resolve(None, &args(&["--trace_frames", "4"])).unwrap();
        assert_eq!(one.trace_frames, vec![4]);
        let json: RunManifest = resolve(None, &args(&["--trace_frames=[5, 6]"])).unwrap();
        assert_eq!(json.trace_frames, vec![5, 6]);
    }

    #[test]
    fn config_file_lines() {
        let parsed = parse_config_file("# c\n\nframes = 12  # trailing\n", Path::new("x")).unwrap();
        assert_eq!(parsed, vec![(3, "frames".into(), "12".into())]);
        assert!(parse_config_file("frames 12\n", Path::new("x")).is_err());
    }
}
