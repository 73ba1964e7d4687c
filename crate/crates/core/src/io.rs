//! Scene (`GSCENE v1`), frame (`GFRAME v1`) and sequence manifest formats.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::math::{Quat, Vec3};
use crate::scalar::Real;
use crate::scene::{CameraPose, ColorImage, DepthImage, FrameState, Gaussian3D, Intrinsics, Scene};
use crate::synth::Sequence;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Format(String),
}

fn parse_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { line, msg: msg.into() }
}

/// Writes the scene. Floats use the shortest representation that parses back
/// to the same value, so a write/read cycle is bit-exact. Readers skip body
/// lines starting with `#`.
pub fn write_scene<T: Real, W: Write>(scene: &Scene<T>, mut w: W) -> io::Result<()> {
    writeln!(w, "GSCENE v1 {}", scene.gaussians.len())?;
    for g in &scene.gaussians {
        let q = g.rotation;
        writeln!(
            w,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            g.id,
            g.mean.x,
            g.mean.y,
            g.mean.z,
            g.scale.x,
            g.scale.y,
            g.scale.z,
            q.w,
            q.x,
            q.y,
            q.z,
            g.opacity,
            g.color.x,
            g.color.y,
            g.color.z
        )?;
    }
    Ok(())
}

pub fn read_scene<T: Real, R: Read>(r: R) -> Result<Scene<T>, IoError> {
    let mut lines = BufReader::new(r).lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty file"))??;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 || h[0] != "GSCENE" || h[1] != "v1" {
        return Err(parse_err(1, format!("bad header {header:?}")));
    }
    let count: usize = h[2].parse().map_err(|_| parse_err(1, "bad count"))?;
    let mut gaussians = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 15 {
            return Err(parse_err(lineno, format!("expected 15 fields, got {}", f.len())));
        }
        let id: u32 = f[0].parse().map_err(|_| parse_err(lineno, "bad id"))?;
        let mut v = [T::zero(); 14];
        for (k, s) in f[1..].iter().enumerate() {
            v[k] = s.parse().map_err(|_| parse_err(lineno, format!("bad number {s:?}")))?;
        }
        let g = Gaussian3D::new(
            id,
            Vec3::new(v[0], v[1], v[2]),
            Vec3::new(v[3], v[4], v[5]),
            Quat::new(v[6], v[7], v[8], v[9]),
            v[10],
            Vec3::new(v[11], v[12], v[13]),
        );
        g.validate().map_err(|m| parse_err(lineno, m))?;
        gaussians.push(g);
    }
    if gaussians.len() != count {
        return Err(IoError::Format(format!("header says {count} gaussians, found {}", gaussians.len())));
    }
    Ok(Scene::new(gaussians))
}

pub fn save_scene<T: Real>(scene: &Scene<T>, path: &Path) -> Result<(), IoError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write_scene(scene, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_scene<T: Real>(path: &Path) -> Result<Scene<T>, IoError> {
    read_scene(fs::File::open(path)?)
}

fn quantize<T: Real>(v: T) -> u8 {
    let x = v.to_f64_lossy().clamp(0.0, 1.0);
    (x * 255.0).round() as u8
}

/// Writes color as 8-bit RGB rows followed by little-endian f32 depth.
pub fn write_frame<T: Real, W: Write>(color: &ColorImage<T>, depth: &DepthImage<T>, mut w: W) -> Result<(), IoError> {
    if (color.width, color.height) != (depth.width, depth.height) {
        return Err(IoError::Format("color and depth sizes differ".into()));
    }
    write!(w, "GFRAME v1 {} {}\n", color.width, color.height)?;
    let mut rgb = Vec::with_capacity(color.data.len() * 3);
    for p in &color.data {
        rgb.extend(p.iter().map(|c| quantize(*c)));
    }
    w.write_all(&rgb)?;
    let mut d = Vec::with_capacity(depth.data.len() * 4);
    for v in &depth.data {
        d.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    w.write_all(&d)?;
    Ok(())
}

pub fn read_frame<T: Real, R: Read>(r: R) -> Result<(ColorImage<T>, DepthImage<T>), IoError> {
    let mut r = BufReader::new(r);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 4 || h[0] != "GFRAME" || h[1] != "v1" {
        return Err(parse_err(1, format!("bad frame header {:?}", header.trim_end())));
    }
    let width: usize = h[2].parse().map_err(|_| parse_err(1, "bad width"))?;
    let height: usize = h[3].parse().map_err(|_| parse_err(1, "bad height"))?;
    let n = width * height;
    let mut rgb = vec![0u8; n * 3];
    r.read_exact(&mut rgb)?;
    let mut d = vec![0u8; n * 4];
    r.read_exact(&mut d)?;
    let scale = T::lit(1.0 / 255.0);
    let color = ColorImage {
        width,
        height,
        data: rgb
            .chunks_exact(3)
            .map(|c| [T::lit(c[0] as f64) * scale, T::lit(c[1] as f64) * scale, T::lit(c[2] as f64) * scale])
            .collect(),
    };
    let depth = DepthImage {
        width,
        height,
        data: d
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect(),
    };
    Ok((color, depth))
}

pub fn save_frame<T: Real>(color: &ColorImage<T>, depth: &DepthImage<T>, path: &Path) -> Result<(), IoError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write_frame(color, depth, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_frame<T: Real>(path: &Path) -> Result<(ColorImage<T>, DepthImage<T>), IoError> {
    read_frame(fs::File::open(path)?)
}

/// A sequence listing: camera intrinsics plus frame files with ground-truth poses.
///
/// ```text
/// intrinsics <fx> <fy> <cx> <cy>
/// frame <path> <qw> <qx> <qy> <qz> <tx> <ty> <tz>
/// ```
/// Relative paths resolve against the manifest's directory; `#` starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub intrinsics: Intrinsics<f64>,
    pub frames: Vec<(PathBuf, CameraPose<f64>)>,
}

impl Manifest {
    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        let k = &self.intrinsics;
        writeln!(w, "intrinsics {} {} {} {}", k.fx, k.fy, k.cx, k.cy)?;
        for (path, p) in &self.frames {
            let q = p.rotation;
            let t = p.translation;
            writeln!(
                w,
                "frame {} {} {} {} {} {} {} {}",
                path.display(),
                q.w,
                q.x,
                q.y,
                q.z,
                t.x,
                t.y,
                t.z
            )?;
        }
        Ok(())
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, IoError> {
        let mut intrinsics = None;
        let mut frames = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let nums = |s: &[&str]| -> Result<Vec<f64>, IoError> {
                s.iter()
                    .map(|v| v.parse::<f64>().map_err(|_| parse_err(lineno, format!("bad number {v:?}"))))
                    .collect()
            };
            match f[0] {
                "intrinsics" if f.len() == 5 => {
                    let v = nums(&f[1..])?;
                    if !(v[0] > 0.0 && v[1] > 0.0) {
                        return Err(parse_err(lineno, "focal lengths must be positive"));
                    }
                    intrinsics = Some(Intrinsics { fx: v[0], fy: v[1], cx: v[2], cy: v[3] });
                }
                "frame" if f.len() == 9 => {
                    let v = nums(&f[2..])?;
                    let path = Path::new(f[1]);
                    let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
                    let q = Quat::new(v[0], v[1], v[2], v[3]);
                    if (q.norm() - 1.0).abs() > 1e-6 {
                        return Err(parse_err(lineno, "pose quaternion is not unit"));
                    }
                    frames.push((path, q, Vec3::new(v[4], v[5], v[6])));
                }
                other => return Err(parse_err(lineno, format!("unrecognized line {other:?}"))),
            }
        }
        let intrinsics = intrinsics.ok_or_else(|| IoError::Format("manifest has no intrinsics line".into()))?;
        let frames = frames
            .into_iter()
            .map(|(p, q, t)| (p, CameraPose::new(q, t, intrinsics)))
            .collect();
        Ok(Self { intrinsics, frames })
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Writes `frame_NNNN.gframe` files and `manifest.txt` (ground-truth poses)
/// into `dir`, prefixing the manifest with `header` as `#` comment lines.
pub fn save_sequence(seq: &Sequence, dir: &Path, header: &str) -> Result<PathBuf, IoError> {
    fs::create_dir_all(dir)?;
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (f, gt) in seq.frames.iter().zip(&seq.ground_truth) {
        let name = PathBuf::from(format!("frame_{:04}.gframe", f.frame_index));
        save_frame(&f.observed_color, &f.observed_depth, &dir.join(&name))?;
        frames.push((name, *gt));
    }
    let path = dir.join("manifest.txt");
    let mut w = io::BufWriter::new(fs::File::create(&path)?);
    for line in header.lines() {
        writeln!(w, "# {line}")?;
    }
    Manifest { intrinsics: seq.intrinsics, frames }.write(&mut w)?;
    w.flush()?;
    Ok(path)
}

/// Loads every frame a manifest lists; the listed poses become the ground truth.
pub fn load_sequence(path: &Path) -> Result<Sequence, IoError> {
    let m = Manifest::load(path)?;
    let mut frames: Vec<FrameState<f64>> = Vec::with_capacity(m.frames.len());
    for (i, (file, pose)) in m.frames.iter().enumerate() {
        let (color, depth) = load_frame(file)?;
        if let Some(first) = frames.first() {
            if (color.width, color.height) != (first.native.width, first.native.height) {
                return Err(IoError::Format(format!("{} has a different resolution", file.display())));
            }
        }
        frames.push(FrameState::new(i, i == 0, color, depth, *pose));
    }
    let native = frames.first().map(|f| f.native).ok_or_else(|| IoError::Format("manifest lists no frames".into()))?;
    Ok(Sequence { native, intrinsics: m.intrinsics, ground_truth: m.frames.iter().map(|f| f.1).collect(), frames })
}
