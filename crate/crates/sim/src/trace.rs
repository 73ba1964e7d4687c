use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Read, Write};

use rtgs_core::raster::RenderRecord;
use rtgs_core::scene::{Resolution, TileLayout, SUBTILES_PER_TILE_SIDE};
use rtgs_core::slam::Stage;
use rtgs_core::Real;
use serde::{Deserialize, Serialize};

use crate::{SimError, SUBTILE_PIXELS};

/// One gradient contribution produced by an RE's backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub id: u32,
    pub value: f64,
}

/// Work of one subtile in one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtileTrace {
    pub id: usize,
    /// Fragments composited per pixel (after early termination), row-major within the subtile.
    pub counts: [u32; SUBTILE_PIXELS],
    /// Gaussian ids per pixel in depth order.
    pub fragments: Vec<Vec<u32>>,
    /// Pixel-level Gaussian gradients in the order the RE emits them.
    pub grads: Vec<GradEntry>,
}

impl SubtileTrace {
    pub fn total_fragments(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub stage: Stage,
    /// Gaussians reaching preprocessing BP.
    pub gaussians: usize,
    /// In processing order (tile-major, see [`processing_order`]).
    pub subtiles: Vec<SubtileTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkTrace {
    pub frame_id: usize,
    pub is_keyframe: bool,
    pub width: usize,
    pub height: usize,
    pub iterations: Vec<IterationTrace>,
}

/// Subtile ids tile by tile, row-major inside each tile, so one wave of 16 REs
/// covers one tile.
pub fn processing_order(layout: &TileLayout) -> Vec<usize> {
    let sx = layout.subtiles_x();
    let mut out = Vec::with_capacity(layout.num_subtiles());
    for ty in 0..layout.tiles_y() {
        for tx in 0..layout.tiles_x() {
            for j in 0..SUBTILES_PER_TILE_SIDE {
                for i in 0..SUBTILES_PER_TILE_SIDE {
                    out.push((ty * SUBTILES_PER_TILE_SIDE + j) * sx + tx * SUBTILES_PER_TILE_SIDE + i);
                }
            }
        }
    }
    out
}

/// Pixel-level gradient stream of one RE: back to front in tile depth order
/// (`depth_of`, ties by id), and for each Gaussian every pixel it touches in
/// pixel order.
pub fn grad_stream(fragments: &[Vec<u32>], weights: &[Vec<f64>], depth_of: impl Fn(u32) -> f64) -> Vec<GradEntry> {
    let mut out: Vec<(f64, u32, usize, f64)> = Vec::new();
    for (p, (ids, ws)) in fragments.iter().zip(weights).enumerate() {
        for (&id, &w) in ids.iter().zip(ws) {
            out.push((depth_of(id), id, p, w));
        }
    }
    out.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    out.into_iter().map(|(_, id, _, value)| GradEntry { id, value }).collect()
}

impl IterationTrace {
    /// Captures one render iteration. Gradient payloads are the fragments' blend weights `T·α`.
    pub fn from_record<T: Real>(record: &RenderRecord<T>, stage: Stage, gaussians: usize) -> Self {
        let layout = record.layout;
        let subtiles = processing_order(&layout)
            .into_iter()
            .map(|id| {
                let mut counts = [0u32; SUBTILE_PIXELS];
                let mut fragments = vec![Vec::new(); SUBTILE_PIXELS];
                let mut weights = vec![Vec::new(); SUBTILE_PIXELS];
                let mut rank: BTreeMap<u32, usize> = BTreeMap::new();
                for (p, px) in layout.subtile_pixels(id).iter().enumerate() {
                    if let Some((x, y)) = *px {
                        let log = record.log(x, y);
                        counts[p] = log.n_contrib() as u32;
                        fragments[p] = log.entries.iter().map(|e| e.gaussian_id).collect();
                        let tile = &record.sorted.per_tile[layout.tile_of(x, y)];
                        for e in &log.entries {
                            rank.entry(e.gaussian_id)
                                .or_insert_with(|| tile.iter().position(|&s| s == e.splat).unwrap_or(usize::MAX));
                        }
                        weights[p] = log
                            .entries
                            .iter()
                            .map(|e| (e.transmittance * e.alpha).to_f64().unwrap_or(0.0))
                            .collect();
                    }
                }
                let grads = grad_stream(&fragments, &weights, |g| rank[&g] as f64);
                SubtileTrace { id, counts, fragments, grads }
            })
            .collect();
        Self { stage, gaussians, subtiles }
    }

    pub fn total_fragments(&self) -> u64 {
        self.subtiles.iter().map(SubtileTrace::total_fragments).sum()
    }
}

impl WorkTrace {
    pub fn new(frame_id: usize, is_keyframe: bool, res: Resolution) -> Self {
        Self { frame_id, is_keyframe, width: res.width, height: res.height, iterations: Vec::new() }
    }

    pub fn layout(&self) -> TileLayout {
        TileLayout::new(Resolution::new(self.width, self.height))
    }

    pub fn total_fragments(&self) -> u64 {
        self.iterations.iter().map(IterationTrace::total_fragments).sum()
    }

    /// Mean fragments per in-frame pixel over all iterations.
    pub fn mean_fragments_per_pixel(&self) -> f64 {
        let px = (self.width * self.height * self.iterations.len()).max(1);
        self.total_fragments() as f64 / px as f64
    }

    /// Checks every iteration against `layout`: each subtile exactly once, counts
    /// matching the streams, nothing outside the frame.
    pub fn validate(&self, layout: &TileLayout) -> Result<(), SimError> {
        if layout.width != self.width || layout.height != self.height {
            return Err(SimError::Mismatch(format!(
                "trace is {}x{}, layout is {}x{}",
                self.width, self.height, layout.width, layout.height
            )));
        }
        for (i, it) in self.iterations.iter().enumerate() {
            let mut seen = vec![false; layout.num_subtiles()];
            for st in &it.subtiles {
                let slot = seen
                    .get_mut(st.id)
                    .ok_or_else(|| SimError::Mismatch(format!("iteration {i}: subtile {} out of range", st.id)))?;
                if std::mem::replace(slot, true) {
                    return Err(SimError::Mismatch(format!("iteration {i}: subtile {} repeated", st.id)));
                }
                if st.fragments.len() != SUBTILE_PIXELS {
                    return Err(SimError::Mismatch(format!("iteration {i}: subtile {} lacks 16 streams", st.id)));
                }
                let pixels = layout.subtile_pixels(st.id);
                for p in 0..SUBTILE_PIXELS {
                    if st.fragments[p].len() != st.counts[p] as usize {
                        return Err(SimError::Mismatch(format!(
                            "iteration {i}: subtile {} pixel {p} count {} but {} ids",
                            st.id,
                            st.counts[p],
                            st.fragments[p].len()
                        )));
                    }
                    if pixels[p].is_none() && st.counts[p] != 0 {
                        return Err(SimError::Mismatch(format!(
                            "iteration {i}: subtile {} pixel {p} lies outside the frame",
                            st.id
                        )));
                    }
                }
                let mut touched: Vec<u32> = st.fragments.iter().flatten().copied().collect();
                touched.sort_unstable();
                let mut emitted: Vec<u32> = st.grads.iter().map(|g| g.id).collect();
                emitted.sort_unstable();
                if touched != emitted {
                    return Err(SimError::Mismatch(format!(
                        "iteration {i}: subtile {} gradient ids differ from its fragment ids",
                        st.id
                    )));
                }
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(SimError::Mismatch(format!("iteration {i}: subtile {missing} missing")));
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "GTRACE v1 {} {} {} {} {}",
            self.width,
            self.height,
            self.frame_id,
            self.is_keyframe as u8,
            self.iterations.len()
        )?;
        for (i, it) in self.iterations.iter().enumerate() {
            let stage = match it.stage {
                Stage::Tracking => "tracking",
                Stage::Mapping => "mapping",
            };
            writeln!(w, "iteration {i} {stage} {} {}", it.gaussians, it.subtiles.len())?;
            for st in &it.subtiles {
                write!(w, "subtile {} counts", st.id)?;
                for c in st.counts {
                    write!(w, " {c}")?;
                }
                writeln!(w)?;
                for ids in &st.fragments {
                    write_joined(&mut w, ids.iter())?;
                }
            }
            writeln!(w, "grads")?;
            for st in &it.subtiles {
                writeln!(w, "subtile {} grads {}", st.id, st.grads.len())?;
                write_joined(&mut w, st.grads.iter().map(|g| format!("{}:{}", g.id, g.value)))?;
            }
        }
        Ok(())
    }

    /// Parses a trace written by [`WorkTrace::write`]; lines starting with `#` are skipped.
    pub fn read<R: Read>(r: R) -> Result<Self, SimError> {
        let mut lines = BufReader::new(r).lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String), SimError> {
            loop {
                match lines.next() {
                    Some((_, Ok(l))) if l.starts_with('#') => continue,
                    Some((n, Ok(l))) => return Ok((n + 1, l)),
                    Some((n, Err(e))) => return Err(SimError::Parse { line: n + 1, msg: e.to_string() }),
                    None => {
                        return Err(SimError::Parse { line: 0, msg: format!("unexpected end of trace, expected {what}") })
                    }
                }
            }
        };
        let (n, header) = next("header")?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 7 || h[0] != "GTRACE" || h[1] != "v1" {
            return Err(SimError::Parse { line: n, msg: "expected `GTRACE v1 <w> <h> <frame> <kf> <iterations>`".into() });
        }
        let width = num(h[2], n)?;
        let height = num(h[3], n)?;
        let frame_id = num(h[4], n)?;
        let is_keyframe = num::<u8>(h[5], n)? != 0;
        let iterations: usize = num(h[6], n)?;
        let mut trace = Self { frame_id, is_keyframe, width, height, iterations: Vec::with_capacity(iterations) };
        for _ in 0..iterations {
            let (n, l) = next("iteration")?;
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 5 || t[0] != "iteration" {
                return Err(SimError::Parse { line: n, msg: "expected `iteration <i> <stage> <gaussians> <subtiles>`".into() });
            }
            let stage = match t[2] {
                "tracking" => Stage::Tracking,
                "mapping" => Stage::Mapping,
                s => return Err(SimError::Parse { line: n, msg: format!("unknown stage {s}") }),
            };
            let gaussians = num(t[3], n)?;
            let count: usize = num(t[4], n)?;
            let mut subtiles = Vec::with_capacity(count);
            for _ in 0..count {
                let (n, l) = next("subtile")?;
                let t: Vec<&str> = l.split_whitespace().collect();
                if t.len() != 3 + SUBTILE_PIXELS || t[0] != "subtile" || t[2] != "counts" {
                    return Err(SimError::Parse { line: n, msg: "expected `subtile <id> counts <16 ints>`".into() });
                }
                let id = num(t[1], n)?;
                let mut counts = [0u32; SUBTILE_PIXELS];
                for (c, s) in counts.iter_mut().zip(&t[3..]) {
                    *c = num(s, n)?;
                }
                let mut fragments = Vec::with_capacity(SUBTILE_PIXELS);
                for _ in 0..SUBTILE_PIXELS {
                    let (n, l) = next("fragment stream")?;
                    fragments.push(l.split_whitespace().map(|s| num(s, n)).collect::<Result<Vec<u32>, _>>()?);
                }
                subtiles.push(SubtileTrace { id, counts, fragments, grads: Vec::new() });
            }
            let (n, l) = next("grads")?;
            if l.trim() != "grads" {
                return Err(SimError::Parse { line: n, msg: "expected `grads`".into() });
            }
            for st in subtiles.iter_mut() {
                let (n, l) = next("grads header")?;
                let t: Vec<&str> = l.split_whitespace().collect();
                if t.len() != 4 || t[0] != "subtile" || t[2] != "grads" || num::<usize>(t[1], n)? != st.id {
                    return Err(SimError::Parse { line: n, msg: format!("expected `subtile {} grads <n>`", st.id) });
                }
                let len: usize = num(t[3], n)?;
                let (n, l) = next("grad stream")?;
                st.grads = l
                    .split_whitespace()
                    .map(|tok| {
                        let (id, v) = tok
                            .split_once(':')
                            .ok_or_else(|| SimError::Parse { line: n, msg: format!("bad gradient `{tok}`") })?;
                        Ok(GradEntry { id: num(id, n)?, value: num(v, n)? })
                    })
                    .collect::<Result<_, SimError>>()?;
                if st.grads.len() != len {
                    return Err(SimError::Parse { line: n, msg: format!("expected {len} gradients") });
                }
            }
            trace.iterations.push(IterationTrace { stage, gaussians, subtiles });
        }
        Ok(trace)
    }
}

fn write_joined<W: Write, D: std::fmt::Display>(w: &mut W, items: impl Iterator<Item = D>) -> io::Result<()> {
    let mut first = true;
    for it in items {
        if !first {
            w.write_all(b" ")?;
        }
        write!(w, "{it}")?;
        first = false;
    }
    writeln!(w)
}

fn num<N: std::str::FromStr>(s: &str, line: usize) -> Result<N, SimError> {
    s.parse().map_err(|_| SimError::Parse { line, msg: format!("bad number `{s}`") })
}
