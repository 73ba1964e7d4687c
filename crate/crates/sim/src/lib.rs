//! Trace-driven, cycle-approximate model of a Gaussian-splatting SLAM
//! accelerator: 16 rendering engines with pairwise workload scheduling and
//! subtile streaming, R&B buffer reuse in the backward pass, a gradient merging
//! unit with a Stage Buffer versus atomic adds, and preprocessing engines with
//! a pose Merging Tree.
//!
//! Timing comes only from fragment and gradient-id traces; gradient values
//! pass through the merge model purely to check that both merge modes agree.

pub mod config;
pub mod driver;
pub mod merge;
pub mod render;
pub mod report;
pub mod sweep;
pub mod synth;
pub mod trace;

pub use config::{LatencyModel, SimConfig, Toggles};
pub use driver::{DriverStatus, Simulator};
pub use report::{simulate_trace, with_speedups, CycleReport};
pub use trace::WorkTrace;

pub const SUBTILE_PIXELS: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("trace/layout mismatch: {0}")]
    Mismatch(String),
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("frame {frame}: timed out after {waited} cycles: {detail}")]
    Timeout { frame: usize, waited: u64, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
