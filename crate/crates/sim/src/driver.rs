use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::report::{simulate_trace, CycleReport};
use crate::trace::WorkTrace;
use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriverStatus {
    Idle,
    Executing,
    WaitPruning,
}

/// Host-facing plug-in model: one frame in flight, a simulated clock, and the
/// IDLE → EXECUTING → (WAIT_PRUNING) → IDLE protocol.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimConfig,
    clock: u64,
    status: DriverStatus,
    in_flight: Option<(usize, bool)>,
    done_at: u64,
    reports: Vec<CycleReport>,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        Ok(Self { cfg, clock: 0, status: DriverStatus::Idle, in_flight: None, done_at: 0, reports: Vec::new() })
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn reports(&self) -> &[CycleReport] {
        &self.reports
    }

    /// Moves simulated time forward.
    pub fn advance(&mut self, cycles: u64) {
        self.clock += cycles;
        self.refresh();
    }

    fn refresh(&mut self) {
        if self.status == DriverStatus::Executing && self.clock >= self.done_at {
            let (_, keyframe) = self.in_flight.expect("executing frame");
            if keyframe {
                self.status = DriverStatus::Idle;
                self.in_flight = None;
            } else {
                self.status = DriverStatus::WaitPruning;
            }
        }
    }

    /// Starts a frame. Keyframes skip the pruning handshake.
    pub fn execute(&mut self, frame_id: usize, is_keyframe: bool, trace: &WorkTrace) -> Result<&CycleReport, SimError> {
        self.refresh();
        if self.status != DriverStatus::Idle {
            return Err(SimError::Protocol(format!("execute({frame_id}) while {:?}", self.status)));
        }
        if trace.frame_id != frame_id || trace.is_keyframe != is_keyframe {
            return Err(SimError::Protocol(format!(
                "trace is frame {} (keyframe {}), execute asked for frame {frame_id} (keyframe {is_keyframe})",
                trace.frame_id, trace.is_keyframe
            )));
        }
        let report = simulate_trace(trace, &self.cfg)?.report;
        self.done_at = self.clock + report.total_cycles;
        self.status = DriverStatus::Executing;
        self.in_flight = Some((frame_id, is_keyframe));
        self.reports.push(report);
        self.refresh();
        Ok(self.reports.last().expect("just pushed"))
    }

    /// Current status for `frame_id`. Blocking waits for execution to finish and
    /// then up to `status_timeout_cycles` for the pruning acknowledgment.
    pub fn check_status(&mut self, frame_id: usize, blocking: bool) -> Result<DriverStatus, SimError> {
        self.refresh();
        if let Some((f, _)) = self.in_flight {
            if f != frame_id {
                return Err(SimError::Protocol(format!("status of frame {frame_id} requested, frame {f} in flight")));
            }
        }
        if !blocking {
            return Ok(self.status);
        }
        if self.status == DriverStatus::Executing {
            self.clock = self.done_at;
            self.refresh();
        }
        if self.status == DriverStatus::WaitPruning {
            self.clock += self.cfg.status_timeout_cycles;
            return Err(SimError::Timeout {
                frame: frame_id,
                waited: self.cfg.status_timeout_cycles,
                detail: "frame finished but the host has not acknowledged pruning".into(),
            });
        }
        Ok(self.status)
    }

    /// Host signals that pruning for the in-flight non-keyframe is done.
    pub fn acknowledge_pruning(&mut self, frame_id: usize) -> Result<(), SimError> {
        self.refresh();
        match (self.status, self.in_flight) {
            (DriverStatus::WaitPruning, Some((f, _))) if f == frame_id => {
                self.status = DriverStatus::Idle;
                self.in_flight = None;
                Ok(())
            }
            (s, _) => Err(SimError::Protocol(format!("pruning acknowledged for frame {frame_id} while {s:?}"))),
        }
    }
}
