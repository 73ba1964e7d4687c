use serde::{Deserialize, Serialize};

use crate::SimError;

/// Stage latencies in cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub alpha_compute: u64,
    pub alpha_blend: u64,
    pub bp_alpha_grad_baseline: u64,
    pub bp_alpha_grad_reused: u64,
    pub bp_cov_pos_grad: u64,
    /// Per level of the GMU reduction trees.
    pub gmu_adder_stage: u64,
    /// Same-address adds committed per cycle in atomic mode.
    pub atomic_commits_per_cycle: u64,
    pub pbc: u64,
    /// Per level of the pose Merging Tree.
    pub merge_tree_stage: u64,
    /// Cost of writing back a live Stage Buffer entry that is still needed.
    pub stage_buffer_writeback: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            alpha_compute: 12,
            alpha_blend: 3,
            bp_alpha_grad_baseline: 20,
            bp_alpha_grad_reused: 4,
            bp_cov_pos_grad: 8,
            gmu_adder_stage: 1,
            atomic_commits_per_cycle: 1,
            pbc: 8,
            merge_tree_stage: 1,
            stage_buffer_writeback: 1,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let all = [
            self.alpha_compute,
            self.alpha_blend,
            self.bp_alpha_grad_baseline,
            self.bp_alpha_grad_reused,
            self.bp_cov_pos_grad,
            self.gmu_adder_stage,
            self.atomic_commits_per_cycle,
            self.pbc,
            self.merge_tree_stage,
            self.stage_buffer_writeback,
        ];
        if all.contains(&0) {
            return Err(SimError::Config("latencies must be positive".into()));
        }
        if self.bp_alpha_grad_reused >= self.bp_alpha_grad_baseline {
            return Err(SimError::Config("reused alpha-gradient latency must beat the baseline".into()));
        }
        Ok(())
    }
}

/// The four architectural features that the ablation sweep toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    /// REs pull the next subtile as soon as they finish.
    pub streaming: bool,
    /// WSU heavy/light pairing with shared issue slots.
    pub pairing: bool,
    /// R&B buffer reuse in the alpha-gradient stage.
    pub reuse_rb: bool,
    /// GMU clustered reduction instead of atomic adds.
    pub gmu: bool,
}

impl Toggles {
    pub const NONE: Self = Self { streaming: false, pairing: false, reuse_rb: false, gmu: false };
    pub const ALL: Self = Self { streaming: true, pairing: true, reuse_rb: true, gmu: true };

    pub fn to_bits(self) -> u8 {
        self.streaming as u8 | (self.pairing as u8) << 1 | (self.reuse_rb as u8) << 2 | (self.gmu as u8) << 3
    }

    pub fn from_bits(b: u8) -> Self {
        Self { streaming: b & 1 != 0, pairing: b & 2 != 0, reuse_rb: b & 4 != 0, gmu: b & 8 != 0 }
    }

    /// All 16 combinations in bit order.
    pub fn all_combinations() -> Vec<Self> {
        (0..16).map(Self::from_bits).collect()
    }

    pub fn count(self) -> u32 {
        self.to_bits().count_ones()
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub latency: LatencyModel,
    pub toggles: Toggles,
    pub num_res: usize,
    pub lanes_per_re: usize,
    pub gmu_groups: usize,
    pub stage_buffer_capacity: usize,
    /// Live entries whose next use is further than this many cycles ahead may be evicted.
    pub eviction_lookahead: usize,
    pub num_pes: usize,
    /// Cycles a blocking status check waits before reporting a timeout.
    pub status_timeout_cycles: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            latency: LatencyModel::default(),
            toggles: Toggles::ALL,
            num_res: 16,
            lanes_per_re: 8,
            gmu_groups: 4,
            stage_buffer_capacity: 256,
            eviction_lookahead: 16,
            num_pes: 16,
            status_timeout_cycles: 1_000_000,
        }
    }
}

impl SimConfig {
    pub fn with_toggles(mut self, toggles: Toggles) -> Self {
        self.toggles = toggles;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.latency.validate()?;
        if self.lanes_per_re * 2 != crate::SUBTILE_PIXELS {
            return Err(SimError::Config("each RE lane serves exactly two subtile pixels".into()));
        }
        if self.num_res == 0 || self.num_pes == 0 || self.stage_buffer_capacity == 0 {
            return Err(SimError::Config("num_res, num_pes and stage_buffer_capacity must be positive".into()));
        }
        if self.gmu_groups == 0 || self.num_res % self.gmu_groups != 0 {
            return Err(SimError::Config("gmu_groups must divide num_res".into()));
        }
        Ok(())
    }

    /// Levels of each group's reduction tree, fed by every pixel lane of its REs.
    pub fn group_tree_depth(&self) -> u64 {
        ceil_log2(self.num_res / self.gmu_groups * crate::SUBTILE_PIXELS)
    }

    /// Levels of the cross-group combine in front of the Stage Buffer.
    pub fn combine_depth(&self) -> u64 {
        ceil_log2(self.gmu_groups)
    }
}

pub fn ceil_log2(n: usize) -> u64 {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as u64
    }
}
