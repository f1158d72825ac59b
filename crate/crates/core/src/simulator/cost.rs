use serde::{Deserialize, Serialize};

use crate::planner::TransferPlan;
use crate::topology::{ModelSpec, ParallelConfig, RankId};

/// Latency and bandwidth constants behind every simulated duration.
///
/// Bandwidth units follow their usual vendor quoting: interconnect and
/// aggregate storage in gigabytes per second, per-GPU storage in gigabits per
/// second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Sustained training FLOP/s per GPU.
    pub gpu_flops: f64,
    pub tokens_per_iteration: f64,
    pub gpus_per_node: u32,
    pub intra_node_gbytes_per_s: f64,
    pub inter_node_gbytes_per_s: f64,
    /// Multiplier on both interconnect bandwidths (1.0 = nominal).
    pub link_derate: f64,
    pub storage_gbits_per_s_per_gpu: f64,
    /// Ceiling of the shared checkpoint store across all readers.
    pub aggregate_storage_gbytes_per_s: f64,
    /// Fraction of the full load time a load-time resharding checkpoint pays.
    pub reshape_load_factor: f64,
    pub process_spawn_s: f64,
    pub tcp_bootstrap_s: f64,
    pub discovery_base_s: f64,
    pub discovery_per_rank_s: f64,
    pub communicator_base_s: f64,
    pub communicator_per_rank_s: f64,
    /// Model construction, JIT and autotune on one cold rank.
    pub warmup_base_s: f64,
    pub warmup_per_gparam_s: f64,
    /// Metadata-only plan computation on the controller.
    pub plan_s: f64,
    pub misc_restart_s: f64,
    pub drain_s: f64,
    pub swap_s: f64,
    /// Per-layer barrier and launch overhead of the streaming transfer.
    pub layer_sync_s: f64,
    pub communicator_metadata_bytes: u64,
    /// Relative iteration slowdown while a shadow world is being prepared.
    pub interference_factor: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            gpu_flops: 80e12,
            tokens_per_iteration: 262_144.0,
            gpus_per_node: 8,
            intra_node_gbytes_per_s: 24.0,
            inter_node_gbytes_per_s: 24.0,
            link_derate: 1.0,
            storage_gbits_per_s_per_gpu: 2.92,
            aggregate_storage_gbytes_per_s: 64.0,
            reshape_load_factor: 0.45,
            process_spawn_s: 12.0,
            tcp_bootstrap_s: 2.0,
            discovery_base_s: 3.0,
            discovery_per_rank_s: 0.06,
            communicator_base_s: 4.0,
            communicator_per_rank_s: 0.06,
            warmup_base_s: 5.4,
            warmup_per_gparam_s: 2.0,
            plan_s: 0.5,
            misc_restart_s: 2.4,
            drain_s: 0.6,
            swap_s: 0.4,
            layer_sync_s: 0.05,
            communicator_metadata_bytes: 64 << 20,
            interference_factor: 0.003,
        }
    }
}

/// Which checks a cost model fails.
pub fn check_cost_model(cm: &CostModel) -> Vec<String> {
    let mut bad = Vec::new();
    let positive = [
        ("gpu_flops", cm.gpu_flops),
        ("tokens_per_iteration", cm.tokens_per_iteration),
        ("intra_node_gbytes_per_s", cm.intra_node_gbytes_per_s),
        ("inter_node_gbytes_per_s", cm.inter_node_gbytes_per_s),
        ("link_derate", cm.link_derate),
        ("storage_gbits_per_s_per_gpu", cm.storage_gbits_per_s_per_gpu),
        ("aggregate_storage_gbytes_per_s", cm.aggregate_storage_gbytes_per_s),
    ];
    for (name, v) in positive {
        if v.is_nan() || v <= 0.0 {
            bad.push(format!("{name} must be positive, got {v}"));
        }
    }
    let non_negative = [
        ("reshape_load_factor", cm.reshape_load_factor),
        ("process_spawn_s", cm.process_spawn_s),
        ("tcp_bootstrap_s", cm.tcp_bootstrap_s),
        ("discovery_base_s", cm.discovery_base_s),
        ("discovery_per_rank_s", cm.discovery_per_rank_s),
        ("communicator_base_s", cm.communicator_base_s),
        ("communicator_per_rank_s", cm.communicator_per_rank_s),
        ("warmup_base_s", cm.warmup_base_s),
        ("warmup_per_gparam_s", cm.warmup_per_gparam_s),
        ("plan_s", cm.plan_s),
        ("misc_restart_s", cm.misc_restart_s),
        ("drain_s", cm.drain_s),
        ("swap_s", cm.swap_s),
        ("layer_sync_s", cm.layer_sync_s),
        ("interference_factor", cm.interference_factor),
    ];
    for (name, v) in non_negative {
        if v.is_nan() || v < 0.0 || v.is_infinite() {
            bad.push(format!("{name} must be a finite non-negative number, got {v}"));
        }
    }
    if cm.gpus_per_node == 0 {
        bad.push("gpus_per_node must be positive".into());
    }
    bad
}

impl CostModel {
    /// Seconds per training iteration: 6 FLOPs per parameter per token
    /// spread over every GPU of the configuration.
    pub fn iteration_time_s(&self, config: &ParallelConfig, model: &ModelSpec) -> f64 {
        let flops = 6.0 * model.parameter_elements() as f64 * self.tokens_per_iteration;
        flops / (config.world_size() as f64 * self.gpu_flops)
    }

    pub fn prepare_iteration_time_s(&self, config: &ParallelConfig, model: &ModelSpec) -> f64 {
        self.iteration_time_s(config, model) * (1.0 + self.interference_factor)
    }

    pub fn discovery_s(&self, world: usize) -> f64 {
        self.discovery_base_s + self.discovery_per_rank_s * world as f64
    }

    pub fn communicator_s(&self, world: usize) -> f64 {
        self.communicator_base_s + self.communicator_per_rank_s * world as f64
    }

    /// Cold-rank warmup for one rank of `model`.
    pub fn warmup_s(&self, model: &ModelSpec) -> f64 {
        self.warmup_base_s + self.warmup_per_gparam_s * model.parameter_elements() as f64 / 1e9
    }

    fn node_of(&self, rank: RankId) -> u32 {
        rank / self.gpus_per_node.max(1)
    }

    /// Effective bytes per second between two ranks.
    pub fn link_bytes_per_s(&self, src: RankId, dst: RankId) -> f64 {
        let gb = if self.node_of(src) == self.node_of(dst) {
            self.intra_node_gbytes_per_s
        } else {
            self.inter_node_gbytes_per_s
        };
        gb * 1e9 * self.link_derate
    }

    /// Layer-serialized transfer time of `plan`: each layer costs a fixed
    /// sync plus its slowest link. Byte counts in the plan are element
    /// widths; `state_scale` converts them to full state bytes.
    pub fn transfer_time_s(&self, plan: &TransferPlan, state_scale: f64) -> f64 {
        let mut total = 0.0;
        for &layer in plan.tasks_by_layer.keys() {
            let links = plan.layer_link_bytes(layer);
            if links.is_empty() {
                continue;
            }
            let slowest = links
                .iter()
                .map(|(&(s, d), &b)| b as f64 * state_scale / self.link_bytes_per_s(s, d))
                .fold(0.0, f64::max);
            total += self.layer_sync_s + slowest;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::TensorSpec;

    #[test]
    fn iteration_time_scales_inversely_with_world() {
        let cm = CostModel::default();
        let m = ModelSpec {
            num_layers: 1,
            tensors: vec![TensorSpec::new("w", 0, vec![1000, 1000], Some(0))],
            bytes_per_element: 2,
            state_multiplier: 16.0,
        };
        let a = cm.iteration_time_s(&ParallelConfig::contiguous(0, 1, 1, 8, 0, 1), &m);
        let b = cm.iteration_time_s(&ParallelConfig::contiguous(0, 1, 1, 16, 0, 1), &m);
        assert!((a - 2.0 * b).abs() < 1e-12);
        let want = 6.0 * 1e6 * cm.tokens_per_iteration / (8.0 * cm.gpu_flops);
        assert!((a - want).abs() < 1e-12);
    }

    #[test]
    fn interference_is_exact_multiplier() {
        let mut cm = CostModel::default();
        let m = ModelSpec {
            num_layers: 1,
            tensors: vec![TensorSpec::new("w", 0, vec![64], None)],
            bytes_per_element: 2,
            state_multiplier: 16.0,
        };
        let c = ParallelConfig::contiguous(0, 1, 1, 2, 0, 1);
        let base = cm.iteration_time_s(&c, &m);
        assert_eq!(cm.prepare_iteration_time_s(&c, &m), base * 1.003);
        cm.interference_factor = 0.0;
        assert_eq!(cm.prepare_iteration_time_s(&c, &m), base);
    }

    #[test]
    fn link_classes_follow_nodes() {
        let cm = CostModel {
            intra_node_gbytes_per_s: 10.0,
            inter_node_gbytes_per_s: 2.0,
            ..CostModel::default()
        };
        assert_eq!(cm.link_bytes_per_s(0, 7), 10e9);
        assert_eq!(cm.link_bytes_per_s(7, 8), 2e9);
    }

    #[test]
    fn defaults_pass_checks() {
        assert!(check_cost_model(&CostModel::default()).is_empty());
        let bad = CostModel {
            drain_s: -1.0,
            inter_node_gbytes_per_s: 0.0,
            ..CostModel::default()
        };
        assert_eq!(check_cost_model(&bad).len(), 2);
    }
}
