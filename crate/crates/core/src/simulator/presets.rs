//! Synthetic GPT-style models and the reference transitions used by the
//! downtime comparisons.

use super::{Layout, RegimeSpec};
use crate::topology::{ModelSpec, ParallelConfig, TensorSpec};

/// Nominal size label, nominal parameter count and layer count.
pub const GPT_SIZES: [(&str, f64, usize); 6] = [
    ("1.7b", 1.7e9, 24),
    ("7b", 7e9, 32),
    ("14b", 14e9, 40),
    ("20b", 20e9, 44),
    ("30b", 30e9, 48),
    ("70b", 70e9, 80),
];

/// Hidden width for `params` spread over `layers` transformer blocks,
/// rounded to a multiple of 128.
pub fn hidden_size(params: f64, layers: usize) -> u64 {
    let h = (params / (12.0 * layers as f64)).sqrt();
    ((h / 128.0).round() as u64).max(1) * 128
}

/// One transformer block per layer: fused qkv and the MLP up-projection split
/// by rows, the attention output and MLP down-projection split by columns,
/// and two replicated norm vectors. 2-byte elements, 16 state bytes per
/// parameter.
pub fn gpt_model(hidden: u64, layers: usize) -> ModelSpec {
    let mut tensors = Vec::with_capacity(layers * 6);
    for l in 0..layers {
        tensors.push(TensorSpec::new(&format!("l{l}.qkv"), l, vec![3 * hidden, hidden], Some(0)));
        tensors.push(TensorSpec::new(&format!("l{l}.attn_out"), l, vec![hidden, hidden], Some(1)));
        tensors.push(TensorSpec::new(&format!("l{l}.mlp_up"), l, vec![4 * hidden, hidden], Some(0)));
        tensors.push(TensorSpec::new(&format!("l{l}.mlp_down"), l, vec![hidden, 4 * hidden], Some(1)));
        tensors.push(TensorSpec::new(&format!("l{l}.ln1"), l, vec![hidden], None));
        tensors.push(TensorSpec::new(&format!("l{l}.ln2"), l, vec![hidden], None));
    }
    ModelSpec {
        num_layers: layers,
        tensors,
        bytes_per_element: 2,
        state_multiplier: 16.0,
    }
}

pub fn gpt_preset(label: &str) -> Option<ModelSpec> {
    GPT_SIZES
        .iter()
        .find(|(name, _, _)| name.eq_ignore_ascii_case(label))
        .map(|&(_, p, l)| gpt_model(hidden_size(p, l), l))
}

/// Parallel degrees as (tp, pp, dp).
pub type Degrees = (u32, u32, u32);

/// Degrees (tp, pp, dp) before and after the reference reconfiguration of
/// each preset.
pub fn reference_degrees(label: &str) -> Option<(Degrees, Degrees)> {
    Some(match label.to_ascii_lowercase().as_str() {
        "1.7b" => ((2, 2, 8), (4, 2, 4)),
        "7b" => ((4, 4, 2), (8, 2, 2)),
        "14b" => ((4, 4, 2), (8, 4, 1)),
        "20b" => ((4, 4, 2), (8, 4, 1)),
        "30b" => ((4, 8, 1), (8, 4, 1)),
        "70b" => ((8, 16, 8), (8, 8, 16)),
        _ => return None,
    })
}

/// The reference (old, new) configuration pair of a preset, generations 0
/// and 1 over ranks starting at 0.
pub fn reference_transition(label: &str) -> Option<(ModelSpec, ParallelConfig, ParallelConfig)> {
    let model = gpt_preset(label)?;
    let ((t0, p0, d0), (t1, p1, d1)) = reference_degrees(label)?;
    let old = ParallelConfig::contiguous(0, t0, p0, d0, 0, model.num_layers);
    let new = ParallelConfig::contiguous(1, t1, p1, d1, 0, model.num_layers);
    Some((model, old, new))
}

/// Regime labels accepted by [`regime_preset`].
pub const REGIMES: [&str; 4] = ["low", "medium", "high", "day"];

/// Volatility regimes for the 14b preset. Events alternate between 32 GPUs
/// (TP4, PP4, DP2) and 24 GPUs (TP4, PP2, DP3). `low`, `medium` and `high`
/// run 8 hours with one event per 60, 30 and 10 minutes; `day` runs
/// 24 hours with 47 events, two of them unannounced losses.
pub fn regime_preset(label: &str) -> Option<RegimeSpec> {
    let (duration_s, interval_s, jitter, checkpoint_interval, seed, fail_stops) =
        match label.to_ascii_lowercase().as_str() {
            "low" => (8.0 * 3600.0, 3600.0, 0.2, 10, 1, vec![]),
            "medium" => (8.0 * 3600.0, 1800.0, 0.1, 50, 6, vec![]),
            "high" => (8.0 * 3600.0, 600.0, 0.2, 30, 1, vec![]),
            "day" => (24.0 * 3600.0, 1800.0, 0.2, 10, 4, vec![15, 31]),
            _ => return None,
        };
    Some(RegimeSpec {
        label: label.to_ascii_lowercase(),
        duration_s,
        interval_s,
        jitter,
        checkpoint_interval,
        warning_window_s: 120.0,
        cycle: vec![Layout::new(4, 4, 2), Layout::new(4, 2, 3)],
        fail_stops,
        seed,
    })
}
