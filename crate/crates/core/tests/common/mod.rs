#![allow(dead_code)]

use handoff_core::executor::{execute_plan, gather_reslice, ExecOptions, ExecutionReport, LoopbackTransport, ShardStore};
use handoff_core::planner::{compute_transfer_plan, TransferPlan};
use handoff_core::topology::{validate_config, ModelSpec, ParallelConfig, TensorSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    InPlace,
    ScaleOut,
    ScaleIn,
}

pub const SHAPES: [Shape; 3] = [Shape::InPlace, Shape::ScaleOut, Shape::ScaleIn];

#[derive(Debug, Clone)]
pub struct Case {
    pub model: ModelSpec,
    pub old: ParallelConfig,
    pub new: ParallelConfig,
    pub shape: Shape,
}

pub fn toy_model(rng: &mut ChaCha8Rng) -> ModelSpec {
    let layers = rng.gen_range(1..=8);
    let mut tensors = Vec::new();
    for l in 0..layers {
        for t in 0..rng.gen_range(1..=3) {
            let ndim = rng.gen_range(1..=3);
            let shape: Vec<u64> = (0..ndim)
                .map(|_| if ndim == 3 { rng.gen_range(1..=12) } else { rng.gen_range(1..=64) })
                .collect();
            let axis = if rng.gen_bool(0.25) { None } else { Some(rng.gen_range(0..ndim)) };
            tensors.push(TensorSpec::new(&format!("l{l}.t{t}"), l, shape, axis));
        }
    }
    ModelSpec {
        num_layers: layers,
        tensors,
        bytes_per_element: rng.gen_range(1..=4),
        state_multiplier: 16.0,
    }
}

fn degrees(rng: &mut ChaCha8Rng, layers: usize, max_world: u32) -> (u32, u32, u32) {
    loop {
        let tp = 1 << rng.gen_range(0..=3);
        let pp = rng.gen_range(1..=(layers as u32).min(4));
        let dp = rng.gen_range(1..=4);
        if tp * pp * dp <= max_world {
            return (tp, pp, dp);
        }
    }
}

fn random_config(rng: &mut ChaCha8Rng, model: &ModelSpec, generation: u64, first: u32) -> Option<ParallelConfig> {
    for _ in 0..64 {
        let (tp, pp, dp) = degrees(rng, model.num_layers, 16);
        let c = ParallelConfig::contiguous(generation, tp, pp, dp, first, model.num_layers);
        if validate_config(&c, model).is_ok() {
            return Some(c);
        }
    }
    None
}

/// A valid (model, old, new) triple of the requested shape, deterministic in
/// `seed`.
pub fn case(seed: u64, shape: Shape) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let model = toy_model(&mut rng);
        let Some(old) = random_config(&mut rng, &model, 0, 0) else { continue };
        let first = if rng.gen_bool(0.3) { rng.gen_range(1..=4) } else { 0 };
        let Some(new) = random_config(&mut rng, &model, 1, first) else { continue };
        let ok = match shape {
            Shape::InPlace => new.world_size() == old.world_size(),
            Shape::ScaleOut => new.world_size() > old.world_size(),
            Shape::ScaleIn => new.world_size() < old.world_size(),
        };
        if ok {
            return Case { model, old, new, shape };
        }
    }
}

/// Deterministic element bytes unique to (tensor, index, byte).
pub fn pattern(seed: u64) -> impl Fn(&str, &[u64], usize) -> u8 {
    move |id: &str, idx: &[u64], b: usize| {
        let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
        for c in id.bytes() {
            h = h.wrapping_mul(0x100_0000_01b3) ^ u64::from(c);
        }
        for &x in idx {
            h = h.wrapping_mul(0x100_0000_01b3) ^ x;
        }
        h = h.wrapping_mul(0x100_0000_01b3) ^ b as u64;
        (h ^ (h >> 29)) as u8
    }
}

pub fn source_store(case: &Case, seed: u64) -> ShardStore {
    let mut s = ShardStore::allocate(&case.model, &case.old).unwrap();
    s.fill_with(pattern(seed));
    s
}

pub struct Resharded {
    pub plan: TransferPlan,
    pub src: ShardStore,
    pub dst: ShardStore,
    pub oracle: ShardStore,
    pub report: ExecutionReport,
}

pub fn reshard(case: &Case, seed: u64, options: ExecOptions) -> Resharded {
    let plan = compute_transfer_plan(&case.old, &case.new, &case.model).unwrap();
    let src = source_store(case, seed);
    let mut dst = ShardStore::carry_over(&src, &case.model, &case.new).unwrap();
    let mut transport = LoopbackTransport::new();
    let report = execute_plan(&plan, &src, &mut dst, &mut transport, options).unwrap();
    assert_eq!(transport.pending(), 0, "undelivered payloads");
    let oracle = gather_reslice(&src, &case.model, &case.new).unwrap();
    Resharded {
        plan,
        src,
        dst,
        oracle,
        report,
    }
}

/// Toy model of `layers` identical layers, each `[rows, cols]` split by rows.
pub fn uniform_model(layers: usize, rows: u64, cols: u64) -> ModelSpec {
    ModelSpec {
        num_layers: layers,
        tensors: (0..layers)
            .map(|l| TensorSpec::new(&format!("l{l}.w"), l, vec![rows, cols], Some(0)))
            .collect(),
        bytes_per_element: 2,
        state_multiplier: 16.0,
    }
}
