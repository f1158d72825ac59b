mod common;

use common::{case, reshard, source_store, Shape, SHAPES};
use handoff_core::executor::{
    execute_plan, gather_reslice, max_deviation, scatter_local, slice_local, ExecError, ExecOptions, FailingTransport,
    RecordingTransport, ShardStore, TraceKind,
};
use handoff_core::planner::{compute_transfer_plan, for_each_index, verify_plan, PlanViolation, TransferPlan};
use handoff_core::topology::{owners, view};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn shape() -> impl Strategy<Value = Shape> {
    prop::sample::select(SHAPES.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn execution_matches_gather_reslice(seed in any::<u64>(), shape in shape(), staging in 1u64..512) {
        let c = case(seed, shape);
        let opts = ExecOptions { staging_bytes: staging.max(u64::from(c.model.bytes_per_element)), chunking: true };
        let r = reshard(&c, seed, opts);
        prop_assert_eq!(max_deviation(&r.dst, &r.oracle), Some(0));
        prop_assert_eq!(&r.dst.ranks, &r.oracle.ranks);
        prop_assert!(r.report.peak_staging_bytes <= opts.staging_bytes);
    }

    #[test]
    fn plans_verify_and_mutations_are_caught(seed in any::<u64>(), shape in shape(), pick in any::<prop::sample::Index>()) {
        let c = case(seed, shape);
        let plan = compute_transfer_plan(&c.old, &c.new, &c.model).unwrap();
        prop_assert!(verify_plan(&plan, &c.old, &c.new, &c.model).is_ok());
        let tasks: Vec<_> = plan.tasks().cloned().collect();
        prop_assume!(!tasks.is_empty());
        let victim = pick.index(tasks.len());

        let mut dropped = TransferPlan::empty(plan.src_generation, plan.dst_generation);
        tasks.iter().enumerate().filter(|(i, _)| *i != victim).for_each(|(_, t)| dropped.push(t.clone()));
        let errs = verify_plan(&dropped, &c.old, &c.new, &c.model).unwrap_err();
        let gap = errs.iter().any(|e| matches!(e, PlanViolation::CoverageGap { .. }));
        prop_assert!(gap);

        let mut doubled = plan.clone();
        doubled.push(tasks[victim].clone());
        let errs = verify_plan(&doubled, &c.old, &c.new, &c.model).unwrap_err();
        let overlap = errs.iter().any(|e| matches!(e, PlanViolation::Overlap { .. }));
        prop_assert!(overlap);
    }

    #[test]
    fn plan_text_round_trips(seed in any::<u64>(), shape in shape()) {
        let c = case(seed, shape);
        let plan = compute_transfer_plan(&c.old, &c.new, &c.model).unwrap();
        let parsed: TransferPlan = plan.to_string().parse().unwrap();
        prop_assert_eq!(parsed, plan);
    }

    #[test]
    fn scatter_order_does_not_matter(seed in any::<u64>(), shape in shape()) {
        let c = case(seed, shape);
        let plan = compute_transfer_plan(&c.old, &c.new, &c.model).unwrap();
        let src = source_store(&c, seed);
        let elem = c.model.bytes_per_element as usize;
        let mut tasks: Vec<_> = plan.tasks().cloned().collect();
        tasks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut dst = ShardStore::carry_over(&src, &c.model, &c.new).unwrap();
        for t in &tasks {
            let s = src.shard(t.src, &t.tensor_id).unwrap();
            let payload = slice_local(&s.data, &s.view, &t.bounds, elem).unwrap();
            let d = dst.ranks.get_mut(&t.dst).unwrap().get_mut(&t.tensor_id).unwrap();
            scatter_local(&mut d.data, &d.view.clone(), &t.bounds, &payload, elem).unwrap();
        }
        let oracle = gather_reslice(&src, &c.model, &c.new).unwrap();
        prop_assert_eq!(max_deviation(&dst, &oracle), Some(0));
    }

    #[test]
    fn trace_is_layer_ordered(seed in any::<u64>(), shape in shape()) {
        let c = case(seed, shape);
        let plan = compute_transfer_plan(&c.old, &c.new, &c.model).unwrap();
        let src = source_store(&c, seed);
        let mut dst = ShardStore::carry_over(&src, &c.model, &c.new).unwrap();
        let mut t = RecordingTransport::new();
        execute_plan(&plan, &src, &mut dst, &mut t, ExecOptions::default()).unwrap();
        let mut open_layer: Option<usize> = None;
        let mut closed: Vec<usize> = Vec::new();
        for e in &t.trace {
            match e.kind {
                TraceKind::Send => {
                    prop_assert!(closed.iter().all(|&l| l < e.layer), "send for layer {} after a later barrier", e.layer);
                    if let Some(l) = open_layer { prop_assert!(e.layer >= l); }
                    open_layer = Some(e.layer);
                }
                TraceKind::Barrier => {
                    prop_assert!(closed.last().is_none_or(|&l| l < e.layer));
                    closed.push(e.layer);
                }
            }
        }
        let per_layer = t.layer_link_bytes();
        for (layer, links) in per_layer {
            let planned = plan.layer_link_bytes(layer);
            for (link, bytes) in links {
                prop_assert_eq!(planned.get(&link).copied(), Some(bytes));
            }
        }
    }
}

/// Network bytes the plan must move: every destination element not already
/// present in the same rank's old view.
fn oracle_network_bytes(c: &common::Case) -> u64 {
    let mut total = 0;
    for tensor in &c.model.tensors {
        for &r in &c.new.ranks {
            let Ok(Some(nv)) = view(tensor, &c.new, r) else { continue };
            let ov = view(tensor, &c.old, r).ok().flatten();
            for_each_index(&nv, |idx| {
                if !ov.as_ref().is_some_and(|v| v.contains_point(idx)) {
                    total += u64::from(c.model.bytes_per_element);
                }
            });
        }
    }
    total
}

#[test]
fn network_bytes_match_brute_force() {
    for seed in 0..60 {
        let c = case(seed, SHAPES[seed as usize % 3]);
        let plan = compute_transfer_plan(&c.old, &c.new, &c.model).unwrap();
        let moved: u64 = plan.tasks().filter(|t| !t.is_local()).map(|t| t.byte_size).sum();
        assert_eq!(moved, oracle_network_bytes(&c), "seed {seed}");
    }
}

#[test]
fn every_source_task_reads_an_owner() {
    for seed in 0..40 {
        let c = case(seed, Shape::ScaleOut);
        let plan = compute_transfer_plan(&c.old, &c.new, &c.model).unwrap();
        for t in plan.tasks() {
            let tensor = c.model.tensor(&t.tensor_id).unwrap();
            let holders = owners(tensor, &c.old).unwrap();
            assert!(holders[&t.src].contains(&t.bounds), "seed {seed}: {} does not hold {}", t.src, t.bounds);
        }
    }
}

#[test]
fn failed_transfer_leaves_destination_marked() {
    let c = case(7, Shape::InPlace);
    let plan = compute_transfer_plan(&c.old, &c.new, &c.model).unwrap();
    let Some(&first) = plan.tasks_by_layer.keys().next() else { return };
    let src = source_store(&c, 7);
    let mut dst = ShardStore::carry_over(&src, &c.model, &c.new).unwrap();
    let mut t = FailingTransport::new(first);
    let err = execute_plan(&plan, &src, &mut dst, &mut t, ExecOptions::default());
    if plan.tasks().any(|t| !t.is_local() && t.layer == first) {
        assert!(matches!(err, Err(ExecError::Transport { layer, .. }) if layer == first));
        assert!(dst.incomplete);
    }
}
