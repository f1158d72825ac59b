//! Intersection-based transfer planning between two configurations.
//!
//! For every tensor and every destination rank the planner tiles the
//! destination view with intersections of source views. Only sharding
//! metadata is touched; no tensor data is read.
//!
//! Candidate source pieces are pruned by stage and by shard axis: the
//! destination interval on the sharded axis selects the contiguous range of
//! old tp blocks that can overlap it, so a destination checks a number of
//! sources proportional to its overlap rather than to the world size.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::topology::{
    block_size, owners, validate_config, view, Coord, Interval, ModelSpec, ParallelConfig, RankId,
    ShardView, TensorSpec, TopologyError, Violation,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("views have different dimensionality ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("source and destination share generation id {0}")]
    SameGeneration(u64),
    #[error("{which} configuration is invalid: {}", join(.violations))]
    InvalidConfig {
        which: &'static str,
        violations: Vec<Violation>,
    },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Per-dimension interval intersection, `None` when any dimension is empty.
pub fn intersect(a: &ShardView, b: &ShardView) -> Result<Option<ShardView>, PlanError> {
    if a.ndim() != b.ndim() {
        return Err(PlanError::DimensionMismatch(a.ndim(), b.ndim()));
    }
    let mut bounds = Vec::with_capacity(a.ndim());
    for (x, y) in a.bounds.iter().zip(&b.bounds) {
        match x.intersect(y) {
            Some(i) => bounds.push(i),
            None => return Ok(None),
        }
    }
    Ok(Some(ShardView::new(bounds)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferTask {
    pub tensor_id: Arc<str>,
    pub layer: usize,
    pub src: RankId,
    pub dst: RankId,
    /// Region in global tensor coordinates.
    pub bounds: ShardView,
    pub byte_size: u64,
}

impl TransferTask {
    /// A copy inside one rank's memory; never crosses the transport.
    pub fn is_local(&self) -> bool {
        self.src == self.dst
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransferPlan {
    pub src_generation: u64,
    pub dst_generation: u64,
    pub tasks_by_layer: BTreeMap<usize, Vec<TransferTask>>,
    /// Bytes of every task, local copies included.
    pub total_bytes: u64,
    /// Network bytes per (src, dst) link; local copies are not listed.
    pub per_link_bytes: BTreeMap<(RankId, RankId), u64>,
}

impl TransferPlan {
    pub fn empty(src_generation: u64, dst_generation: u64) -> Self {
        Self {
            src_generation,
            dst_generation,
            ..Default::default()
        }
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TransferTask> {
        self.tasks_by_layer.values().flatten()
    }

    pub fn task_count(&self) -> usize {
        self.tasks_by_layer.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.task_count() == 0
    }

    pub fn push(&mut self, task: TransferTask) {
        self.total_bytes += task.byte_size;
        if !task.is_local() {
            *self.per_link_bytes.entry((task.src, task.dst)).or_default() += task.byte_size;
        }
        self.tasks_by_layer.entry(task.layer).or_default().push(task);
    }

    /// Rebuilds the byte aggregates from the task list.
    pub fn recompute_totals(&mut self) {
        let tasks: Vec<TransferTask> = self.tasks().cloned().collect();
        self.tasks_by_layer.clear();
        self.total_bytes = 0;
        self.per_link_bytes.clear();
        for t in tasks {
            self.push(t);
        }
    }

    /// Network bytes per link for one layer.
    pub fn layer_link_bytes(&self, layer: usize) -> BTreeMap<(RankId, RankId), u64> {
        let mut out = BTreeMap::new();
        for t in self.tasks_by_layer.get(&layer).into_iter().flatten() {
            if !t.is_local() {
                *out.entry((t.src, t.dst)).or_insert(0u64) += t.byte_size;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PlanOptions {
    /// Spread destinations over equivalent data-parallel source replicas
    /// instead of always reading from the lowest replica.
    pub balance_sources: bool,
}

/// Work counters gathered while planning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PlanStats {
    pub tensors: usize,
    /// Source/destination view pairs whose intersection was evaluated.
    pub pair_checks: u64,
}

pub fn compute_transfer_plan(
    old: &ParallelConfig,
    new: &ParallelConfig,
    model: &ModelSpec,
) -> Result<TransferPlan, PlanError> {
    compute_transfer_plan_with(old, new, model, PlanOptions::default()).map(|(p, _)| p)
}

pub fn compute_transfer_plan_with(
    old: &ParallelConfig,
    new: &ParallelConfig,
    model: &ModelSpec,
    options: PlanOptions,
) -> Result<(TransferPlan, PlanStats), PlanError> {
    validate_config(old, model).map_err(|violations| PlanError::InvalidConfig {
        which: "source",
        violations,
    })?;
    validate_config(new, model).map_err(|violations| PlanError::InvalidConfig {
        which: "destination",
        violations,
    })?;
    if old.generation_id == new.generation_id {
        return Err(PlanError::SameGeneration(old.generation_id));
    }

    let mut plan = TransferPlan::empty(old.generation_id, new.generation_id);
    let mut stats = PlanStats::default();
    let bpe = u64::from(model.bytes_per_element);

    // old rank -> coordinate, for self-source lookups
    let old_coords: BTreeMap<RankId, Coord> = old
        .ranks
        .iter()
        .enumerate()
        .map(|(i, &r)| (r, old.coord_of_position(i)))
        .collect();

    for tensor in &model.tensors {
        stats.tensors += 1;
        plan_tensor(tensor, old, new, &old_coords, bpe, options, &mut plan, &mut stats)?;
    }
    Ok((plan, stats))
}

#[allow(clippy::too_many_arguments)]
fn plan_tensor(
    tensor: &TensorSpec,
    old: &ParallelConfig,
    new: &ParallelConfig,
    old_coords: &BTreeMap<RankId, Coord>,
    bpe: u64,
    options: PlanOptions,
    plan: &mut TransferPlan,
    stats: &mut PlanStats,
) -> Result<(), PlanError> {
    let old_stage = old
        .stage_of_layer(tensor.layer)
        .ok_or_else(|| TopologyError::LayerOutOfRange {
            tensor: tensor.id.to_string(),
            layer: tensor.layer,
            layers: old.layer_assignment.len(),
        })?;
    let dst_owners = owners(tensor, new)?;

    // Old tp blocks that can overlap a destination interval on the shard axis.
    let (old_blocks, block_len) = match tensor.tp_shard_axis {
        Some(axis) => (old.tp, block_size(tensor.shape[axis], old.tp)),
        None => (1, 0),
    };

    for (balance_slot, (&dst, dst_view)) in dst_owners.iter().enumerate() {
        let (first, last) = match tensor.tp_shard_axis {
            Some(axis) => {
                let iv = dst_view.bounds[axis];
                ((iv.lo / block_len) as u32, ((iv.hi - 1) / block_len) as u32)
            }
            None => (0, 0),
        };
        let self_coord = old_coords.get(&dst).copied().filter(|c| c.pp == old_stage);

        for block in first..=last.min(old_blocks - 1) {
            // Choose one holder of this old block: the destination itself when it
            // already holds it, otherwise the lowest (or balanced) dp replica.
            let old_tp = if tensor.tp_shard_axis.is_some() { block } else { 0 };
            let src = match self_coord {
                Some(c) if tensor.tp_shard_axis.is_none() || c.tp == old_tp => dst,
                _ => {
                    let dp = if options.balance_sources {
                        (balance_slot as u32) % old.dp
                    } else {
                        0
                    };
                    let coord = Coord {
                        tp: old_tp,
                        pp: old_stage,
                        dp,
                    };
                    old.rank_at(coord).expect("coordinate inside validated config")
                }
            };
            let src_view = view(tensor, old, src)?.expect("source hosts the layer");
            stats.pair_checks += 1;
            let Some(bounds) = intersect(&src_view, dst_view)? else {
                continue;
            };
            if src == dst && src_view == *dst_view {
                // unchanged buffer, nothing moves
                continue;
            }
            let byte_size = bounds.num_elements() * bpe;
            plan.push(TransferTask {
                tensor_id: tensor.id.clone(),
                layer: tensor.layer,
                src,
                dst,
                bounds,
                byte_size,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PlanCostSummary {
    pub total_bytes: u64,
    pub max_link_bytes: u64,
    pub task_count: usize,
}

pub fn plan_cost_summary(plan: &TransferPlan) -> PlanCostSummary {
    PlanCostSummary {
        total_bytes: plan.total_bytes,
        max_link_bytes: plan.per_link_bytes.values().copied().max().unwrap_or(0),
        task_count: plan.task_count(),
    }
}

/// A defect found by [`verify_plan`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanViolation {
    UnknownTensor(String),
    EmptyTask { tensor: String, src: RankId, dst: RankId },
    WrongByteSize { tensor: String, src: RankId, dst: RankId },
    LayerMismatch { tensor: String, listed: usize, actual: usize },
    OutsideSource { tensor: String, src: RankId, bounds: String },
    OutsideDestination { tensor: String, dst: RankId, bounds: String },
    CoverageGap { tensor: String, dst: RankId, index: Vec<u64> },
    Overlap { tensor: String, dst: RankId, index: Vec<u64> },
    Config(String),
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::UnknownTensor(t) => write!(f, "task references unknown tensor `{t}`"),
            PlanViolation::EmptyTask { tensor, src, dst } => {
                write!(f, "empty task for `{tensor}` {src}->{dst}")
            }
            PlanViolation::WrongByteSize { tensor, src, dst } => {
                write!(f, "byte size of `{tensor}` {src}->{dst} does not match its bounds")
            }
            PlanViolation::LayerMismatch { tensor, listed, actual } => {
                write!(f, "`{tensor}` filed under layer {listed}, belongs to {actual}")
            }
            PlanViolation::OutsideSource { tensor, src, bounds } => {
                write!(f, "`{tensor}` bounds {bounds} escape the old view of rank {src}")
            }
            PlanViolation::OutsideDestination { tensor, dst, bounds } => {
                write!(f, "`{tensor}` bounds {bounds} escape the new view of rank {dst}")
            }
            PlanViolation::CoverageGap { tensor, dst, index } => {
                write!(f, "`{tensor}` index {index:?} never reaches rank {dst}")
            }
            PlanViolation::Overlap { tensor, dst, index } => {
                write!(f, "`{tensor}` index {index:?} reaches rank {dst} more than once")
            }
            PlanViolation::Config(msg) => write!(f, "{msg}"),
        }
    }
}

/// Brute-force oracle: enumerates every index of every destination view and
/// counts how many inbound sources supply it. A destination that held an
/// identical view under the old configuration keeps its buffer and counts as
/// one supply. Cost is linear in total destination elements.
pub fn verify_plan(
    plan: &TransferPlan,
    old: &ParallelConfig,
    new: &ParallelConfig,
    model: &ModelSpec,
) -> Result<(), Vec<PlanViolation>> {
    let mut out = Vec::new();
    let bpe = u64::from(model.bytes_per_element);

    let mut by_tensor: BTreeMap<&str, Vec<&TransferTask>> = BTreeMap::new();
    for (&layer, tasks) in &plan.tasks_by_layer {
        for t in tasks {
            let Some(spec) = model.tensor(&t.tensor_id) else {
                out.push(PlanViolation::UnknownTensor(t.tensor_id.to_string()));
                continue;
            };
            if spec.layer != layer || t.layer != layer {
                out.push(PlanViolation::LayerMismatch {
                    tensor: t.tensor_id.to_string(),
                    listed: layer,
                    actual: spec.layer,
                });
            }
            if t.bounds.is_empty() || t.bounds.num_elements() == 0 {
                out.push(PlanViolation::EmptyTask {
                    tensor: t.tensor_id.to_string(),
                    src: t.src,
                    dst: t.dst,
                });
                continue;
            }
            if t.byte_size != t.bounds.num_elements() * bpe {
                out.push(PlanViolation::WrongByteSize {
                    tensor: t.tensor_id.to_string(),
                    src: t.src,
                    dst: t.dst,
                });
            }
            match view(spec, old, t.src) {
                Ok(Some(v)) if v.contains(&t.bounds) => {}
                Ok(_) | Err(_) => out.push(PlanViolation::OutsideSource {
                    tensor: t.tensor_id.to_string(),
                    src: t.src,
                    bounds: t.bounds.to_string(),
                }),
            }
            by_tensor.entry(&spec.id).or_default().push(t);
        }
    }

    for tensor in &model.tensors {
        let dst_owners = match owners(tensor, new) {
            Ok(o) => o,
            Err(e) => {
                out.push(PlanViolation::Config(e.to_string()));
                continue;
            }
        };
        let tasks = by_tensor.get(&*tensor.id).map(Vec::as_slice).unwrap_or(&[]);
        for t in tasks {
            let inside = dst_owners.get(&t.dst).is_some_and(|v| v.contains(&t.bounds));
            if !inside {
                out.push(PlanViolation::OutsideDestination {
                    tensor: tensor.id.to_string(),
                    dst: t.dst,
                    bounds: t.bounds.to_string(),
                });
            }
        }
        for (&dst, dst_view) in &dst_owners {
            let mut counts = vec![0u32; dst_view.num_elements() as usize];
            let kept = old.contains(dst)
                && matches!(view(tensor, old, dst), Ok(Some(ref v)) if v == dst_view);
            if kept {
                counts.iter_mut().for_each(|c| *c += 1);
            }
            for t in tasks.iter().filter(|t| t.dst == dst) {
                if !dst_view.contains(&t.bounds) {
                    continue;
                }
                for_each_index(&t.bounds, |idx| {
                    counts[local_linear(dst_view, idx)] += 1;
                });
            }
            let mut gap = None;
            let mut overlap = None;
            let mut i = 0usize;
            for_each_index(dst_view, |idx| {
                match counts[i] {
                    0 if gap.is_none() => gap = Some(idx.to_vec()),
                    n if n > 1 && overlap.is_none() => overlap = Some(idx.to_vec()),
                    _ => {}
                }
                i += 1;
            });
            if let Some(index) = gap {
                out.push(PlanViolation::CoverageGap {
                    tensor: tensor.id.to_string(),
                    dst,
                    index,
                });
            }
            if let Some(index) = overlap {
                out.push(PlanViolation::Overlap {
                    tensor: tensor.id.to_string(),
                    dst,
                    index,
                });
            }
        }
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Visits every index tuple of `view` in row-major order.
pub fn for_each_index(view: &ShardView, mut f: impl FnMut(&[u64])) {
    if view.is_empty() {
        return;
    }
    let mut idx: Vec<u64> = view.bounds.iter().map(|b| b.lo).collect();
    loop {
        f(&idx);
        let mut d = view.ndim();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < view.bounds[d].hi {
                break;
            }
            idx[d] = view.bounds[d].lo;
        }
    }
}

fn local_linear(owner: &ShardView, idx: &[u64]) -> usize {
    let mut lin = 0u64;
    for (b, &x) in owner.bounds.iter().zip(idx) {
        lin = lin * b.len() + (x - b.lo);
    }
    lin as usize
}

// Line-oriented plan records:
//   plan <src_generation> <dst_generation>
//   task <tensor> <layer> <src> <dst> <lo:hi,lo:hi,...> <bytes>

impl fmt::Display for TransferPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "plan {} {}", self.src_generation, self.dst_generation)?;
        for t in self.tasks() {
            let bounds: Vec<String> = t.bounds.bounds.iter().map(|b| format!("{}:{}", b.lo, b.hi)).collect();
            writeln!(
                f,
                "task {} {} {} {} {} {}",
                t.tensor_id,
                t.layer,
                t.src,
                t.dst,
                bounds.join(","),
                t.byte_size
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct ParsePlanError {
    pub line: usize,
    pub msg: String,
}

impl FromStr for TransferPlan {
    type Err = ParsePlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |line: usize, msg: &str| ParsePlanError {
            line,
            msg: msg.to_string(),
        };
        let mut plan: Option<TransferPlan> = None;
        for (i, raw) in s.lines().enumerate() {
            let line = i + 1;
            let text = raw.trim();
            if text.is_empty() || text.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = text.split_whitespace().collect();
            match fields[0] {
                "plan" => {
                    if fields.len() != 3 || plan.is_some() {
                        return Err(err(line, "expected a single `plan <src_gen> <dst_gen>` header"));
                    }
                    let src = fields[1].parse().map_err(|_| err(line, "bad source generation"))?;
                    let dst = fields[2].parse().map_err(|_| err(line, "bad destination generation"))?;
                    plan = Some(TransferPlan::empty(src, dst));
                }
                "task" => {
                    let p = plan.as_mut().ok_or_else(|| err(line, "task before plan header"))?;
                    if fields.len() != 7 {
                        return Err(err(line, "task needs 6 fields"));
                    }
                    let num = |s: &str, what: &str| -> Result<u64, ParsePlanError> {
                        s.parse().map_err(|_| err(line, &format!("bad {what}")))
                    };
                    let mut bounds = Vec::new();
                    for part in fields[5].split(',') {
                        let (lo, hi) = part.split_once(':').ok_or_else(|| err(line, "bad bounds"))?;
                        bounds.push(Interval::new(num(lo, "bound")?, num(hi, "bound")?));
                    }
                    p.push(TransferTask {
                        tensor_id: Arc::from(fields[1]),
                        layer: num(fields[2], "layer")? as usize,
                        src: num(fields[3], "src")? as RankId,
                        dst: num(fields[4], "dst")? as RankId,
                        bounds: ShardView::new(bounds),
                        byte_size: num(fields[6], "bytes")?,
                    });
                }
                other => return Err(err(line, &format!("unknown record `{other}`"))),
            }
        }
        plan.ok_or_else(|| err(0, "missing plan header"))
    }
}
