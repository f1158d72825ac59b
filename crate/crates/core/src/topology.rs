//! Model and cluster layout descriptions, and the view function that maps a
//! (tensor, configuration, rank) triple to the hyper-rectangle of indices the
//! rank owns.
//!
//! Rank coordinates follow a fixed order over `ParallelConfig::ranks`: the
//! tensor-parallel index varies fastest, then the pipeline stage, then the
//! data-parallel replica. With 8 GPUs per node and `tp * pp == 8` a node
//! therefore hosts one complete replica.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type RankId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("rank {0} is not part of generation {1}")]
    UnknownRank(RankId, u64),
    #[error("tensor `{tensor}` references layer {layer} but the configuration covers {layers} layers")]
    LayerOutOfRange {
        tensor: String,
        layer: usize,
        layers: usize,
    },
    #[error("tensor `{tensor}` shards axis {axis} but has only {ndim} dimensions")]
    AxisOutOfRange {
        tensor: String,
        axis: usize,
        ndim: usize,
    },
    #[error("tp block {index} of axis length {len} split {tp} ways is empty")]
    EmptyBlock { len: u64, tp: u32, index: u32 },
}

/// Which slice of the optimizer state a tensor holds. Moments share the
/// sharding of the parameter they belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Parameter,
    OptimizerMoment1,
    OptimizerMoment2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub id: Arc<str>,
    pub layer: usize,
    pub shape: Vec<u64>,
    /// Axis partitioned by tensor parallelism; `None` means replicated.
    pub tp_shard_axis: Option<usize>,
    pub role: TensorRole,
}

impl TensorSpec {
    pub fn new(id: &str, layer: usize, shape: Vec<u64>, tp_shard_axis: Option<usize>) -> Self {
        Self {
            id: Arc::from(id),
            layer,
            shape,
            tp_shard_axis,
            role: TensorRole::Parameter,
        }
    }

    pub fn with_role(mut self, role: TensorRole) -> Self {
        self.role = role;
        self
    }

    pub fn num_elements(&self) -> u64 {
        self.shape.iter().product()
    }

    pub fn full_view(&self) -> ShardView {
        ShardView::new(self.shape.iter().map(|&d| Interval::new(0, d)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub tensors: Vec<TensorSpec>,
    /// Width of one element in shard buffers and on the wire.
    pub bytes_per_element: u32,
    /// Persistent state bytes (parameter, gradient, master copy, moments)
    /// carried per parameter element.
    pub state_multiplier: f64,
}

impl ModelSpec {
    pub fn layer_tensors(&self, layer: usize) -> impl Iterator<Item = &TensorSpec> {
        self.tensors.iter().filter(move |t| t.layer == layer)
    }

    pub fn tensor(&self, id: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| &*t.id == id)
    }

    pub fn parameter_elements(&self) -> u64 {
        self.tensors
            .iter()
            .filter(|t| t.role == TensorRole::Parameter)
            .map(TensorSpec::num_elements)
            .sum()
    }

    /// Bytes of all persistent training state, derived from metadata only.
    pub fn state_bytes(&self) -> f64 {
        self.parameter_elements() as f64 * self.state_multiplier
    }

    pub fn layer_state_bytes(&self, layer: usize) -> f64 {
        self.layer_tensors(layer)
            .filter(|t| t.role == TensorRole::Parameter)
            .map(|t| t.num_elements() as f64 * self.state_multiplier)
            .sum()
    }

    /// Structural checks on the model alone.
    pub fn check(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.num_layers == 0 {
            out.push(Violation::NoLayers);
        }
        if self.bytes_per_element == 0 {
            out.push(Violation::ZeroElementWidth);
        }
        if self.state_multiplier.is_nan() || self.state_multiplier <= 0.0 {
            out.push(Violation::NonPositiveStateMultiplier);
        }
        let mut seen = BTreeSet::new();
        for t in &self.tensors {
            if !seen.insert(t.id.clone()) {
                out.push(Violation::DuplicateTensor(t.id.to_string()));
            }
            if t.layer >= self.num_layers {
                out.push(Violation::TensorLayerOutOfRange {
                    tensor: t.id.to_string(),
                    layer: t.layer,
                });
            }
            if t.shape.is_empty() || t.shape.contains(&0) {
                out.push(Violation::DegenerateShape(t.id.to_string()));
            }
            if let Some(axis) = t.tp_shard_axis {
                if axis >= t.shape.len() {
                    out.push(Violation::ShardAxisOutOfRange {
                        tensor: t.id.to_string(),
                        axis,
                    });
                }
            }
        }
        out
    }
}

/// Half-open integer interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub lo: u64,
    pub hi: u64,
}

impl Interval {
    pub const fn new(lo: u64, hi: u64) -> Self {
        Self { lo, hi }
    }

    pub fn len(&self) -> u64 {
        self.hi.saturating_sub(self.lo)
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }

    pub fn contains(&self, x: u64) -> bool {
        self.lo <= x && x < self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo < hi).then_some(Interval { lo, hi })
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.lo, self.hi)
    }
}

/// An n-dimensional hyper-rectangle of tensor indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShardView {
    pub bounds: Vec<Interval>,
}

impl ShardView {
    pub fn new(bounds: Vec<Interval>) -> Self {
        Self { bounds }
    }

    pub fn ndim(&self) -> usize {
        self.bounds.len()
    }

    pub fn shape(&self) -> Vec<u64> {
        self.bounds.iter().map(Interval::len).collect()
    }

    pub fn num_elements(&self) -> u64 {
        self.bounds.iter().map(Interval::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.iter().any(Interval::is_empty)
    }

    pub fn contains(&self, other: &ShardView) -> bool {
        self.ndim() == other.ndim()
            && self
                .bounds
                .iter()
                .zip(&other.bounds)
                .all(|(a, b)| a.contains_interval(b))
    }

    pub fn contains_point(&self, index: &[u64]) -> bool {
        self.ndim() == index.len() && self.bounds.iter().zip(index).all(|(b, &x)| b.contains(x))
    }
}

impl fmt::Display for ShardView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.bounds.iter().enumerate() {
            if i > 0 {
                f.write_str("x")?;
            }
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Position of a rank inside a (tp, pp, dp) decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coord {
    pub tp: u32,
    pub pp: u32,
    pub dp: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub generation_id: u64,
    pub tp: u32,
    pub pp: u32,
    pub dp: u32,
    pub ranks: Vec<RankId>,
    /// `layer_assignment[layer]` is the pipeline stage hosting that layer.
    pub layer_assignment: Vec<u32>,
}

impl ParallelConfig {
    /// Builds a configuration with a balanced contiguous layer split; when
    /// `num_layers` is not divisible by `pp` the earlier stages take one
    /// extra layer.
    pub fn new(
        generation_id: u64,
        tp: u32,
        pp: u32,
        dp: u32,
        ranks: Vec<RankId>,
        num_layers: usize,
    ) -> Self {
        Self {
            generation_id,
            tp,
            pp,
            dp,
            ranks,
            layer_assignment: balanced_layer_assignment(num_layers, pp),
        }
    }

    /// Same as [`ParallelConfig::new`] over ranks `first..first + tp*pp*dp`.
    pub fn contiguous(generation_id: u64, tp: u32, pp: u32, dp: u32, first: RankId, num_layers: usize) -> Self {
        let n = tp * pp * dp;
        Self::new(generation_id, tp, pp, dp, (first..first + n).collect(), num_layers)
    }

    pub fn world_size(&self) -> usize {
        self.ranks.len()
    }

    pub fn position(&self, rank: RankId) -> Option<usize> {
        self.ranks.iter().position(|&r| r == rank)
    }

    pub fn contains(&self, rank: RankId) -> bool {
        self.ranks.contains(&rank)
    }

    pub fn coord_of_position(&self, pos: usize) -> Coord {
        let pos = pos as u32;
        Coord {
            tp: pos % self.tp,
            pp: (pos / self.tp) % self.pp,
            dp: pos / (self.tp * self.pp),
        }
    }

    pub fn coord(&self, rank: RankId) -> Result<Coord, TopologyError> {
        self.position(rank)
            .map(|p| self.coord_of_position(p))
            .ok_or(TopologyError::UnknownRank(rank, self.generation_id))
    }

    /// Rank at a coordinate, if the coordinate is inside the decomposition.
    pub fn rank_at(&self, coord: Coord) -> Option<RankId> {
        if coord.tp >= self.tp || coord.pp >= self.pp || coord.dp >= self.dp {
            return None;
        }
        let pos = (coord.dp * self.pp + coord.pp) * self.tp + coord.tp;
        self.ranks.get(pos as usize).copied()
    }

    pub fn stage_of_layer(&self, layer: usize) -> Option<u32> {
        self.layer_assignment.get(layer).copied()
    }

    /// Ranks of one pipeline stage, ordered by (dp, tp).
    pub fn stage_ranks(&self, stage: u32) -> impl Iterator<Item = (RankId, Coord)> + '_ {
        (0..self.dp).flat_map(move |dp| {
            (0..self.tp).filter_map(move |tp| {
                let c = Coord { tp, pp: stage, dp };
                self.rank_at(c).map(|r| (r, c))
            })
        })
    }

    /// Same decomposition, layer split and rank order.
    pub fn same_layout(&self, other: &ParallelConfig) -> bool {
        self.tp == other.tp
            && self.pp == other.pp
            && self.dp == other.dp
            && self.ranks == other.ranks
            && self.layer_assignment == other.layer_assignment
    }
}

pub fn balanced_layer_assignment(num_layers: usize, pp: u32) -> Vec<u32> {
    if pp == 0 {
        return Vec::new();
    }
    let pp = pp as usize;
    let base = num_layers / pp;
    let extra = num_layers % pp;
    let mut out = Vec::with_capacity(num_layers);
    for stage in 0..pp {
        let n = base + usize::from(stage < extra);
        out.extend(std::iter::repeat_n(stage as u32, n));
    }
    out
}

/// Block `index` of an axis of length `len` split `parts` ways: blocks of
/// `ceil(len/parts)` with a shorter final block.
pub fn block_interval(len: u64, parts: u32, index: u32) -> Interval {
    let block = len.div_ceil(u64::from(parts));
    let lo = (u64::from(index) * block).min(len);
    let hi = (lo + block).min(len);
    Interval::new(lo, hi)
}

/// Block size used for an axis of length `len` split `parts` ways.
pub fn block_size(len: u64, parts: u32) -> u64 {
    len.div_ceil(u64::from(parts))
}

fn tp_view(tensor: &TensorSpec, tp: u32, tp_index: u32) -> Result<ShardView, TopologyError> {
    let mut view = tensor.full_view();
    if let Some(axis) = tensor.tp_shard_axis {
        if axis >= tensor.shape.len() {
            return Err(TopologyError::AxisOutOfRange {
                tensor: tensor.id.to_string(),
                axis,
                ndim: tensor.shape.len(),
            });
        }
        let block = block_interval(tensor.shape[axis], tp, tp_index);
        if block.is_empty() {
            return Err(TopologyError::EmptyBlock {
                len: tensor.shape[axis],
                tp,
                index: tp_index,
            });
        }
        view.bounds[axis] = block;
    }
    Ok(view)
}

/// The hyper-rectangle of `tensor` owned by `rank` under `config`, or `None`
/// when the rank's pipeline stage does not host the tensor's layer.
pub fn view(
    tensor: &TensorSpec,
    config: &ParallelConfig,
    rank: RankId,
) -> Result<Option<ShardView>, TopologyError> {
    let coord = config.coord(rank)?;
    let stage = config
        .stage_of_layer(tensor.layer)
        .ok_or_else(|| TopologyError::LayerOutOfRange {
            tensor: tensor.id.to_string(),
            layer: tensor.layer,
            layers: config.layer_assignment.len(),
        })?;
    if stage != coord.pp {
        return Ok(None);
    }
    tp_view(tensor, config.tp, coord.tp).map(Some)
}

/// Every rank holding part of `tensor`, with its view.
pub fn owners(
    tensor: &TensorSpec,
    config: &ParallelConfig,
) -> Result<BTreeMap<RankId, ShardView>, TopologyError> {
    let stage = config
        .stage_of_layer(tensor.layer)
        .ok_or_else(|| TopologyError::LayerOutOfRange {
            tensor: tensor.id.to_string(),
            layer: tensor.layer,
            layers: config.layer_assignment.len(),
        })?;
    let mut out = BTreeMap::new();
    for (rank, coord) in config.stage_ranks(stage) {
        out.insert(rank, tp_view(tensor, config.tp, coord.tp)?);
    }
    Ok(out)
}

/// A reason a configuration cannot host a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ZeroDegree { axis: &'static str },
    RankCountMismatch { tp: u32, pp: u32, dp: u32, ranks: usize },
    DuplicateRank(RankId),
    LayerAssignmentLength { expected: usize, got: usize },
    StageOutOfRange { layer: usize, stage: u32 },
    NonContiguousStage { stage: u32 },
    EmptyStage { stage: u32 },
    AxisShorterThanTp { tensor: String, len: u64, tp: u32 },
    EmptyTpBlock { tensor: String, len: u64, tp: u32 },
    NoLayers,
    ZeroElementWidth,
    NonPositiveStateMultiplier,
    DuplicateTensor(String),
    TensorLayerOutOfRange { tensor: String, layer: usize },
    DegenerateShape(String),
    ShardAxisOutOfRange { tensor: String, axis: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDegree { axis } => write!(f, "{axis} degree must be positive"),
            Violation::RankCountMismatch { tp, pp, dp, ranks } => write!(
                f,
                "tp*pp*dp = {tp}*{pp}*{dp} = {} does not match {ranks} ranks",
                u64::from(*tp) * u64::from(*pp) * u64::from(*dp)
            ),
            Violation::DuplicateRank(r) => write!(f, "rank {r} listed more than once"),
            Violation::LayerAssignmentLength { expected, got } => {
                write!(f, "layer assignment covers {got} layers, model has {expected}")
            }
            Violation::StageOutOfRange { layer, stage } => {
                write!(f, "layer {layer} assigned to stage {stage} outside [0, pp)")
            }
            Violation::NonContiguousStage { stage } => {
                write!(f, "stage {stage} does not own a contiguous layer range")
            }
            Violation::EmptyStage { stage } => write!(f, "stage {stage} hosts no layers"),
            Violation::AxisShorterThanTp { tensor, len, tp } => {
                write!(f, "tensor `{tensor}` sharded axis has length {len} < tp {tp}")
            }
            Violation::EmptyTpBlock { tensor, len, tp } => write!(
                f,
                "tensor `{tensor}` sharded axis of length {len} leaves an empty block at tp {tp}"
            ),
            Violation::NoLayers => write!(f, "model has no layers"),
            Violation::ZeroElementWidth => write!(f, "bytes_per_element must be positive"),
            Violation::NonPositiveStateMultiplier => write!(f, "state_multiplier must be positive"),
            Violation::DuplicateTensor(id) => write!(f, "tensor `{id}` defined twice"),
            Violation::TensorLayerOutOfRange { tensor, layer } => {
                write!(f, "tensor `{tensor}` references missing layer {layer}")
            }
            Violation::DegenerateShape(id) => write!(f, "tensor `{id}` has an empty or zero-sized shape"),
            Violation::ShardAxisOutOfRange { tensor, axis } => {
                write!(f, "tensor `{tensor}` shard axis {axis} out of range")
            }
        }
    }
}

/// Checks every configuration invariant against `model`. Never panics.
pub fn validate_config(config: &ParallelConfig, model: &ModelSpec) -> Result<(), Vec<Violation>> {
    let mut out = model.check();
    for (axis, d) in [("tp", config.tp), ("pp", config.pp), ("dp", config.dp)] {
        if d == 0 {
            out.push(Violation::ZeroDegree { axis });
        }
    }
    let product = u64::from(config.tp) * u64::from(config.pp) * u64::from(config.dp);
    if product != config.ranks.len() as u64 {
        out.push(Violation::RankCountMismatch {
            tp: config.tp,
            pp: config.pp,
            dp: config.dp,
            ranks: config.ranks.len(),
        });
    }
    let mut seen = BTreeSet::new();
    for &r in &config.ranks {
        if !seen.insert(r) {
            out.push(Violation::DuplicateRank(r));
        }
    }

    if config.layer_assignment.len() != model.num_layers {
        out.push(Violation::LayerAssignmentLength {
            expected: model.num_layers,
            got: config.layer_assignment.len(),
        });
    }
    if config.pp > 0 {
        for (layer, &stage) in config.layer_assignment.iter().enumerate() {
            if stage >= config.pp {
                out.push(Violation::StageOutOfRange { layer, stage });
            }
        }
        // contiguity: stages appear in non-decreasing order, each once as a run
        let mut runs: Vec<u32> = Vec::new();
        for &stage in &config.layer_assignment {
            if runs.last() != Some(&stage) {
                runs.push(stage);
            }
        }
        let mut reported = BTreeSet::new();
        let mut run_seen = BTreeSet::new();
        for &stage in &runs {
            if !run_seen.insert(stage) && reported.insert(stage) {
                out.push(Violation::NonContiguousStage { stage });
            }
        }
        for stage in 0..config.pp {
            if !run_seen.contains(&stage) {
                out.push(Violation::EmptyStage { stage });
            }
        }
    }

    if config.tp > 0 {
        for t in &model.tensors {
            let Some(axis) = t.tp_shard_axis else { continue };
            let Some(&len) = t.shape.get(axis) else { continue };
            if len < u64::from(config.tp) {
                out.push(Violation::AxisShorterThanTp {
                    tensor: t.id.to_string(),
                    len,
                    tp: config.tp,
                });
            } else if block_interval(len, config.tp, config.tp - 1).is_empty() {
                out.push(Violation::EmptyTpBlock {
                    tensor: t.id.to_string(),
                    len,
                    tp: config.tp,
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
