//! Layer-streaming execution of a transfer plan through a fixed-size staging
//! buffer.
//!
//! Layers run in ascending order. Within a layer every source slices its
//! local buffers and sends; every destination drains its inbound links into
//! the staging buffer, flushing (scattering into its pre-allocated shard)
//! whenever the next chunk would not fit. A barrier closes each layer, so
//! staged bytes never accumulate across layers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::planner::{TransferPlan, TransferTask};
use crate::topology::{owners, Interval, ModelSpec, ParallelConfig, RankId, ShardView, TopologyError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("transport failed in layer {layer}: {source}")]
    Transport {
        layer: usize,
        #[source]
        source: TransportError,
    },
    #[error("task of {bytes} bytes exceeds staging buffer of {capacity} bytes and chunking is off")]
    StagingOverflow { bytes: u64, capacity: u64 },
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("link {src}->{dst} is down")]
    LinkDown { src: RankId, dst: RankId },
    #[error("nothing pending on link {src}->{dst}")]
    Empty { src: RankId, dst: RankId },
}

/// Row-major bytes of one rank's shard of one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub view: ShardView,
    pub data: Vec<u8>,
}

/// Per-rank shard buffers, keyed by tensor id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShardStore {
    pub bytes_per_element: usize,
    pub ranks: BTreeMap<RankId, BTreeMap<Arc<str>, Shard>>,
    /// Set when an execution aborted before every layer landed.
    pub incomplete: bool,
}

impl ShardStore {
    /// Zero-filled buffers for every view of `config`.
    pub fn allocate(model: &ModelSpec, config: &ParallelConfig) -> Result<Self, TopologyError> {
        let bpe = model.bytes_per_element as usize;
        let mut ranks: BTreeMap<RankId, BTreeMap<Arc<str>, Shard>> =
            config.ranks.iter().map(|&r| (r, BTreeMap::new())).collect();
        for tensor in &model.tensors {
            for (rank, view) in owners(tensor, config)? {
                let len = view.num_elements() as usize * bpe;
                ranks.entry(rank).or_default().insert(
                    tensor.id.clone(),
                    Shard {
                        view,
                        data: vec![0; len],
                    },
                );
            }
        }
        Ok(Self {
            bytes_per_element: bpe,
            ranks,
            incomplete: false,
        })
    }

    /// Destination store for `config`: buffers whose (rank, tensor, view) are
    /// unchanged from `src` are carried over as-is (the same memory in a live
    /// system); everything else is freshly zero-filled.
    pub fn carry_over(src: &ShardStore, model: &ModelSpec, config: &ParallelConfig) -> Result<Self, TopologyError> {
        let mut dst = Self::allocate(model, config)?;
        for (rank, shards) in dst.ranks.iter_mut() {
            let Some(old) = src.ranks.get(rank) else { continue };
            for (id, shard) in shards.iter_mut() {
                if let Some(prev) = old.get(id) {
                    if prev.view == shard.view {
                        shard.data.clone_from(&prev.data);
                    }
                }
            }
        }
        Ok(dst)
    }

    /// Fills every buffer with `f(tensor_id, global_index, byte_in_element)`.
    pub fn fill_with(&mut self, mut f: impl FnMut(&str, &[u64], usize) -> u8) {
        let bpe = self.bytes_per_element;
        for shards in self.ranks.values_mut() {
            for (id, shard) in shards.iter_mut() {
                let mut off = 0;
                crate::planner::for_each_index(&shard.view, |idx| {
                    for b in 0..bpe {
                        shard.data[off + b] = f(id, idx, b);
                    }
                    off += bpe;
                });
            }
        }
    }

    pub fn shard(&self, rank: RankId, tensor: &str) -> Option<&Shard> {
        self.ranks.get(&rank)?.get(tensor)
    }

    fn shard_mut(&mut self, rank: RankId, tensor: &str) -> Option<&mut Shard> {
        self.ranks.get_mut(&rank)?.get_mut(tensor)
    }

    pub fn total_bytes(&self) -> usize {
        self.ranks.values().flat_map(|s| s.values()).map(|s| s.data.len()).sum()
    }
}

/// Visits the contiguous runs (innermost axis) of `bounds` inside `owner`,
/// yielding the owner-local element offset and run length.
fn for_each_run(owner: &ShardView, bounds: &ShardView, mut f: impl FnMut(usize, usize)) {
    let n = owner.ndim();
    if n == 0 {
        f(0, 1);
        return;
    }
    let owner_shape = owner.shape();
    let mut strides = vec![1usize; n];
    for d in (0..n - 1).rev() {
        strides[d] = strides[d + 1] * owner_shape[d + 1] as usize;
    }
    let run = bounds.bounds[n - 1].len() as usize;
    let mut idx: Vec<u64> = bounds.bounds.iter().map(|b| b.lo).collect();
    loop {
        let off: usize = (0..n)
            .map(|d| (idx[d] - owner.bounds[d].lo) as usize * strides[d])
            .sum();
        f(off, run);
        // advance all but the innermost axis
        let mut d = n - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < bounds.bounds[d].hi {
                break;
            }
            idx[d] = bounds.bounds[d].lo;
        }
    }
}

fn check_inside(owner: &ShardView, bounds: &ShardView) -> Result<(), ExecError> {
    if !owner.contains(bounds) || bounds.is_empty() {
        return Err(ExecError::Integrity(format!(
            "bounds {bounds} escape owner view {owner}"
        )));
    }
    Ok(())
}

/// Row-major bytes of `global_bounds`, read from a buffer laid out over
/// `owner_view`.
pub fn slice_local(
    buffer: &[u8],
    owner_view: &ShardView,
    global_bounds: &ShardView,
    elem_bytes: usize,
) -> Result<Vec<u8>, ExecError> {
    check_inside(owner_view, global_bounds)?;
    if buffer.len() != owner_view.num_elements() as usize * elem_bytes {
        return Err(ExecError::Integrity("buffer length does not match its view".into()));
    }
    let mut out = Vec::with_capacity(global_bounds.num_elements() as usize * elem_bytes);
    for_each_run(owner_view, global_bounds, |off, run| {
        out.extend_from_slice(&buffer[off * elem_bytes..(off + run) * elem_bytes]);
    });
    Ok(out)
}

/// Inverse of [`slice_local`].
pub fn scatter_local(
    buffer: &mut [u8],
    owner_view: &ShardView,
    global_bounds: &ShardView,
    payload: &[u8],
    elem_bytes: usize,
) -> Result<(), ExecError> {
    check_inside(owner_view, global_bounds)?;
    if payload.len() != global_bounds.num_elements() as usize * elem_bytes {
        return Err(ExecError::Integrity(format!(
            "payload of {} bytes does not fill {global_bounds}",
            payload.len()
        )));
    }
    if buffer.len() != owner_view.num_elements() as usize * elem_bytes {
        return Err(ExecError::Integrity("buffer length does not match its view".into()));
    }
    let mut pos = 0;
    for_each_run(owner_view, global_bounds, |off, run| {
        let n = run * elem_bytes;
        buffer[off * elem_bytes..off * elem_bytes + n].copy_from_slice(&payload[pos..pos + n]);
        pos += n;
    });
    Ok(())
}

/// Point-to-point byte transport. Implementations must deliver payloads
/// unmodified and in order per (src, dst) link.
pub trait Transport {
    fn send(&mut self, layer: usize, src: RankId, dst: RankId, payload: Vec<u8>) -> Result<(), TransportError>;
    fn recv(&mut self, src: RankId, dst: RankId) -> Result<Vec<u8>, TransportError>;
    fn barrier(&mut self, layer: usize) -> Result<(), TransportError>;
}

/// In-memory queues, one per link.
#[derive(Debug, Default)]
pub struct LoopbackTransport {
    queues: BTreeMap<(RankId, RankId), VecDeque<Vec<u8>>>,
    pub bytes_sent: u64,
}

impl LoopbackTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }
}

impl Transport for LoopbackTransport {
    fn send(&mut self, _layer: usize, src: RankId, dst: RankId, payload: Vec<u8>) -> Result<(), TransportError> {
        self.bytes_sent += payload.len() as u64;
        self.queues.entry((src, dst)).or_default().push_back(payload);
        Ok(())
    }

    fn recv(&mut self, src: RankId, dst: RankId) -> Result<Vec<u8>, TransportError> {
        self.queues
            .get_mut(&(src, dst))
            .and_then(VecDeque::pop_front)
            .ok_or(TransportError::Empty { src, dst })
    }

    fn barrier(&mut self, _layer: usize) -> Result<(), TransportError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Send,
    Barrier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: TraceKind,
    pub layer: usize,
    pub src: RankId,
    pub dst: RankId,
    pub bytes: u64,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TraceKind::Send => write!(f, "{} send layer={} src={} dst={} bytes={}", self.seq, self.layer, self.src, self.dst, self.bytes),
            TraceKind::Barrier => write!(f, "{} barrier layer={}", self.seq, self.layer),
        }
    }
}

/// Loopback delivery plus a time-ordered trace of every send and barrier.
#[derive(Debug, Default)]
pub struct RecordingTransport {
    inner: LoopbackTransport,
    pub trace: Vec<TraceEvent>,
}

impl RecordingTransport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Network bytes per link for each layer, as observed on the wire.
    pub fn layer_link_bytes(&self) -> BTreeMap<usize, BTreeMap<(RankId, RankId), u64>> {
        let mut out: BTreeMap<usize, BTreeMap<(RankId, RankId), u64>> = BTreeMap::new();
        for e in self.trace.iter().filter(|e| e.kind == TraceKind::Send) {
            *out.entry(e.layer).or_default().entry((e.src, e.dst)).or_default() += e.bytes;
        }
        out
    }

    pub fn dump(&self) -> String {
        self.trace.iter().map(|e| format!("{e}\n")).collect()
    }
}

impl Transport for RecordingTransport {
    fn send(&mut self, layer: usize, src: RankId, dst: RankId, payload: Vec<u8>) -> Result<(), TransportError> {
        self.trace.push(TraceEvent {
            seq: self.trace.len() as u64,
            kind: TraceKind::Send,
            layer,
            src,
            dst,
            bytes: payload.len() as u64,
        });
        self.inner.send(layer, src, dst, payload)
    }

    fn recv(&mut self, src: RankId, dst: RankId) -> Result<Vec<u8>, TransportError> {
        self.inner.recv(src, dst)
    }

    fn barrier(&mut self, layer: usize) -> Result<(), TransportError> {
        self.trace.push(TraceEvent {
            seq: self.trace.len() as u64,
            kind: TraceKind::Barrier,
            layer,
            src: 0,
            dst: 0,
            bytes: 0,
        });
        self.inner.barrier(layer)
    }
}

/// Loopback transport whose sends start failing once a given layer is reached.
#[derive(Debug, Default)]
pub struct FailingTransport {
    inner: LoopbackTransport,
    pub fail_at_layer: usize,
}

impl FailingTransport {
    pub fn new(fail_at_layer: usize) -> Self {
        Self {
            inner: LoopbackTransport::new(),
            fail_at_layer,
        }
    }
}

impl Transport for FailingTransport {
    fn send(&mut self, layer: usize, src: RankId, dst: RankId, payload: Vec<u8>) -> Result<(), TransportError> {
        if layer >= self.fail_at_layer {
            return Err(TransportError::LinkDown { src, dst });
        }
        self.inner.send(layer, src, dst, payload)
    }

    fn recv(&mut self, src: RankId, dst: RankId) -> Result<Vec<u8>, TransportError> {
        self.inner.recv(src, dst)
    }

    fn barrier(&mut self, layer: usize) -> Result<(), TransportError> {
        self.inner.barrier(layer)
    }
}

/// Fixed-capacity receive buffer with a high-water mark.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagingBuffer {
    capacity: u64,
    resident: u64,
    high_water_mark: u64,
}

impl StagingBuffer {
    pub fn new(capacity: u64) -> Self {
        Self {
            capacity,
            resident: 0,
            high_water_mark: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn high_water_mark(&self) -> u64 {
        self.high_water_mark
    }

    pub fn fits(&self, bytes: u64) -> bool {
        self.resident + bytes <= self.capacity
    }

    fn stage(&mut self, bytes: u64) -> Result<(), ExecError> {
        if !self.fits(bytes) {
            return Err(ExecError::StagingOverflow {
                bytes,
                capacity: self.capacity,
            });
        }
        self.resident += bytes;
        self.high_water_mark = self.high_water_mark.max(self.resident);
        Ok(())
    }

    fn reset(&mut self) {
        self.resident = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub staging_bytes: u64,
    /// Split tasks larger than the staging buffer along their outermost axis.
    pub chunking: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            staging_bytes: DEFAULT_STAGING_BYTES,
            chunking: true,
        }
    }
}

/// Scaled-down default staging buffer used by tests and the CLI.
pub const DEFAULT_STAGING_BYTES: u64 = 4 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExecutionReport {
    pub peak_staging_bytes: u64,
    /// Bytes that crossed the transport.
    pub bytes_moved: u64,
    pub local_bytes: u64,
    pub layers_processed: usize,
    pub chunks: u64,
}

impl fmt::Display for ExecutionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "peak_staging_bytes={}", self.peak_staging_bytes)?;
        writeln!(f, "bytes_moved={}", self.bytes_moved)?;
        writeln!(f, "local_bytes={}", self.local_bytes)?;
        writeln!(f, "layers_processed={}", self.layers_processed)?;
        writeln!(f, "chunks={}", self.chunks)
    }
}

/// Splits `bounds` along its outermost splittable axis into pieces whose
/// byte size is at most `limit`.
pub fn chunk_bounds(bounds: &ShardView, elem_bytes: u64, limit: u64) -> Result<Vec<ShardView>, ExecError> {
    let total = bounds.num_elements() * elem_bytes;
    if total <= limit {
        return Ok(vec![bounds.clone()]);
    }
    // find the outermost axis whose unit slab fits
    for axis in 0..bounds.ndim() {
        let inner: u64 = bounds.bounds[axis + 1..].iter().map(Interval::len).product::<u64>() * elem_bytes;
        let outer: u64 = bounds.bounds[..axis].iter().map(Interval::len).product();
        if outer == 1 && inner <= limit && inner > 0 {
            let step = (limit / inner).max(1);
            let iv = bounds.bounds[axis];
            let mut out = Vec::new();
            let mut lo = iv.lo;
            while lo < iv.hi {
                let hi = (lo + step).min(iv.hi);
                let mut b = bounds.clone();
                b.bounds[axis] = Interval::new(lo, hi);
                out.push(b);
                lo = hi;
            }
            return Ok(out);
        }
        if outer == 1 && bounds.bounds[axis].len() > 1 {
            // one slab along this axis is still too large: split into unit slabs
            // and recurse on each
            let iv = bounds.bounds[axis];
            let mut out = Vec::new();
            for x in iv.lo..iv.hi {
                let mut b = bounds.clone();
                b.bounds[axis] = Interval::new(x, x + 1);
                out.extend(chunk_bounds(&b, elem_bytes, limit)?);
            }
            return Ok(out);
        }
    }
    Err(ExecError::StagingOverflow {
        bytes: elem_bytes,
        capacity: limit,
    })
}

/// Executes `plan` layer by layer. `dst_store` must already hold every
/// destination view (see [`ShardStore::carry_over`]).
pub fn execute_plan(
    plan: &TransferPlan,
    src_store: &ShardStore,
    dst_store: &mut ShardStore,
    transport: &mut dyn Transport,
    options: ExecOptions,
) -> Result<ExecutionReport, ExecError> {
    let result = run_layers(plan, src_store, dst_store, transport, options);
    if result.is_err() {
        dst_store.incomplete = true;
    }
    result
}

fn run_layers(
    plan: &TransferPlan,
    src_store: &ShardStore,
    dst_store: &mut ShardStore,
    transport: &mut dyn Transport,
    options: ExecOptions,
) -> Result<ExecutionReport, ExecError> {
    let elem = src_store.bytes_per_element.max(1);
    let mut report = ExecutionReport::default();
    // allocated once, reused for every layer
    let mut staging = StagingBuffer::new(options.staging_bytes);

    for (&layer, tasks) in &plan.tasks_by_layer {
        // (task, chunk bounds) pairs in deterministic plan order
        let mut pieces: Vec<(&TransferTask, ShardView)> = Vec::new();
        for task in tasks {
            let src_shard = src_store.shard(task.src, &task.tensor_id).ok_or_else(|| {
                ExecError::Integrity(format!("rank {} holds no `{}`", task.src, task.tensor_id))
            })?;
            check_inside(&src_shard.view, &task.bounds)?;
            if task.is_local() {
                let bytes = slice_local(&src_shard.data, &src_shard.view, &task.bounds, elem)?;
                let dst = dst_store.shard_mut(task.dst, &task.tensor_id).ok_or_else(|| {
                    ExecError::Integrity(format!("rank {} has no buffer for `{}`", task.dst, task.tensor_id))
                })?;
                scatter_local(&mut dst.data, &dst.view, &task.bounds, &bytes, elem)?;
                report.local_bytes += bytes.len() as u64;
                continue;
            }
            let chunks = if task.byte_size > options.staging_bytes {
                if !options.chunking {
                    return Err(ExecError::StagingOverflow {
                        bytes: task.byte_size,
                        capacity: options.staging_bytes,
                    });
                }
                chunk_bounds(&task.bounds, elem as u64, options.staging_bytes)?
            } else {
                vec![task.bounds.clone()]
            };
            pieces.extend(chunks.into_iter().map(|c| (task, c)));
        }

        // sources
        for (task, bounds) in &pieces {
            let shard = src_store.shard(task.src, &task.tensor_id).expect("checked above");
            let payload = slice_local(&shard.data, &shard.view, bounds, elem)?;
            transport
                .send(layer, task.src, task.dst, payload)
                .map_err(|source| ExecError::Transport { layer, source })?;
            report.chunks += 1;
        }

        // destinations, in rank order
        let dsts: BTreeSet<RankId> = pieces.iter().map(|(t, _)| t.dst).collect();
        for dst in dsts {
            let mut staged: Vec<(&TransferTask, &ShardView, Vec<u8>)> = Vec::new();
            for (task, bounds) in pieces.iter().filter(|(t, _)| t.dst == dst) {
                let len = bounds.num_elements() * elem as u64;
                if !staging.fits(len) {
                    flush(&mut staged, dst_store, elem)?;
                    staging.reset();
                }
                let payload = transport
                    .recv(task.src, task.dst)
                    .map_err(|source| ExecError::Transport { layer, source })?;
                if payload.len() as u64 != len {
                    return Err(ExecError::Integrity(format!(
                        "received {} bytes for a {len}-byte chunk",
                        payload.len()
                    )));
                }
                staging.stage(len)?;
                report.bytes_moved += len;
                staged.push((task, bounds, payload));
            }
            flush(&mut staged, dst_store, elem)?;
            staging.reset();
        }

        transport
            .barrier(layer)
            .map_err(|source| ExecError::Transport { layer, source })?;
        report.layers_processed += 1;
    }
    report.peak_staging_bytes = staging.high_water_mark();
    Ok(report)
}

fn flush(
    staged: &mut Vec<(&TransferTask, &ShardView, Vec<u8>)>,
    dst_store: &mut ShardStore,
    elem: usize,
) -> Result<(), ExecError> {
    for (task, bounds, payload) in staged.drain(..) {
        let dst = dst_store.shard_mut(task.dst, &task.tensor_id).ok_or_else(|| {
            ExecError::Integrity(format!("rank {} has no buffer for `{}`", task.dst, task.tensor_id))
        })?;
        scatter_local(&mut dst.data, &dst.view, bounds, &payload, elem)?;
    }
    Ok(())
}

/// Reference resharding: materializes every full tensor from `src` (reading
/// each index from the lowest rank that holds it) and re-slices it for each
/// view of `new`. Test oracle only; memory is proportional to the model.
pub fn gather_reslice(src: &ShardStore, model: &ModelSpec, new: &ParallelConfig) -> Result<ShardStore, ExecError> {
    let elem = model.bytes_per_element as usize;
    let mut out = ShardStore::allocate(model, new)?;
    for tensor in &model.tensors {
        let full = tensor.full_view();
        let mut data = vec![0u8; full.num_elements() as usize * elem];
        let mut filled = vec![false; full.num_elements() as usize];
        for shards in src.ranks.values() {
            let Some(shard) = shards.get(&tensor.id) else { continue };
            let mut off = 0;
            crate::planner::for_each_index(&shard.view, |idx| {
                let mut lin = 0usize;
                for (d, &x) in idx.iter().enumerate() {
                    lin = lin * tensor.shape[d] as usize + x as usize;
                }
                if !filled[lin] {
                    data[lin * elem..(lin + 1) * elem].copy_from_slice(&shard.data[off..off + elem]);
                    filled[lin] = true;
                }
                off += elem;
            });
        }
        if filled.iter().any(|f| !f) {
            return Err(ExecError::Integrity(format!("source store misses part of `{}`", tensor.id)));
        }
        for shards in out.ranks.values_mut() {
            let Some(shard) = shards.get_mut(&tensor.id) else { continue };
            let bytes = slice_local(&data, &full, &shard.view, elem)?;
            shard.data = bytes;
        }
    }
    Ok(out)
}

/// Largest absolute difference between corresponding elements of two
/// stores, interpreting elements as little-endian unsigned integers.
/// `None` when the stores do not hold the same shards.
pub fn max_deviation(a: &ShardStore, b: &ShardStore) -> Option<u64> {
    if a.bytes_per_element != b.bytes_per_element || a.ranks.len() != b.ranks.len() {
        return None;
    }
    let elem = a.bytes_per_element.max(1);
    let mut worst = 0u64;
    for (rank, shards) in &a.ranks {
        let other = b.ranks.get(rank)?;
        if shards.len() != other.len() {
            return None;
        }
        for (id, s) in shards {
            let o = other.get(id)?;
            if s.view != o.view || s.data.len() != o.data.len() {
                return None;
            }
            for (x, y) in s.data.chunks(elem).zip(o.data.chunks(elem)) {
                let vx = x.iter().rev().fold(0u64, |acc, &v| (acc << 8) | u64::from(v));
                let vy = y.iter().rev().fold(0u64, |acc, &v| (acc << 8) | u64::from(v));
                worst = worst.max(vx.abs_diff(vy));
            }
        }
    }
    Some(worst)
}
