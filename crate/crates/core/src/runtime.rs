//! Dual-world reconfiguration lifecycle.
//!
//! A [`Controller`] owns the active configuration and a simulated training
//! clock. A resize trigger moves it from `Stable` to `Prepare`, where the
//! shadow generation is bootstrapped by timed preparation tasks while the
//! active world keeps iterating. Once every task is done the controller is
//! `Ready`; at the next iteration boundary it drains, streams state, swaps
//! generations and returns to `Stable` through `Cleanup`. Only that switch
//! window pauses training.
//!
//! The same clock also models checkpoint-based recovery, so restart
//! baselines and fail-stop handling share the accounting of the live path.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::planner::{compute_transfer_plan, PlanError, TransferPlan};
use crate::simulator::cost::CostModel;
use crate::simulator::{restart_latency, RestartStrategy};
use crate::topology::{validate_config, ModelSpec, ParallelConfig, RankId, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Stable,
    Prepare,
    Ready,
    Switch,
    Cleanup,
}

impl Phase {
    /// Whether `self -> next` is an edge of the lifecycle. Aborts return to
    /// `Stable` from any phase before the switch commits.
    pub fn can_move_to(self, next: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, next),
            (Stable, Prepare)
                | (Prepare, Ready)
                | (Ready, Switch)
                | (Switch, Cleanup)
                | (Cleanup, Stable)
                | (Prepare, Stable)
                | (Ready, Stable)
                | (Switch, Stable)
                | (Stable, Stable)
        )
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Stable => "stable",
            Phase::Prepare => "prepare",
            Phase::Ready => "ready",
            Phase::Switch => "switch",
            Phase::Cleanup => "cleanup",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("target generation {got} does not follow active generation {active}")]
    NonMonotonicGeneration { active: u64, got: u64 },
    #[error("invalid target configuration: {}", join(.0))]
    InvalidTarget(Vec<Violation>),
    #[error("generation {requested} is stale; active generation is {active}")]
    StaleGeneration { requested: u64, active: u64 },
    #[error("generation {0} is unknown")]
    UnknownGeneration(u64),
    #[error("operation requires phase {expected}, controller is in {actual}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("consistent cut requested mid-iteration at t={0}s")]
    MidIterationCut(f64),
    #[error("time moved backwards: {now}s < {clock}s")]
    TimeReversal { now: f64, clock: f64 },
    #[error(transparent)]
    Plan(#[from] PlanError),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PrepKind {
    TcpBootstrap,
    TopologyDiscovery,
    CommunicatorSetup,
    MockWarmup,
    PlanCompute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepTask {
    pub kind: PrepKind,
    pub ranks: Vec<RankId>,
    pub start_s: f64,
    pub duration_s: f64,
    pub completed: bool,
}

impl PrepTask {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    /// Seconds of this task done by `t`.
    pub fn progress_at(&self, t: f64) -> f64 {
        (t - self.start_s).clamp(0.0, self.duration_s)
    }
}

/// Preparation tasks for moving from `active` to `target`, starting at
/// `start_s`. Bootstrap, discovery and communicator setup run as a chain;
/// cold joiners spawn and warm up in parallel with it; planning runs on the
/// controller alongside both.
pub fn prep_schedule(
    active: &ParallelConfig,
    target: &ParallelConfig,
    model: &ModelSpec,
    cost: &CostModel,
    start_s: f64,
) -> Vec<PrepTask> {
    let world = target.world_size();
    let old: BTreeSet<RankId> = active.ranks.iter().copied().collect();
    let joiners: Vec<RankId> = target.ranks.iter().copied().filter(|r| !old.contains(r)).collect();
    let mut tasks = Vec::with_capacity(5);
    let mut t = start_s;
    for (kind, d) in [
        (PrepKind::TcpBootstrap, cost.tcp_bootstrap_s),
        (PrepKind::TopologyDiscovery, cost.discovery_s(world)),
        (PrepKind::CommunicatorSetup, cost.communicator_s(world)),
    ] {
        tasks.push(PrepTask {
            kind,
            ranks: target.ranks.clone(),
            start_s: t,
            duration_s: d,
            completed: false,
        });
        t += d;
    }
    if !joiners.is_empty() {
        tasks.push(PrepTask {
            kind: PrepKind::MockWarmup,
            ranks: joiners,
            start_s,
            duration_s: cost.process_spawn_s + cost.warmup_s(model),
            completed: false,
        });
    }
    tasks.push(PrepTask {
        kind: PrepKind::PlanCompute,
        ranks: Vec::new(),
        start_s,
        duration_s: cost.plan_s,
        completed: false,
    });
    tasks
}

/// Wall-clock length of a preparation schedule.
pub fn prepare_duration(tasks: &[PrepTask]) -> f64 {
    let start = tasks.iter().map(|t| t.start_s).fold(f64::INFINITY, f64::min);
    let end = tasks.iter().map(PrepTask::end_s).fold(f64::NEG_INFINITY, f64::max);
    if tasks.is_empty() {
        0.0
    } else {
        end - start
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockCall {
    pub name: &'static str,
    pub payload_bytes: u64,
}

/// Collective calls intercepted on cold ranks during warmup.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MockCollectiveLedger {
    pub calls: BTreeMap<RankId, Vec<MockCall>>,
    /// Bytes that reached a transport while in mock mode.
    pub transport_bytes: u64,
}

impl MockCollectiveLedger {
    pub fn call_count(&self) -> usize {
        self.calls.values().map(Vec::len).sum()
    }

    pub fn merge(&mut self, other: MockCollectiveLedger) {
        for (r, calls) in other.calls {
            self.calls.entry(r).or_default().extend(calls);
        }
        self.transport_bytes += other.transport_bytes;
    }
}

/// Warmup of one rank in mock mode. A cold rank runs the configured warmup
/// and records the collectives a first training step issues, each answered
/// locally; a warm rank does nothing.
pub fn simulate_mock_warmup(rank: RankId, cold: bool, model: &ModelSpec, cost: &CostModel) -> (f64, MockCollectiveLedger) {
    let mut ledger = MockCollectiveLedger::default();
    if !cold {
        return (0.0, ledger);
    }
    let layer_bytes = model
        .tensors
        .iter()
        .filter(|t| t.layer == 0)
        .map(|t| t.num_elements() * u64::from(model.bytes_per_element))
        .sum::<u64>();
    let mut calls = vec![MockCall {
        name: "barrier",
        payload_bytes: 0,
    }];
    for _ in 0..model.num_layers {
        calls.push(MockCall {
            name: "all_reduce",
            payload_bytes: layer_bytes,
        });
    }
    calls.push(MockCall {
        name: "all_gather",
        payload_bytes: layer_bytes,
    });
    calls.push(MockCall {
        name: "broadcast",
        payload_bytes: 8,
    });
    ledger.calls.insert(rank, calls);
    (cost.warmup_s(model), ledger)
}

/// Snapshot of the lifecycle.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationState {
    pub phase: Phase,
    pub active: ParallelConfig,
    pub shadow: Option<ParallelConfig>,
    pub iteration: u64,
}

impl GenerationState {
    /// Structural invariants every snapshot must satisfy.
    pub fn check(&self) -> Result<(), String> {
        match (&self.shadow, self.phase) {
            (None, Phase::Stable) => Ok(()),
            (Some(_), Phase::Stable) => Err("shadow generation present while stable".into()),
            (None, p) => Err(format!("no shadow generation in phase {p}")),
            (Some(s), _) if s.generation_id != self.active.generation_id + 1 => Err(format!(
                "shadow generation {} does not follow active {}",
                s.generation_id, self.active.generation_id
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub t_s: f64,
    pub from: Phase,
    pub to: Phase,
    pub gen_active: u64,
    pub gen_shadow: Option<u64>,
    /// Live-path training pause charged by this transition.
    pub pause_accrued_s: f64,
    /// Checkpoint-recovery downtime charged by this transition.
    pub recovery_s: f64,
}

impl fmt::Display for TransitionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shadow = self.gen_shadow.map_or_else(|| "-".to_string(), |g| g.to_string());
        write!(
            f,
            "{:.3} {}->{} active={} shadow={} pause={:.3} recovery={:.3}",
            self.t_s, self.from, self.to, self.gen_active, shadow, self.pause_accrued_s, self.recovery_s
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationKind {
    StagingBuffer,
    CommunicatorMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationRecord {
    pub t_s: f64,
    pub rank: RankId,
    pub kind: AllocationKind,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryMode {
    /// Roll back to the last durable checkpoint.
    Checkpoint,
    /// The switch already committed; the new world is authoritative.
    NotNeeded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FallbackOutcome {
    pub recovery_mode: RecoveryMode,
    pub reusable_prep: Vec<PrepKind>,
    /// Seconds of recovery initialization already done by the shadow world.
    pub credit_s: f64,
    pub resume_iteration: u64,
    /// The iteration the active world had reached when the failure hit.
    pub failed_at_iteration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerOutcome {
    Preparing,
    /// Position in the pending queue (0 = next).
    Queued(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventCause {
    LiveSwitch,
    Restart(RestartStrategy),
    /// Live handoff abandoned because preparation outlasted the window.
    WindowFallback,
    FailStop,
}

/// Downtime charged by one reconfiguration or recovery.
#[derive(Debug, Clone, PartialEq)]
pub struct EventOutcome {
    pub t_s: f64,
    pub cause: EventCause,
    pub pause_s: f64,
    pub load_s: f64,
    pub init_s: f64,
    pub misc_s: f64,
    pub drain_s: f64,
    pub transfer_s: f64,
    pub swap_s: f64,
    pub transfer_bytes: f64,
    pub prepare_s: f64,
    /// GPU-seconds of completed iterations discarded by a rollback.
    pub lost_gpu_s: f64,
    pub gpus_before: usize,
    pub gpus_after: usize,
}

impl EventOutcome {
    fn new(t_s: f64, cause: EventCause, gpus_before: usize, gpus_after: usize) -> Self {
        Self {
            t_s,
            cause,
            pause_s: 0.0,
            load_s: 0.0,
            init_s: 0.0,
            misc_s: 0.0,
            drain_s: 0.0,
            transfer_s: 0.0,
            swap_s: 0.0,
            transfer_bytes: 0.0,
            prepare_s: 0.0,
            lost_gpu_s: 0.0,
            gpus_before,
            gpus_after,
        }
    }
}

/// GPU-second ledger. `useful + lost + downtime + idle == allocated` at
/// every step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Accounting {
    pub allocated_gpu_s: f64,
    pub useful_gpu_s: f64,
    pub lost_gpu_s: f64,
    pub downtime_gpu_s: f64,
    pub idle_gpu_s: f64,
    /// Wall-clock seconds training was stopped.
    pub downtime_s: f64,
    pub pause_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuntimeOptions {
    /// Iterations between durable checkpoints.
    pub checkpoint_interval: u64,
    pub staging_bytes: u64,
    /// Strategy used for checkpoint recovery after a fail-stop or an
    /// abandoned handoff.
    pub recovery_strategy: RestartStrategy,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        Self {
            checkpoint_interval: 100,
            staging_bytes: 512 << 20,
            recovery_strategy: RestartStrategy::ColdRestart,
        }
    }
}

#[derive(Debug, Clone)]
struct Pending {
    target: ParallelConfig,
    window_s: Option<f64>,
}

/// The single serialized decision point of the lifecycle.
#[derive(Debug, Clone)]
pub struct Controller {
    model: ModelSpec,
    cost: CostModel,
    options: RuntimeOptions,
    phase: Phase,
    active: ParallelConfig,
    shadow: Option<ParallelConfig>,
    retired: BTreeSet<u64>,
    tasks: Vec<PrepTask>,
    plan: Option<TransferPlan>,
    deadline_s: Option<f64>,
    prepare_started_s: f64,
    queue: VecDeque<Pending>,
    clock_s: f64,
    iteration: u64,
    last_checkpoint: u64,
    since_checkpoint_gpu_s: f64,
    iter_start_s: f64,
    iter_duration_s: f64,
    iter_nominal_s: f64,
    iter_phase: Phase,
    log: Vec<TransitionRecord>,
    allocations: Vec<AllocationRecord>,
    mock: MockCollectiveLedger,
    outcomes: Vec<EventOutcome>,
    acct: Accounting,
    iteration_durations: Vec<(Phase, f64)>,
    record_iterations: bool,
}

impl Controller {
    pub fn new(model: ModelSpec, active: ParallelConfig, cost: CostModel, options: RuntimeOptions) -> Result<Self, RuntimeError> {
        validate_config(&active, &model).map_err(RuntimeError::InvalidTarget)?;
        let mut c = Self {
            model,
            cost,
            options,
            phase: Phase::Stable,
            active,
            shadow: None,
            retired: BTreeSet::new(),
            tasks: Vec::new(),
            plan: None,
            deadline_s: None,
            prepare_started_s: 0.0,
            queue: VecDeque::new(),
            clock_s: 0.0,
            iteration: 0,
            last_checkpoint: 0,
            since_checkpoint_gpu_s: 0.0,
            iter_start_s: 0.0,
            iter_duration_s: 0.0,
            iter_nominal_s: 0.0,
            iter_phase: Phase::Stable,
            log: Vec::new(),
            allocations: Vec::new(),
            mock: MockCollectiveLedger::default(),
            outcomes: Vec::new(),
            acct: Accounting::default(),
            iteration_durations: Vec::new(),
            record_iterations: false,
        };
        c.start_iteration(0.0);
        Ok(c)
    }

    /// Keeps (phase, duration) of every completed iteration.
    pub fn record_iterations(&mut self, on: bool) {
        self.record_iterations = on;
    }

    pub fn iteration_durations(&self) -> &[(Phase, f64)] {
        &self.iteration_durations
    }

    pub fn state(&self) -> GenerationState {
        GenerationState {
            phase: self.phase,
            active: self.active.clone(),
            shadow: self.shadow.clone(),
            iteration: self.iteration,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn active(&self) -> &ParallelConfig {
        &self.active
    }

    pub fn clock_s(&self) -> f64 {
        self.clock_s
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn last_checkpoint(&self) -> u64 {
        self.last_checkpoint
    }

    pub fn log(&self) -> &[TransitionRecord] {
        &self.log
    }

    pub fn allocations(&self) -> &[AllocationRecord] {
        &self.allocations
    }

    pub fn mock_ledger(&self) -> &MockCollectiveLedger {
        &self.mock
    }

    pub fn prep_tasks(&self) -> &[PrepTask] {
        &self.tasks
    }

    pub fn outcomes(&self) -> &[EventOutcome] {
        &self.outcomes
    }

    pub fn accounting(&self) -> Accounting {
        self.acct
    }

    pub fn queued(&self) -> impl Iterator<Item = &ParallelConfig> {
        self.queue.iter().map(|p| &p.target)
    }

    pub fn next_generation(&self) -> u64 {
        self.active.generation_id + 1
    }

    /// Routing lookup by generation id.
    pub fn lookup(&self, generation: u64) -> Result<&ParallelConfig, RuntimeError> {
        if generation == self.active.generation_id {
            return Ok(&self.active);
        }
        if let Some(s) = &self.shadow {
            if generation == s.generation_id {
                return Ok(s);
            }
        }
        if generation < self.active.generation_id || self.retired.contains(&generation) {
            Err(RuntimeError::StaleGeneration {
                requested: generation,
                active: self.active.generation_id,
            })
        } else {
            Err(RuntimeError::UnknownGeneration(generation))
        }
    }

    fn transition(&mut self, to: Phase, pause_accrued_s: f64, recovery_s: f64) {
        debug_assert!(self.phase.can_move_to(to), "{} -> {}", self.phase, to);
        self.log.push(TransitionRecord {
            t_s: self.clock_s,
            from: self.phase,
            to,
            gen_active: self.active.generation_id,
            gen_shadow: self.shadow.as_ref().map(|s| s.generation_id),
            pause_accrued_s,
            recovery_s,
        });
        self.phase = to;
    }

    fn start_iteration(&mut self, at: f64) {
        self.iter_start_s = at;
        self.iter_nominal_s = self.cost.iteration_time_s(&self.active, &self.model);
        self.iter_phase = self.phase;
        self.iter_duration_s = if self.phase == Phase::Prepare {
            self.cost.prepare_iteration_time_s(&self.active, &self.model)
        } else {
            self.iter_nominal_s
        };
    }

    fn world(&self) -> f64 {
        self.active.world_size() as f64
    }

    fn complete_iteration(&mut self) {
        let end = self.iter_start_s + self.iter_duration_s;
        let n = self.world();
        self.acct.allocated_gpu_s += n * self.iter_duration_s;
        self.acct.useful_gpu_s += n * self.iter_nominal_s;
        self.acct.idle_gpu_s += n * (self.iter_duration_s - self.iter_nominal_s);
        self.since_checkpoint_gpu_s += n * self.iter_nominal_s;
        if self.record_iterations {
            self.iteration_durations.push((self.iter_phase, self.iter_duration_s));
        }
        self.iteration += 1;
        if self.options.checkpoint_interval > 0 && self.iteration.is_multiple_of(self.options.checkpoint_interval) {
            self.last_checkpoint = self.iteration;
            self.since_checkpoint_gpu_s = 0.0;
        }
        self.clock_s = end;
        self.start_iteration(end);
    }

    /// Completes in one step all but the last whole iteration that ends
    /// before `horizon`, leaving boundary cases to the per-iteration path.
    fn skip_iterations(&mut self, horizon: f64) {
        if self.record_iterations || self.phase == Phase::Ready || self.iter_duration_s.is_nan() || self.iter_duration_s <= 0.0 {
            return;
        }
        let whole = ((horizon - self.iter_start_s) / self.iter_duration_s).floor();
        if whole.is_nan() || whole < 3.0 {
            return;
        }
        let k = whole as u64 - 2;
        let n = self.world();
        let kf = k as f64;
        self.acct.allocated_gpu_s += n * self.iter_duration_s * kf;
        self.acct.useful_gpu_s += n * self.iter_nominal_s * kf;
        self.acct.idle_gpu_s += n * (self.iter_duration_s - self.iter_nominal_s) * kf;
        let before = self.iteration;
        self.iteration += k;
        let every = self.options.checkpoint_interval;
        if every > 0 && self.iteration / every > before / every {
            self.last_checkpoint = self.iteration / every * every;
            self.since_checkpoint_gpu_s = (self.iteration - self.last_checkpoint) as f64 * n * self.iter_nominal_s;
        } else {
            self.since_checkpoint_gpu_s += n * self.iter_nominal_s * kf;
        }
        let end = self.iter_start_s + self.iter_duration_s * kf;
        self.clock_s = end;
        self.start_iteration(end);
    }

    /// Discards the iteration in flight at `now`.
    fn interrupt(&mut self, now: f64) -> f64 {
        let partial = (now - self.iter_start_s).max(0.0) * self.world();
        self.acct.allocated_gpu_s += partial;
        self.acct.lost_gpu_s += partial;
        self.clock_s = now;
        partial
    }

    fn rollback(&mut self) -> f64 {
        let lost = self.since_checkpoint_gpu_s;
        self.acct.useful_gpu_s -= lost;
        self.acct.lost_gpu_s += lost;
        self.since_checkpoint_gpu_s = 0.0;
        self.iteration = self.last_checkpoint;
        lost
    }

    fn charge_downtime(&mut self, seconds: f64, gpus: usize) {
        self.acct.allocated_gpu_s += seconds * gpus as f64;
        self.acct.downtime_gpu_s += seconds * gpus as f64;
        self.acct.downtime_s += seconds;
        self.clock_s += seconds;
    }

    fn check_time(&self, now: f64) -> Result<(), RuntimeError> {
        if now + 1e-9 < self.clock_s {
            return Err(RuntimeError::TimeReversal {
                now,
                clock: self.clock_s,
            });
        }
        Ok(())
    }

    fn check_target(&self, target: &ParallelConfig) -> Result<(), RuntimeError> {
        if target.generation_id != self.next_generation() {
            return Err(RuntimeError::NonMonotonicGeneration {
                active: self.active.generation_id,
                got: target.generation_id,
            });
        }
        validate_config(target, &self.model).map_err(RuntimeError::InvalidTarget)
    }

    /// Starts a live handoff to `target`, or queues it when a handoff is
    /// already in flight. Queued targets are renumbered to the next
    /// generation when they are dequeued. `window_s` bounds how long
    /// preparation may take before the handoff is abandoned.
    pub fn trigger_resize(&mut self, now: f64, target: ParallelConfig, window_s: Option<f64>) -> Result<TriggerOutcome, RuntimeError> {
        self.advance(now)?;
        if self.phase != Phase::Stable {
            if target.generation_id <= self.active.generation_id {
                return Err(RuntimeError::NonMonotonicGeneration {
                    active: self.active.generation_id,
                    got: target.generation_id,
                });
            }
            validate_config(&target, &self.model).map_err(RuntimeError::InvalidTarget)?;
            self.queue.push_back(Pending { target, window_s });
            return Ok(TriggerOutcome::Queued(self.queue.len() - 1));
        }
        self.check_target(&target)?;
        self.begin_prepare(target, window_s)?;
        Ok(TriggerOutcome::Preparing)
    }

    fn begin_prepare(&mut self, target: ParallelConfig, window_s: Option<f64>) -> Result<(), RuntimeError> {
        let now = self.clock_s;
        let plan = compute_transfer_plan(&self.active, &target, &self.model)?;
        self.tasks = prep_schedule(&self.active, &target, &self.model, &self.cost, now);
        let old: BTreeSet<RankId> = self.active.ranks.iter().copied().collect();
        for &r in &target.ranks {
            let (_, ledger) = simulate_mock_warmup(r, !old.contains(&r), &self.model, &self.cost);
            self.mock.merge(ledger);
            self.allocations.push(AllocationRecord {
                t_s: now,
                rank: r,
                kind: AllocationKind::CommunicatorMetadata,
                bytes: self.cost.communicator_metadata_bytes,
            });
        }
        self.plan = Some(plan);
        self.deadline_s = window_s.map(|w| now + w);
        self.prepare_started_s = now;
        self.shadow = Some(target);
        self.transition(Phase::Prepare, 0.0, 0.0);
        // the iteration already running keeps its pace; interference starts
        // with the next one
        Ok(())
    }

    fn next_task_end(&self) -> Option<f64> {
        self.tasks
            .iter()
            .filter(|t| !t.completed)
            .map(PrepTask::end_s)
            .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.min(e))))
    }

    /// Moves the clock to `now`, completing iterations, preparation tasks,
    /// switches and window expiries in time order.
    pub fn advance(&mut self, now: f64) -> Result<(), RuntimeError> {
        self.check_time(now)?;
        loop {
            let iter_end = self.iter_start_s + self.iter_duration_s;
            let task_end = if self.phase == Phase::Prepare { self.next_task_end() } else { None };
            let deadline = if matches!(self.phase, Phase::Prepare | Phase::Ready) {
                self.deadline_s
            } else {
                None
            };
            let mut next = iter_end;
            if let Some(t) = task_end {
                next = next.min(t);
            }
            if let Some(d) = deadline {
                next = next.min(d);
            }
            if next > now {
                break;
            }
            if deadline == Some(next) && next < iter_end && task_end.is_none_or(|t| next < t) {
                self.window_expired(next);
                continue;
            }
            if task_end == Some(next) && next <= iter_end {
                self.clock_s = next;
                for t in self.tasks.iter_mut().filter(|t| !t.completed && t.end_s() <= next) {
                    t.completed = true;
                }
                if self.tasks.iter().all(|t| t.completed) {
                    self.transition(Phase::Ready, 0.0, 0.0);
                }
                continue;
            }
            let horizon = [task_end, deadline].into_iter().flatten().fold(now, f64::min);
            self.skip_iterations(horizon);
            self.complete_iteration();
            if self.phase == Phase::Ready {
                self.commit_switch()?;
            }
        }
        self.clock_s = self.clock_s.max(now);
        Ok(())
    }

    /// Drains at the current iteration boundary, streams state and swaps
    /// generations. Fails unless the controller is `Ready` and the clock sits
    /// exactly on a boundary.
    pub fn cut(&mut self) -> Result<(), RuntimeError> {
        if self.phase != Phase::Ready {
            return Err(RuntimeError::WrongPhase {
                expected: Phase::Ready,
                actual: self.phase,
            });
        }
        if (self.clock_s - self.iter_start_s).abs() > 1e-9 {
            return Err(RuntimeError::MidIterationCut(self.clock_s));
        }
        self.commit_switch()
    }

    fn commit_switch(&mut self) -> Result<(), RuntimeError> {
        let shadow = self.shadow.clone().expect("ready implies shadow");
        let plan = self.plan.take().expect("plan computed in prepare");
        self.transition(Phase::Switch, 0.0, 0.0);
        let scale = self.model.state_multiplier / f64::from(self.model.bytes_per_element);
        let transfer_s = self.cost.transfer_time_s(&plan, scale);
        let network_bytes: u64 = plan.per_link_bytes.iter().filter(|((s, d), _)| s != d).map(|(_, b)| b).sum();
        for dst in plan.tasks().filter(|t| !t.is_local()).map(|t| t.dst).collect::<BTreeSet<_>>() {
            self.allocations.push(AllocationRecord {
                t_s: self.clock_s,
                rank: dst,
                kind: AllocationKind::StagingBuffer,
                bytes: self.options.staging_bytes,
            });
        }
        let pause = self.cost.drain_s + transfer_s + self.cost.swap_s;
        let before = self.active.world_size();
        let gpus = before.max(shadow.world_size());
        let t0 = self.clock_s;
        self.charge_downtime(pause, gpus);
        self.acct.pause_s += pause;
        let mut out = EventOutcome::new(t0, EventCause::LiveSwitch, before, shadow.world_size());
        out.pause_s = pause;
        out.drain_s = self.cost.drain_s;
        out.transfer_s = transfer_s;
        out.swap_s = self.cost.swap_s;
        out.transfer_bytes = network_bytes as f64 * scale;
        out.prepare_s = prepare_duration(&self.tasks);
        self.outcomes.push(out);
        self.atomic_switch_inner(pause)
    }

    fn atomic_switch_inner(&mut self, pause: f64) -> Result<(), RuntimeError> {
        let shadow = self.shadow.take().expect("switch implies shadow");
        self.retired.insert(self.active.generation_id);
        self.active = shadow;
        self.log.push(TransitionRecord {
            t_s: self.clock_s,
            from: Phase::Switch,
            to: Phase::Cleanup,
            gen_active: self.active.generation_id,
            gen_shadow: None,
            pause_accrued_s: pause,
            recovery_s: 0.0,
        });
        self.phase = Phase::Cleanup;
        self.tasks.clear();
        self.deadline_s = None;
        self.transition(Phase::Stable, 0.0, 0.0);
        self.start_iteration(self.clock_s);
        self.dequeue()
    }

    fn dequeue(&mut self) -> Result<(), RuntimeError> {
        if let Some(mut next) = self.queue.pop_front() {
            next.target.generation_id = self.next_generation();
            self.begin_prepare(next.target, next.window_s)?;
        }
        Ok(())
    }

    fn reusable(&self, at: f64) -> (Vec<PrepKind>, f64) {
        let mut kinds = Vec::new();
        let mut credit = 0.0;
        for t in &self.tasks {
            if t.kind == PrepKind::PlanCompute {
                continue;
            }
            let p = t.progress_at(at);
            if p > 0.0 {
                credit += p;
            }
            if t.completed || p >= t.duration_s {
                kinds.push(t.kind);
            }
        }
        (kinds, credit)
    }

    /// Abandons any uncommitted handoff after a failure at `failure_s` and
    /// rolls the active world back to its last checkpoint. Completed and
    /// partial preparation is reported as credit against recovery.
    pub fn abort_and_fallback(&mut self, failure_s: f64) -> Result<FallbackOutcome, RuntimeError> {
        self.advance(failure_s)?;
        if self.phase == Phase::Cleanup {
            return Ok(FallbackOutcome {
                recovery_mode: RecoveryMode::NotNeeded,
                reusable_prep: Vec::new(),
                credit_s: 0.0,
                resume_iteration: self.iteration,
                failed_at_iteration: self.iteration,
            });
        }
        let (reusable_prep, credit_s) = self.reusable(failure_s);
        let failed_at = self.iteration;
        self.interrupt(failure_s);
        self.rollback();
        if self.shadow.is_some() {
            self.shadow = None;
            self.plan = None;
            self.tasks.clear();
            self.deadline_s = None;
        }
        if self.phase != Phase::Stable {
            self.transition(Phase::Stable, 0.0, 0.0);
        }
        Ok(FallbackOutcome {
            recovery_mode: RecoveryMode::Checkpoint,
            reusable_prep,
            credit_s,
            resume_iteration: self.iteration,
            failed_at_iteration: failed_at,
        })
    }

    /// Restarts from the last checkpoint onto `target` (or the current
    /// layout), paying `strategy`'s restart latency less `credit_s` of
    /// initialization.
    fn recover(&mut self, target: Option<ParallelConfig>, strategy: RestartStrategy, credit_s: f64, cause: EventCause, lost: f64) -> Result<(), RuntimeError> {
        let mut target = target.unwrap_or_else(|| self.active.clone());
        target.generation_id = self.next_generation();
        validate_config(&target, &self.model).map_err(RuntimeError::InvalidTarget)?;
        let lat = restart_latency(strategy, &target, &self.model, &self.cost);
        let init = (lat.init_s - credit_s).max(0.0);
        let total = lat.load_s + init + lat.misc_s;
        let before = self.active.world_size();
        let gpus = before.max(target.world_size());
        let t0 = self.clock_s;
        self.charge_downtime(total, gpus);
        let mut out = EventOutcome::new(t0, cause, before, target.world_size());
        out.pause_s = total;
        out.load_s = lat.load_s;
        out.init_s = init;
        out.misc_s = lat.misc_s;
        out.lost_gpu_s = lost;
        self.outcomes.push(out);
        self.retired.insert(self.active.generation_id);
        self.active = target;
        self.log.push(TransitionRecord {
            t_s: self.clock_s,
            from: Phase::Stable,
            to: Phase::Stable,
            gen_active: self.active.generation_id,
            gen_shadow: None,
            pause_accrued_s: 0.0,
            recovery_s: total,
        });
        self.start_iteration(self.clock_s);
        self.dequeue()
    }

    /// Checkpoint-restart baseline: stop at `now`, roll back, restart onto
    /// `target`.
    pub fn checkpoint_restart(&mut self, now: f64, target: ParallelConfig, strategy: RestartStrategy) -> Result<(), RuntimeError> {
        self.advance(now)?;
        let partial = self.interrupt(now);
        let lost = self.rollback() + partial;
        self.recover(Some(target), strategy, 0.0, EventCause::Restart(strategy), lost)
    }

    /// Unannounced loss at `now`: abandon any handoff, roll back and recover
    /// onto the surviving `target`.
    pub fn fail_stop(&mut self, now: f64, target: Option<ParallelConfig>) -> Result<FallbackOutcome, RuntimeError> {
        let before = self.acct.lost_gpu_s;
        let outcome = self.abort_and_fallback(now)?;
        let lost = self.acct.lost_gpu_s - before;
        self.recover(target, self.options.recovery_strategy, outcome.credit_s, EventCause::FailStop, lost)?;
        Ok(outcome)
    }

    fn window_expired(&mut self, at: f64) {
        let target = self.shadow.clone();
        let before = self.acct.lost_gpu_s;
        let outcome = self.abort_and_fallback_at(at);
        let lost = self.acct.lost_gpu_s - before;
        let strategy = self.options.recovery_strategy;
        self.recover(target, strategy, outcome.credit_s, EventCause::WindowFallback, lost)
            .expect("shadow target was validated on trigger");
    }

    fn abort_and_fallback_at(&mut self, at: f64) -> FallbackOutcome {
        let (reusable_prep, credit_s) = self.reusable(at);
        let failed_at = self.iteration;
        self.interrupt(at);
        self.rollback();
        self.shadow = None;
        self.plan = None;
        self.tasks.clear();
        self.deadline_s = None;
        self.transition(Phase::Stable, 0.0, 0.0);
        FallbackOutcome {
            recovery_mode: RecoveryMode::Checkpoint,
            reusable_prep,
            credit_s,
            resume_iteration: self.iteration,
            failed_at_iteration: failed_at,
        }
    }

    /// A rank of the pending shadow world disappeared before commit: cancel
    /// the handoff and prepare again towards `updated`. The active world is
    /// untouched.
    pub fn shadow_rank_lost(&mut self, now: f64, mut updated: ParallelConfig) -> Result<(), RuntimeError> {
        self.advance(now)?;
        if !matches!(self.phase, Phase::Prepare | Phase::Ready) {
            return Err(RuntimeError::WrongPhase {
                expected: Phase::Prepare,
                actual: self.phase,
            });
        }
        let window = self.deadline_s.map(|d| (d - now).max(0.0));
        self.shadow = None;
        self.plan = None;
        self.tasks.clear();
        self.transition(Phase::Stable, 0.0, 0.0);
        updated.generation_id = self.next_generation();
        self.check_target(&updated)?;
        self.begin_prepare(updated, window)
    }

    /// Ends the run at `end`: the iteration in flight does not count.
    pub fn finish(&mut self, end: f64) -> Result<Accounting, RuntimeError> {
        self.advance(end)?;
        let partial = (end - self.iter_start_s).max(0.0) * self.world();
        self.acct.allocated_gpu_s += partial;
        self.acct.idle_gpu_s += partial;
        self.iter_start_s = end;
        self.clock_s = end;
        Ok(self.acct)
    }

    /// Largest extra allocation any single rank requested during handoffs.
    pub fn peak_extra_bytes_per_rank(&self) -> u64 {
        let mut by_rank: BTreeMap<RankId, u64> = BTreeMap::new();
        for a in &self.allocations {
            let e = by_rank.entry(a.rank).or_default();
            *e = (*e).max(match a.kind {
                AllocationKind::StagingBuffer => a.bytes + self.cost.communicator_metadata_bytes,
                AllocationKind::CommunicatorMetadata => a.bytes,
            });
        }
        by_rank.into_values().max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::TensorSpec;

    fn toy() -> ModelSpec {
        let mut tensors = Vec::new();
        for l in 0..4 {
            tensors.push(TensorSpec::new(&format!("w{l}"), l, vec![64, 64], Some(0)));
            tensors.push(TensorSpec::new(&format!("b{l}"), l, vec![64], None));
        }
        ModelSpec {
            num_layers: 4,
            tensors,
            bytes_per_element: 2,
            state_multiplier: 16.0,
        }
    }

    fn cost() -> CostModel {
        CostModel {
            gpu_flops: 5e4,
            tokens_per_iteration: 1.0,
            ..CostModel::default()
        }
    }

    fn ctl(gen_tp: (u32, u32, u32)) -> Controller {
        let (t, p, d) = gen_tp;
        Controller::new(toy(), ParallelConfig::contiguous(0, t, p, d, 0, 4), cost(), RuntimeOptions::default()).unwrap()
    }

    fn it(c: &Controller) -> f64 {
        c.cost.iteration_time_s(&c.active, &c.model)
    }

    #[test]
    fn trigger_moves_stable_to_prepare() {
        let mut c = ctl((2, 2, 4));
        let target = ParallelConfig::contiguous(1, 2, 2, 8, 0, 4);
        assert_eq!(c.trigger_resize(0.0, target, None).unwrap(), TriggerOutcome::Preparing);
        let s = c.state();
        assert_eq!(s.phase, Phase::Prepare);
        assert_eq!(s.shadow.unwrap().generation_id, 1);
        s_check(&c);
    }

    fn s_check(c: &Controller) {
        c.state().check().unwrap();
    }

    #[test]
    fn non_monotonic_target_is_rejected() {
        let mut c = ctl((2, 1, 1));
        let target = ParallelConfig::contiguous(5, 4, 1, 1, 0, 4);
        assert!(matches!(
            c.trigger_resize(0.0, target, None),
            Err(RuntimeError::NonMonotonicGeneration { active: 0, got: 5 })
        ));
        assert_eq!(c.phase(), Phase::Stable);
    }

    #[test]
    fn trigger_during_handoff_is_queued() {
        let mut c = ctl((2, 1, 1));
        c.trigger_resize(0.0, ParallelConfig::contiguous(1, 4, 1, 1, 0, 4), None).unwrap();
        let snapshot = c.state();
        let q = c.trigger_resize(0.0, ParallelConfig::contiguous(2, 2, 2, 1, 0, 4), None).unwrap();
        assert_eq!(q, TriggerOutcome::Queued(0));
        assert_eq!(c.state(), snapshot);
    }

    #[test]
    fn ready_waits_for_boundary_then_switches() {
        let mut c = ctl((2, 1, 1));
        let step = it(&c);
        c.trigger_resize(0.0, ParallelConfig::contiguous(1, 4, 1, 1, 0, 4), None).unwrap();
        let prep = prepare_duration(c.prep_tasks());
        c.advance(prep).unwrap();
        let phase = c.phase();
        // the boundary after preparation finishes
        let boundary = c.iter_start_s + c.iter_duration_s;
        if boundary > prep {
            assert_eq!(phase, Phase::Ready);
        }
        c.advance(boundary + 1e-6).unwrap();
        assert_eq!(c.phase(), Phase::Stable);
        assert_eq!(c.active().generation_id, 1);
        let out = &c.outcomes()[0];
        let cm = cost();
        assert!((out.pause_s - (cm.drain_s + out.transfer_s + cm.swap_s)).abs() < 1e-12);
        assert!(step > 0.0);
        // the next iteration starts right after the pause on the new world
        assert!((c.iter_start_s - (out.t_s + out.pause_s)).abs() < 1e-9);
        assert_eq!(c.iter_nominal_s, c.cost.iteration_time_s(&c.active, &c.model));
    }

    #[test]
    fn pause_is_charged_only_by_switch() {
        let mut c = ctl((2, 2, 1));
        c.trigger_resize(0.0, ParallelConfig::contiguous(1, 4, 1, 2, 0, 4), None).unwrap();
        c.advance(500.0).unwrap();
        for r in c.log() {
            if r.pause_accrued_s > 0.0 {
                assert_eq!(r.from, Phase::Switch);
            }
        }
        let total: f64 = c.log().iter().map(|r| r.pause_accrued_s).sum();
        assert!((total - c.accounting().pause_s).abs() < 1e-12);
        assert!(total > 0.0);
    }

    #[test]
    fn stale_generation_lookup_fails_after_switch() {
        let mut c = ctl((2, 1, 1));
        c.trigger_resize(0.0, ParallelConfig::contiguous(1, 4, 1, 1, 0, 4), None).unwrap();
        c.advance(1000.0).unwrap();
        assert!(matches!(c.lookup(0), Err(RuntimeError::StaleGeneration { requested: 0, active: 1 })));
        assert_eq!(c.lookup(1).unwrap().tp, 4);
        assert!(matches!(c.lookup(7), Err(RuntimeError::UnknownGeneration(7))));
    }

    #[test]
    fn swap_latency_is_sub_second() {
        assert!(CostModel::default().swap_s < 0.5);
        assert_eq!(CostModel::default().swap_s, 0.4);
    }

    #[test]
    fn mock_warmup_cold_and_warm() {
        let cm = CostModel::default();
        let m = toy();
        let (d, ledger) = simulate_mock_warmup(3, true, &m, &cm);
        assert_eq!(d, cm.warmup_s(&m));
        assert!(ledger.call_count() > 0);
        assert_eq!(ledger.transport_bytes, 0);
        let (d, ledger) = simulate_mock_warmup(3, false, &m, &cm);
        assert_eq!(d, 0.0);
        assert_eq!(ledger.call_count(), 0);
    }

    #[test]
    fn only_joiners_warm_up() {
        let m = toy();
        let cm = CostModel::default();
        let old = ParallelConfig::contiguous(0, 2, 2, 1, 0, 4);
        let reshaped = ParallelConfig::contiguous(1, 4, 1, 1, 0, 4);
        let tasks = prep_schedule(&old, &reshaped, &m, &cm, 0.0);
        assert!(tasks.iter().all(|t| t.kind != PrepKind::MockWarmup));
        let grown = ParallelConfig::contiguous(1, 2, 2, 2, 0, 4);
        let tasks = prep_schedule(&old, &grown, &m, &cm, 0.0);
        let warm = tasks.iter().find(|t| t.kind == PrepKind::MockWarmup).unwrap();
        assert_eq!(warm.ranks, vec![4, 5, 6, 7]);
    }

    #[test]
    fn fallback_during_prepare_resumes_from_checkpoint() {
        let mut c = ctl((2, 1, 1));
        let step = it(&c);
        c.advance(step * 150.0 + step / 2.0).unwrap();
        let grown = ParallelConfig::contiguous(1, 2, 1, 2, 0, 4);
        c.trigger_resize(c.clock_s(), grown, None).unwrap();
        let prep = prepare_duration(c.prep_tasks());
        let t = c.clock_s() + prep * 0.99;
        let out = c.abort_and_fallback(t).unwrap();
        assert_eq!(out.recovery_mode, RecoveryMode::Checkpoint);
        assert_eq!(out.resume_iteration, 100);
        assert!(out.resume_iteration <= out.failed_at_iteration);
        assert!(out.reusable_prep.contains(&PrepKind::TcpBootstrap));
        assert!(out.credit_s > 0.0);
        assert_eq!(c.phase(), Phase::Stable);
        assert!(c.state().shadow.is_none());
        assert_eq!(c.active().generation_id, 0);
    }

    #[test]
    fn fallback_in_stable_has_no_shadow_artifacts() {
        let mut c = ctl((2, 1, 1));
        c.advance(it(&c) * 42.5).unwrap();
        let out = c.abort_and_fallback(c.clock_s()).unwrap();
        assert_eq!(out.resume_iteration, 0);
        assert!(out.reusable_prep.is_empty());
        assert_eq!(out.credit_s, 0.0);
    }

    #[test]
    fn window_expiry_degrades_to_checkpoint_recovery() {
        let mut c = ctl((2, 1, 1));
        let grown = ParallelConfig::contiguous(1, 2, 1, 2, 0, 4);
        c.trigger_resize(0.0, grown, Some(5.0)).unwrap();
        c.advance(10_000.0).unwrap();
        let o = &c.outcomes()[0];
        assert_eq!(o.cause, EventCause::WindowFallback);
        assert_eq!(c.active().world_size(), 4);
        assert_eq!(c.active().generation_id, 1);
    }

    #[test]
    fn stale_topology_restarts_prepare() {
        let mut c = ctl((2, 1, 1));
        c.trigger_resize(0.0, ParallelConfig::contiguous(1, 2, 1, 4, 0, 4), None).unwrap();
        let before = c.iteration();
        c.shadow_rank_lost(1.0, ParallelConfig::contiguous(9, 2, 1, 3, 0, 4)).unwrap();
        assert_eq!(c.phase(), Phase::Prepare);
        let s = c.state().shadow.unwrap();
        assert_eq!((s.dp, s.generation_id), (3, 1));
        assert!(c.iteration() >= before);
        assert_eq!(c.accounting().downtime_s, 0.0);
    }

    #[test]
    fn queued_events_run_in_order() {
        let mut c = ctl((2, 1, 1));
        c.trigger_resize(0.0, ParallelConfig::contiguous(1, 4, 1, 1, 0, 4), None).unwrap();
        c.trigger_resize(0.0, ParallelConfig::contiguous(2, 2, 2, 1, 0, 4), None).unwrap();
        c.trigger_resize(0.0, ParallelConfig::contiguous(3, 1, 4, 1, 0, 4), None).unwrap();
        c.advance(100_000.0).unwrap();
        let (t, p) = (c.active().tp, c.active().pp);
        assert_eq!((t, p), (1, 4));
        assert_eq!(c.active().generation_id, 3);
        let tps: Vec<u32> = c.outcomes().iter().map(|o| o.gpus_after as u32).collect();
        assert_eq!(tps.len(), 3);
    }

    #[test]
    fn cut_rejects_wrong_phase() {
        let mut c = ctl((2, 1, 1));
        assert!(matches!(c.cut(), Err(RuntimeError::WrongPhase { .. })));
    }

    #[test]
    fn accounting_is_conserved() {
        let mut c = ctl((2, 1, 2));
        c.trigger_resize(3.0, ParallelConfig::contiguous(1, 4, 1, 1, 0, 4), None).unwrap();
        c.advance(900.0).unwrap();
        c.checkpoint_restart(1500.0, ParallelConfig::contiguous(2, 2, 2, 1, 0, 4), RestartStrategy::ColdRestart).unwrap();
        c.fail_stop(2500.0, None).unwrap();
        let a = c.finish(4000.0).unwrap();
        let sum = a.useful_gpu_s + a.lost_gpu_s + a.downtime_gpu_s + a.idle_gpu_s;
        assert!((sum - a.allocated_gpu_s).abs() < 1e-6 * a.allocated_gpu_s);
    }

    #[test]
    fn transition_memory_stays_bounded() {
        let mut c = ctl((2, 2, 1));
        c.trigger_resize(0.0, ParallelConfig::contiguous(1, 4, 1, 2, 0, 4), None).unwrap();
        c.advance(500.0).unwrap();
        let bound = RuntimeOptions::default().staging_bytes + CostModel::default().communicator_metadata_bytes;
        assert!(c.peak_extra_bytes_per_rank() <= bound);
        assert!(c.allocations().iter().any(|a| a.kind == AllocationKind::StagingBuffer));
    }
}
