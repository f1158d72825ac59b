//! Discrete-event simulation of elastic training timelines.
//!
//! Every strategy runs on the same [`Controller`] clock: the live path
//! drives the dual-world lifecycle, the restart baselines stop, roll back to
//! the last checkpoint and pay a storage-backed restart.

pub mod calibrate;
pub mod cost;
pub mod presets;

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{compute_transfer_plan, PlanError};
use crate::runtime::{prep_schedule, prepare_duration, Controller, EventCause, RuntimeError, RuntimeOptions};
use crate::topology::{ModelSpec, ParallelConfig};
use cost::CostModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestartStrategy {
    ColdRestart,
    ReshapeCheckpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Live,
    Cold,
    Reshape,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Live, Strategy::Cold, Strategy::Reshape];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Live => "live",
            Strategy::Cold => "cold",
            Strategy::Reshape => "reshape",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Strategy::Live),
            "cold" => Ok(Strategy::Cold),
            "reshape" => Ok(Strategy::Reshape),
            other => Err(format!("unknown strategy `{other}` (expected live, cold or reshape)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("event {index}: time {t}s is not after the previous event")]
    UnorderedEvents { index: usize, t: f64 },
    #[error("event {index}: {msg}")]
    BadEvent { index: usize, msg: String },
    #[error("scenario duration must be finite and non-negative, got {0}")]
    BadDuration(f64),
    #[error("unknown model preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid cost model: {}", .0.join("; "))]
    BadCostModel(Vec<String>),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestartLatency {
    pub load_s: f64,
    pub init_s: f64,
    pub misc_s: f64,
    pub total_s: f64,
}

/// Downtime of a storage-backed restart onto `config`.
///
/// Each GPU reads its model-parallel shard (data-parallel replicas read the
/// same bytes), limited either by its own storage bandwidth or by the shared
/// store's aggregate bandwidth. Initialization is paid in full by both
/// strategies.
pub fn restart_latency(strategy: RestartStrategy, config: &ParallelConfig, model: &ModelSpec, cm: &CostModel) -> RestartLatency {
    let world = config.world_size();
    let per_gpu = model.state_bytes() / f64::from(config.tp * config.pp);
    let own = per_gpu * 8.0 / (cm.storage_gbits_per_s_per_gpu * 1e9);
    let shared = per_gpu * world as f64 / (cm.aggregate_storage_gbytes_per_s * 1e9);
    let mut load_s = own.max(shared);
    if strategy == RestartStrategy::ReshapeCheckpoint {
        load_s *= cm.reshape_load_factor;
    }
    let init_s = cm.process_spawn_s
        + cm.tcp_bootstrap_s
        + cm.discovery_s(world)
        + cm.communicator_s(world)
        + cm.warmup_s(model);
    let misc_s = cm.misc_restart_s;
    RestartLatency {
        load_s,
        init_s,
        misc_s,
        total_s: load_s + init_s + misc_s,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiveLatency {
    /// Background preparation, overlapped with training.
    pub prepare_s: f64,
    pub drain_s: f64,
    pub transfer_s: f64,
    pub swap_s: f64,
    pub pause_s: f64,
    /// State bytes crossing the network.
    pub transfer_bytes: f64,
}

/// Downtime of a live handoff from `old` to `new`.
pub fn live_event_latency(old: &ParallelConfig, new: &ParallelConfig, model: &ModelSpec, cm: &CostModel) -> Result<LiveLatency, PlanError> {
    let plan = compute_transfer_plan(old, new, model)?;
    let scale = model.state_multiplier / f64::from(model.bytes_per_element);
    let transfer_s = cm.transfer_time_s(&plan, scale);
    let network: u64 = plan
        .per_link_bytes
        .iter()
        .filter(|((s, d), _)| s != d)
        .map(|(_, b)| *b)
        .sum();
    let prepare_s = prepare_duration(&prep_schedule(old, new, model, cm, 0.0));
    Ok(LiveLatency {
        prepare_s,
        drain_s: cm.drain_s,
        transfer_s,
        swap_s: cm.swap_s,
        pause_s: cm.drain_s + transfer_s + cm.swap_s,
        transfer_bytes: network as f64 * scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Planned,
    PreemptionWarning,
    FailStop,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Planned => "planned",
            EventKind::PreemptionWarning => "preemption_warning",
            EventKind::FailStop => "fail_stop",
        }
    }
}

/// Target layout of an event: degrees over ranks `first..first+tp*pp*dp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub tp: u32,
    pub pp: u32,
    pub dp: u32,
    #[serde(default)]
    pub first_rank: u32,
}

impl Layout {
    pub fn new(tp: u32, pp: u32, dp: u32) -> Self {
        Self { tp, pp, dp, first_rank: 0 }
    }

    pub fn config(&self, generation: u64, layers: usize) -> ParallelConfig {
        ParallelConfig::contiguous(generation, self.tp, self.pp, self.dp, self.first_rank, layers)
    }

    pub fn world(&self) -> u32 {
        self.tp * self.pp * self.dp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEvent {
    pub time_s: f64,
    pub kind: EventKind,
    #[serde(default)]
    pub warning_window_s: f64,
    pub target: Layout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticityScenario {
    pub duration_s: f64,
    #[serde(default)]
    pub regime: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
}

fn default_checkpoint_interval() -> u64 {
    100
}

impl ElasticityScenario {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.duration_s < 0.0 || !self.duration_s.is_finite() {
            return Err(SimError::BadDuration(self.duration_s));
        }
        let mut prev = f64::NEG_INFINITY;
        for (index, e) in self.events.iter().enumerate() {
            if e.time_s.is_nan() || e.time_s <= prev {
                return Err(SimError::UnorderedEvents { index, t: e.time_s });
            }
            prev = e.time_s;
            if e.warning_window_s.is_nan() || e.warning_window_s < 0.0 {
                return Err(SimError::BadEvent {
                    index,
                    msg: "warning window must be non-negative".into(),
                });
            }
            if e.kind == EventKind::FailStop && e.warning_window_s != 0.0 {
                return Err(SimError::BadEvent {
                    index,
                    msg: "fail_stop events carry no warning window".into(),
                });
            }
            if e.target.world() == 0 {
                return Err(SimError::BadEvent {
                    index,
                    msg: "target has no ranks".into(),
                });
            }
        }
        Ok(())
    }
}

/// One reconfiguration or recovery as seen by a strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub event_index: usize,
    pub t_event_s: f64,
    pub kind: EventKind,
    pub strategy: Strategy,
    pub pause_s: f64,
    pub phase_load_s: f64,
    pub phase_init_s: f64,
    pub phase_transfer_s: f64,
    pub phase_swap_s: f64,
    pub drain_s: f64,
    pub prepare_s: f64,
    pub lost_gpu_s: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub strategy: Strategy,
    pub events: Vec<EventRecord>,
    pub total_downtime_s: f64,
    pub allocated_gpu_s: f64,
    pub useful_gpu_s: f64,
    pub lost_gpu_s: f64,
    pub downtime_gpu_s: f64,
    pub idle_gpu_s: f64,
    pub goodput_fraction: f64,
    pub wasted_gpu_hours: f64,
    /// Transition log lines of the underlying controller.
    pub timeline: Vec<String>,
}

pub const CSV_HEADER: &str =
    "event_index,t_event_s,kind,strategy,pause_s,phase_load_s,phase_init_s,phase_transfer_s,phase_swap_s";

impl SimResult {
    pub fn csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for e in &self.events {
            let _ = writeln!(
                s,
                "{},{:.3},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                e.event_index,
                e.t_event_s,
                e.kind.as_str(),
                e.strategy,
                e.pause_s,
                e.phase_load_s,
                e.phase_init_s,
                e.phase_transfer_s,
                e.phase_swap_s
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "strategy,goodput,wasted_gpu_hours,total_downtime_s\n{},{:.6},{:.6},{:.6}\n",
            self.strategy, self.goodput_fraction, self.wasted_gpu_hours, self.total_downtime_s
        )
    }
}

/// Runs `scenario` from `initial` under `strategy`.
///
/// Planned and warned events go through the live lifecycle (Live) or a
/// checkpoint restart (Cold, Reshape). Fail-stop events force checkpoint
/// recovery for every strategy.
pub fn run_scenario(
    model: &ModelSpec,
    initial: &Layout,
    scenario: &ElasticityScenario,
    cm: &CostModel,
    strategy: Strategy,
) -> Result<SimResult, SimError> {
    scenario.validate()?;
    let bad = cost::check_cost_model(cm);
    if !bad.is_empty() {
        return Err(SimError::BadCostModel(bad));
    }
    let recovery = match strategy {
        Strategy::Reshape => RestartStrategy::ReshapeCheckpoint,
        _ => RestartStrategy::ColdRestart,
    };
    let options = RuntimeOptions {
        checkpoint_interval: scenario.checkpoint_interval,
        recovery_strategy: recovery,
        ..RuntimeOptions::default()
    };
    let mut ctl = Controller::new(model.clone(), initial.config(0, model.num_layers), cm.clone(), options)?;
    for e in &scenario.events {
        if e.time_s > scenario.duration_s {
            break;
        }
        // an event landing inside recovery downtime takes effect when it ends
        ctl.advance(e.time_s)?;
        let t = e.time_s.max(ctl.clock_s());
        let target = e.target.config(ctl.next_generation(), model.num_layers);
        match (e.kind, strategy) {
            (EventKind::FailStop, _) => {
                ctl.fail_stop(t, Some(target))?;
            }
            (_, Strategy::Live) => {
                let window = (e.kind == EventKind::PreemptionWarning).then_some(e.warning_window_s);
                ctl.trigger_resize(t, target, window)?;
            }
            (_, Strategy::Cold) => ctl.checkpoint_restart(t, target, RestartStrategy::ColdRestart)?,
            (_, Strategy::Reshape) => ctl.checkpoint_restart(t, target, RestartStrategy::ReshapeCheckpoint)?,
        }
    }
    let acct = ctl.finish(scenario.duration_s.max(ctl.clock_s()))?;
    let records = attribute(ctl.outcomes(), &scenario.events, strategy);
    let goodput = if acct.allocated_gpu_s > 0.0 {
        (acct.useful_gpu_s / acct.allocated_gpu_s).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(SimResult {
        strategy,
        total_downtime_s: acct.downtime_s,
        allocated_gpu_s: acct.allocated_gpu_s,
        useful_gpu_s: acct.useful_gpu_s,
        lost_gpu_s: acct.lost_gpu_s,
        downtime_gpu_s: acct.downtime_gpu_s,
        idle_gpu_s: acct.idle_gpu_s,
        goodput_fraction: goodput,
        wasted_gpu_hours: (acct.allocated_gpu_s - acct.useful_gpu_s) / 3600.0,
        events: records,
        timeline: ctl.log().iter().map(ToString::to_string).collect(),
    })
}

/// Assigns each controller outcome to the latest scenario event at or
/// before it.
fn attribute(outcomes: &[crate::runtime::EventOutcome], events: &[ScenarioEvent], strategy: Strategy) -> Vec<EventRecord> {
    outcomes
        .iter()
        .map(|o| {
            let idx = events.iter().rposition(|e| e.time_s <= o.t_s + 1e-9).unwrap_or(0);
            let kind = events.get(idx).map_or(EventKind::Planned, |e| e.kind);
            EventRecord {
                event_index: idx,
                t_event_s: events.get(idx).map_or(o.t_s, |e| e.time_s),
                kind,
                strategy,
                pause_s: o.pause_s,
                phase_load_s: o.load_s,
                phase_init_s: o.init_s,
                phase_transfer_s: o.transfer_s,
                phase_swap_s: o.swap_s,
                drain_s: o.drain_s,
                prepare_s: o.prepare_s,
                lost_gpu_s: o.lost_gpu_s,
                fallback: matches!(o.cause, EventCause::WindowFallback),
            }
        })
        .collect()
}

/// Per-regime scenario knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    pub label: String,
    pub duration_s: f64,
    pub interval_s: f64,
    /// Uniform jitter applied to each event time, as a fraction of the
    /// interval.
    pub jitter: f64,
    pub checkpoint_interval: u64,
    pub warning_window_s: f64,
    /// Layouts visited in turn, starting with the initial one.
    pub cycle: Vec<Layout>,
    /// Indices of events that are unannounced losses.
    #[serde(default)]
    pub fail_stops: Vec<usize>,
    pub seed: u64,
}

impl RegimeSpec {
    /// Events at `interval_s` spacing with seeded jitter. Warned events
    /// alternate with planned ones.
    pub fn scenario(&self) -> ElasticityScenario {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut events = Vec::new();
        let mut k = 1usize;
        loop {
            let base = k as f64 * self.interval_s;
            if base >= self.duration_s {
                break;
            }
            let j = if self.jitter > 0.0 {
                rng.gen_range(-self.jitter..=self.jitter) * self.interval_s
            } else {
                0.0
            };
            let idx = events.len();
            let target = self.cycle[k % self.cycle.len()];
            let kind = if self.fail_stops.contains(&idx) {
                EventKind::FailStop
            } else if idx % 2 == 0 {
                EventKind::PreemptionWarning
            } else {
                EventKind::Planned
            };
            let window = if kind == EventKind::PreemptionWarning { self.warning_window_s } else { 0.0 };
            events.push(ScenarioEvent {
                time_s: (base + j).clamp(0.0, self.duration_s),
                kind,
                warning_window_s: window,
                target,
            });
            k += 1;
        }
        ElasticityScenario {
            duration_s: self.duration_s,
            regime: self.label.clone(),
            seed: self.seed,
            checkpoint_interval: self.checkpoint_interval,
            events,
        }
    }

    pub fn initial(&self) -> Layout {
        self.cycle[0]
    }
}

/// Downtime of one reference reconfiguration per model under each strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub model: String,
    pub world: usize,
    pub live_pause_s: f64,
    pub live_transfer_s: f64,
    pub live_prepare_s: f64,
    pub transfer_bytes: f64,
    pub cold_s: f64,
    pub reshape_s: f64,
    pub cold_ratio: f64,
    pub reshape_ratio: f64,
}

pub fn speedup_report(labels: &[&str], cm: &CostModel) -> Result<Vec<SpeedupRow>, SimError> {
    let mut rows = Vec::new();
    for &label in labels {
        let (model, old, new) = presets::reference_transition(label).ok_or_else(|| SimError::UnknownPreset(label.to_string()))?;
        let live = live_event_latency(&old, &new, &model, cm)?;
        let cold = restart_latency(RestartStrategy::ColdRestart, &new, &model, cm).total_s;
        let reshape = restart_latency(RestartStrategy::ReshapeCheckpoint, &new, &model, cm).total_s;
        rows.push(SpeedupRow {
            model: label.to_string(),
            world: new.world_size(),
            live_pause_s: live.pause_s,
            live_transfer_s: live.transfer_s,
            live_prepare_s: live.prepare_s,
            transfer_bytes: live.transfer_bytes,
            cold_s: cold,
            reshape_s: reshape,
            cold_ratio: cold / live.pause_s,
            reshape_ratio: reshape / live.pause_s,
        });
    }
    Ok(rows)
}

pub fn speedup_table(rows: &[SpeedupRow]) -> String {
    let mut s = String::from("model,gpus,live_pause_s,cold_s,reshape_s,cold_ratio,reshape_ratio\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.3},{:.3},{:.3},{:.2},{:.2}",
            r.model, r.world, r.live_pause_s, r.cold_s, r.reshape_s, r.cold_ratio, r.reshape_ratio
        );
    }
    s
}
