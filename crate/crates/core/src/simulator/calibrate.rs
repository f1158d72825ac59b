//! Fitting restart constants to measured phase timings.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::cost::CostModel;
use super::presets::gpt_preset;
use super::{restart_latency, Layout, RestartStrategy};

/// Measured restart phases of one model on one layout. Missing phases are
/// simply not fitted from this trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestartTrace {
    pub model: String,
    pub layout: Layout,
    pub load_s: Option<f64>,
    pub init_s: Option<f64>,
    pub misc_s: Option<f64>,
    pub total_s: Option<f64>,
}

/// The 20B, 32-GPU (TP4, PP4, DP2) restart breakdown.
pub fn reference_trace() -> RestartTrace {
    RestartTrace {
        model: "20b".into(),
        layout: Layout::new(4, 4, 2),
        load_s: Some(54.6),
        init_s: Some(70.1),
        misc_s: Some(2.4),
        total_s: Some(127.1),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDivergence {
    pub trace: usize,
    pub phase: &'static str,
    pub measured: f64,
    pub simulated: f64,
}

impl PhaseDivergence {
    pub fn relative(&self) -> f64 {
        (self.simulated - self.measured).abs() / self.measured.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub fitted: CostModel,
    pub phases: Vec<PhaseDivergence>,
    /// Largest relative divergence; `None` when nothing was compared.
    pub max_divergence: Option<f64>,
    /// Constants left at their input value for lack of data.
    pub unresolved: Vec<&'static str>,
    pub errors: Vec<String>,
}

impl CalibrationReport {
    /// Phases diverging by more than `tolerance` (relative).
    pub fn flagged(&self, tolerance: f64) -> Vec<&PhaseDivergence> {
        self.phases.iter().filter(|p| p.relative() > tolerance).collect()
    }
}

impl fmt::Display for CalibrationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.phases {
            writeln!(
                f,
                "trace {} {}: measured {:.3} s, simulated {:.3} s, divergence {:.3}%",
                p.trace,
                p.phase,
                p.measured,
                p.simulated,
                100.0 * p.relative()
            )?;
        }
        match self.max_divergence {
            Some(d) => writeln!(f, "max divergence {:.3}%", 100.0 * d)?,
            None => writeln!(f, "max divergence undefined")?,
        }
        for u in &self.unresolved {
            writeln!(f, "unresolved {u}")?;
        }
        for e in &self.errors {
            writeln!(f, "error {e}")?;
        }
        Ok(())
    }
}

/// Fits per-GPU storage bandwidth to measured load times, the cold-rank
/// warmup base to measured initialization, and the misc constant to
/// measured misc; then reports how far the fitted model is from every
/// measured phase. A trace giving only a total cannot separate the phases,
/// so it contributes to the divergence report but not to the fit.
pub fn calibrate(cm: &CostModel, traces: &[RestartTrace]) -> CalibrationReport {
    let mut fitted = cm.clone();
    let mut errors = Vec::new();
    let mut resolved: Vec<(usize, crate::topology::ModelSpec, crate::topology::ParallelConfig)> = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        match gpt_preset(&t.model) {
            Some(m) => {
                let c = t.layout.config(0, m.num_layers);
                resolved.push((i, m, c));
            }
            None => errors.push(format!("trace {i}: unknown model `{}`", t.model)),
        }
    }

    // load_i = a_i / bw with a_i the per-GPU gigabits: least squares on 1/bw
    let (mut num, mut den) = (0.0, 0.0);
    for (i, m, c) in &resolved {
        if let Some(load) = traces[*i].load_s {
            let a = m.state_bytes() / f64::from(c.tp * c.pp) * 8.0 / 1e9;
            num += a * load;
            den += a * a;
        }
    }
    let mut unresolved = Vec::new();
    if den > 0.0 && num > 0.0 {
        fitted.storage_gbits_per_s_per_gpu = den / num;
    } else {
        unresolved.push("storage_gbits_per_s_per_gpu");
    }

    let mut offsets = Vec::new();
    for (i, m, c) in &resolved {
        if let Some(init) = traces[*i].init_s {
            let mut zero = fitted.clone();
            zero.warmup_base_s = 0.0;
            let rest = restart_latency(RestartStrategy::ColdRestart, c, m, &zero).init_s;
            offsets.push(init - rest);
        }
    }
    if offsets.is_empty() {
        unresolved.push("warmup_base_s");
    } else {
        fitted.warmup_base_s = (offsets.iter().sum::<f64>() / offsets.len() as f64).max(0.0);
    }

    let miscs: Vec<f64> = resolved.iter().filter_map(|(i, _, _)| traces[*i].misc_s).collect();
    if miscs.is_empty() {
        unresolved.push("misc_restart_s");
    } else {
        fitted.misc_restart_s = miscs.iter().sum::<f64>() / miscs.len() as f64;
    }

    let mut phases = Vec::new();
    for (i, m, c) in &resolved {
        let t = &traces[*i];
        let sim = restart_latency(RestartStrategy::ColdRestart, c, m, &fitted);
        for (phase, measured, simulated) in [
            ("load", t.load_s, sim.load_s),
            ("init", t.init_s, sim.init_s),
            ("misc", t.misc_s, sim.misc_s),
            ("total", t.total_s, sim.total_s),
        ] {
            if let Some(measured) = measured {
                phases.push(PhaseDivergence {
                    trace: *i,
                    phase,
                    measured,
                    simulated,
                });
            }
        }
    }
    let max_divergence = phases.iter().map(PhaseDivergence::relative).fold(None, |acc: Option<f64>, d| {
        Some(acc.map_or(d, |a| a.max(d)))
    });
    if traces.is_empty() {
        return CalibrationReport {
            fitted: cm.clone(),
            phases,
            max_divergence: None,
            unresolved: Vec::new(),
            errors,
        };
    }
    CalibrationReport {
        fitted,
        phases,
        max_divergence,
        unresolved,
        errors,
    }
}

/// The default cost model fitted to [`reference_trace`].
pub fn reference_cost_model() -> CostModel {
    calibrate(&CostModel::default(), &[reference_trace()]).fitted
}
