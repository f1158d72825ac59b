use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;

use handoff_core::executor::{execute_plan, gather_reslice, max_deviation, ExecOptions, LoopbackTransport, ShardStore};
use handoff_core::planner::{compute_transfer_plan, plan_cost_summary, verify_plan, TransferPlan};
use handoff_core::simulator::calibrate::{calibrate as fit, RestartTrace};
use handoff_core::simulator::{run_scenario, speedup_report, speedup_table, Strategy};
use serde::Deserialize;

use crate::config::RunConfigFile;
use crate::{CliError, Mutation};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn stdout_err(source: std::io::Error) -> CliError {
    CliError::Io {
        path: "<stdout>".into(),
        source,
    }
}

fn validation(e: impl ToString) -> CliError {
    CliError::Validation(e.to_string())
}

pub fn plan(config: &Path, from: &str, to: &str, path: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = RunConfigFile::load(config)?;
    let model = cfg.model()?;
    let old = cfg.config(from, 0)?;
    let new = cfg.config(to, 1)?;
    let plan = compute_transfer_plan(&old, &new, &model).map_err(validation)?;
    let text = plan.to_string();
    match path {
        Some(p) => fs::write(p, &text).map_err(io(p))?,
        None => out.write_all(text.as_bytes()).map_err(stdout_err)?,
    }
    let s = plan_cost_summary(&plan);
    writeln!(
        out,
        "tasks {} total_bytes {} max_link_bytes {}",
        s.task_count, s.total_bytes, s.max_link_bytes
    )
    .map_err(stdout_err)
}

/// Byte `b` of element `idx` of `tensor` under `seed`.
fn seeded_byte(seed: u64, tensor: &str, idx: &[u64], b: usize) -> u8 {
    let mut h = DefaultHasher::new();
    (seed, tensor, idx, b).hash(&mut h);
    h.finish() as u8
}

fn mutate(plan: &TransferPlan, m: Mutation) -> TransferPlan {
    let tasks: Vec<_> = plan.tasks().cloned().collect();
    let mut out = TransferPlan::empty(plan.src_generation, plan.dst_generation);
    match m {
        Mutation::Drop => tasks.iter().take(tasks.len().saturating_sub(1)).for_each(|t| out.push(t.clone())),
        Mutation::Duplicate => {
            tasks.iter().for_each(|t| out.push(t.clone()));
            if let Some(t) = tasks.first() {
                out.push(t.clone());
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn verify(
    config: &Path,
    from: &str,
    to: &str,
    seed: u64,
    staging_bytes: u64,
    chunking: bool,
    mutation: Option<Mutation>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = RunConfigFile::load(config)?;
    let model = cfg.model()?;
    let old = cfg.config(from, 0)?;
    let new = cfg.config(to, 1)?;
    let mut plan = compute_transfer_plan(&old, &new, &model).map_err(validation)?;
    if let Some(m) = mutation {
        plan = mutate(&plan, m);
    }
    let mut src = ShardStore::allocate(&model, &old).map_err(validation)?;
    src.fill_with(|id, idx, b| seeded_byte(seed, id, idx, b));
    let mut dst = ShardStore::carry_over(&src, &model, &new).map_err(validation)?;
    let mut transport = LoopbackTransport::new();
    let options = ExecOptions { staging_bytes, chunking };
    let report = execute_plan(&plan, &src, &mut dst, &mut transport, options).map_err(|e| CliError::Mismatch(e.to_string()))?;
    let oracle = gather_reslice(&src, &model, &new).map_err(validation)?;
    write!(out, "{report}").map_err(stdout_err)?;
    let deviation = max_deviation(&dst, &oracle);
    match deviation {
        Some(d) => writeln!(out, "max deviation {d}").map_err(stdout_err)?,
        None => writeln!(out, "max deviation undefined").map_err(stdout_err)?,
    }
    if let Err(violations) = verify_plan(&plan, &old, &new, &model) {
        for v in &violations {
            writeln!(out, "violation: {v}").map_err(stdout_err)?;
        }
        return Err(CliError::Mismatch(format!("{} plan violations", violations.len())));
    }
    if deviation != Some(0) || dst.ranks != oracle.ranks {
        return Err(CliError::Mismatch("resharded state differs from the reference".into()));
    }
    Ok(())
}

pub fn simulate(
    config: &Path,
    strategies: &[Strategy],
    seed: Option<u64>,
    regime: Option<&str>,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut cfg = RunConfigFile::load(config)?;
    if let Some(r) = regime {
        cfg.use_regime(r)?;
    }
    let model = cfg.model()?;
    let (initial, scenario) = cfg.scenario(seed)?;
    let cm = cfg.cost_model();
    fs::create_dir_all(dir).map_err(io(dir))?;
    for &s in strategies {
        let r = run_scenario(&model, &initial, &scenario, &cm, s).map_err(validation)?;
        let csv = dir.join(format!("{s}.csv"));
        fs::write(&csv, r.csv()).map_err(io(&csv))?;
        let summary = dir.join(format!("{s}_summary.csv"));
        fs::write(&summary, r.summary()).map_err(io(&summary))?;
        writeln!(
            out,
            "{s}: goodput {:.4} wasted_gpu_hours {:.3} total_downtime_s {:.1} events {}",
            r.goodput_fraction,
            r.wasted_gpu_hours,
            r.total_downtime_s,
            r.events.len()
        )
        .map_err(stdout_err)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceFile {
    #[serde(default)]
    traces: Vec<RestartTrace>,
}

#[derive(serde::Serialize)]
struct FittedFile<'a> {
    cost_model: &'a handoff_core::simulator::cost::CostModel,
}

pub fn calibrate(config: &Path, traces: &Path, path: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = RunConfigFile::load(config)?;
    let text = fs::read_to_string(traces).map_err(io(traces))?;
    let file: TraceFile = toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", traces.display())))?;
    let report = fit(&cfg.cost_model(), &file.traces);
    write!(out, "{report}").map_err(stdout_err)?;
    if !report.errors.is_empty() {
        return Err(CliError::Validation(report.errors.join("; ")));
    }
    let fitted = toml::to_string(&FittedFile { cost_model: &report.fitted }).map_err(validation)?;
    match path {
        Some(p) => fs::write(p, fitted).map_err(io(p)),
        None => out.write_all(fitted.as_bytes()).map_err(stdout_err),
    }
}

pub fn speedup(config: &Path, models: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = RunConfigFile::load(config)?;
    let labels: Vec<&str> = models.iter().map(String::as_str).collect();
    let rows = speedup_report(&labels, &cfg.cost_model()).map_err(validation)?;
    out.write_all(speedup_table(&rows).as_bytes()).map_err(stdout_err)
}
