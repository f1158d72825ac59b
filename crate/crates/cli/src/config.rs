//! The run configuration file.

use std::collections::BTreeMap;

use handoff_core::simulator::cost::CostModel;
use handoff_core::simulator::presets::{gpt_preset, regime_preset};
use handoff_core::simulator::{ElasticityScenario, EventKind, Layout, ScenarioEvent};
use handoff_core::topology::{validate_config, ModelSpec, ParallelConfig, TensorSpec};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: ModelSection,
    pub cluster: Option<ClusterSection>,
    #[serde(default)]
    pub configs: BTreeMap<String, Layout>,
    pub scenario: Option<ScenarioSection>,
    #[serde(default)]
    pub cost_model: CostModel,
}

/// Either a named preset or an explicit layer template repeated `layers`
/// times.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub layers: Option<usize>,
    #[serde(default)]
    pub tensors: Vec<TensorTemplate>,
    #[serde(default = "default_element_bytes")]
    pub bytes_per_element: u32,
    #[serde(default = "default_state_multiplier")]
    pub state_multiplier: f64,
}

fn default_element_bytes() -> u32 {
    2
}

fn default_state_multiplier() -> f64 {
    16.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorTemplate {
    pub name: String,
    pub shape: Vec<u64>,
    pub shard_axis: Option<usize>,
}

/// Cluster facts. Bandwidths given here override the cost model.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub nodes: u32,
    pub gpus_per_node: u32,
    pub intra_node_gbytes_per_s: Option<f64>,
    pub inter_node_gbytes_per_s: Option<f64>,
    pub storage_gbits_per_s_per_gpu: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// A regime preset generating the events, or explicit `events`.
    pub regime: Option<String>,
    /// Name of the starting entry in `configs`; regimes bring their own.
    pub initial: Option<String>,
    pub duration_s: Option<f64>,
    pub checkpoint_interval: Option<u64>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub events: Vec<EventEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventEntry {
    pub time_s: f64,
    pub kind: EventKind,
    /// Name of an entry in `configs`.
    pub target: String,
    #[serde(default)]
    pub warning_window_s: f64,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Validation(msg) => CliError::Validation(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn check(&self) -> Result<(), CliError> {
        let model = self.model()?;
        if let Some(s) = &self.scenario {
            let mut names: Vec<&str> = s.events.iter().map(|e| e.target.as_str()).collect();
            names.extend(s.initial.as_deref());
            for n in names {
                if !self.configs.contains_key(n) {
                    return Err(CliError::Validation(format!("scenario references unknown config `{n}`")));
                }
            }
            match (&s.regime, s.events.is_empty(), &s.initial) {
                (Some(_), false, _) => {
                    return Err(CliError::Validation("scenario gives both a regime and explicit events".into()))
                }
                (Some(r), true, _) if regime_preset(r).is_none() => {
                    return Err(CliError::Validation(format!("unknown regime `{r}`")))
                }
                (None, _, None) => return Err(CliError::Validation("scenario needs `initial` or `regime`".into())),
                _ => {}
            }
        }
        if let Some(c) = &self.cluster {
            let capacity = c.nodes * c.gpus_per_node;
            for (name, l) in &self.configs {
                if l.first_rank + l.world() > capacity {
                    return Err(CliError::Validation(format!(
                        "config `{name}` needs ranks up to {} but the cluster has {capacity} GPUs",
                        l.first_rank + l.world()
                    )));
                }
            }
        }
        for (name, l) in &self.configs {
            validate_config(&l.config(0, model.num_layers), &model).map_err(|v| {
                let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
                CliError::Validation(format!("config `{name}`: {}", msgs.join("; ")))
            })?;
        }
        let bad = handoff_core::simulator::cost::check_cost_model(&self.cost_model());
        if !bad.is_empty() {
            return Err(CliError::Validation(bad.join("; ")));
        }
        Ok(())
    }

    /// Replaces the scenario with regime preset `label`.
    pub fn use_regime(&mut self, label: &str) -> Result<(), CliError> {
        if regime_preset(label).is_none() {
            return Err(CliError::Validation(format!("unknown regime `{label}`")));
        }
        self.scenario = Some(ScenarioSection {
            regime: Some(label.to_string()),
            initial: None,
            duration_s: None,
            checkpoint_interval: None,
            seed: None,
            events: Vec::new(),
        });
        Ok(())
    }

    pub fn model(&self) -> Result<ModelSpec, CliError> {
        let m = &self.model;
        let spec = match (&m.preset, m.tensors.is_empty()) {
            (Some(_), false) => return Err(CliError::Validation("model gives both a preset and tensors".into())),
            (Some(p), true) => gpt_preset(p).ok_or_else(|| CliError::Validation(format!("unknown model preset `{p}`")))?,
            (None, true) => return Err(CliError::Validation("model needs a preset or tensors".into())),
            (None, false) => {
                let layers = m.layers.ok_or_else(|| CliError::Validation("model.layers is required".into()))?;
                let tensors = (0..layers)
                    .flat_map(|l| {
                        m.tensors
                            .iter()
                            .map(move |t| TensorSpec::new(&format!("l{l}.{}", t.name), l, t.shape.clone(), t.shard_axis))
                    })
                    .collect();
                ModelSpec {
                    num_layers: layers,
                    tensors,
                    bytes_per_element: m.bytes_per_element,
                    state_multiplier: m.state_multiplier,
                }
            }
        };
        let bad = spec.check();
        if !bad.is_empty() {
            let msgs: Vec<String> = bad.iter().map(ToString::to_string).collect();
            return Err(CliError::Validation(msgs.join("; ")));
        }
        Ok(spec)
    }

    pub fn cost_model(&self) -> CostModel {
        let mut cm = self.cost_model.clone();
        if let Some(c) = &self.cluster {
            cm.gpus_per_node = c.gpus_per_node;
            if let Some(v) = c.intra_node_gbytes_per_s {
                cm.intra_node_gbytes_per_s = v;
            }
            if let Some(v) = c.inter_node_gbytes_per_s {
                cm.inter_node_gbytes_per_s = v;
            }
            if let Some(v) = c.storage_gbits_per_s_per_gpu {
                cm.storage_gbits_per_s_per_gpu = v;
            }
        }
        cm
    }

    pub fn layout(&self, name: &str) -> Result<Layout, CliError> {
        self.configs
            .get(name)
            .copied()
            .ok_or_else(|| CliError::Validation(format!("unknown config `{name}`")))
    }

    pub fn config(&self, name: &str, generation: u64) -> Result<ParallelConfig, CliError> {
        let layers = self.model()?.num_layers;
        Ok(self.layout(name)?.config(generation, layers))
    }

    /// The starting layout and events, with `seed` overriding the file.
    pub fn scenario(&self, seed: Option<u64>) -> Result<(Layout, ElasticityScenario), CliError> {
        let s = self
            .scenario
            .as_ref()
            .ok_or_else(|| CliError::Validation("no [scenario] section".into()))?;
        let seed = seed.or(s.seed);
        if let Some(r) = &s.regime {
            let mut spec = regime_preset(r).ok_or_else(|| CliError::Validation(format!("unknown regime `{r}`")))?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            if let Some(d) = s.duration_s {
                spec.duration_s = d;
            }
            if let Some(n) = s.checkpoint_interval {
                spec.checkpoint_interval = n;
            }
            let initial = match &s.initial {
                Some(n) => self.layout(n)?,
                None => spec.initial(),
            };
            return Ok((initial, spec.scenario()));
        }
        let initial = self.layout(s.initial.as_deref().unwrap_or_default())?;
        let events = s
            .events
            .iter()
            .map(|e| {
                Ok(ScenarioEvent {
                    time_s: e.time_s,
                    kind: e.kind,
                    warning_window_s: e.warning_window_s,
                    target: self.layout(&e.target)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let scenario = ElasticityScenario {
            duration_s: s.duration_s.unwrap_or(0.0),
            regime: "custom".into(),
            seed: seed.unwrap_or(0),
            checkpoint_interval: s.checkpoint_interval.unwrap_or(100),
            events,
        };
        scenario.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        Ok((initial, scenario))
    }
}
