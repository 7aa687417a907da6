//! Run configuration: one TOML file plus `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvaluationConfig;
use crate::model::{EmConfig, CHANNELS};
use crate::parallel::Execution;
use crate::signal::PipelineConfig;
use crate::synth::{make_profile, SubjectProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub duration: f64,
    pub noise_sigma: f64,
    pub resp_amp: f64,
    pub mean_rr: f64,
    /// `"auto"` (drawn from the seed), `"none"`, or a channel index `"0"`..`"3"`.
    pub dropout: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration: 600.0,
            noise_sigma: 0.2,
            resp_amp: 0.5,
            mean_rr: 0.85,
            dropout: "auto".into(),
        }
    }
}

impl SynthConfig {
    /// The subject drawn from `seed` with this configuration's overrides.
    pub fn profile(&self, seed: u64) -> Result<SubjectProfile> {
        let mut p = make_profile(seed);
        p.noise_sigma = self.noise_sigma;
        p.resp_amp = self.resp_amp;
        p.mean_rr = self.mean_rr;
        p.dropout_channel = match self.dropout.as_str() {
            "auto" => p.dropout_channel,
            "none" => None,
            s => match s.parse::<usize>() {
                Ok(c) if c < CHANNELS => Some(c),
                _ => {
                    return Err(Error::Config(format!(
                        "synth.dropout must be \"auto\", \"none\" or a channel 0-3, got \"{s}\""
                    )))
                }
            },
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Use the thread pool for data-parallel stages.
    pub parallel: bool,
    pub em: EmConfig,
    pub pipeline: PipelineConfig,
    pub detector: DetectorConfig,
    pub evaluation: EvaluationConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            parallel: true,
            em: EmConfig::default(),
            pipeline: PipelineConfig::default(),
            detector: DetectorConfig::default(),
            evaluation: EvaluationConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    /// EM settings with the run seed and execution mode filled in.
    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            seed: self.seed,
            execution: self.execution(),
            ..self.em.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.em.validate()?;
        self.pipeline.validate()?;
        let d = &self.detector;
        if !(d.window > 0.0 && d.refractory >= 0.0 && d.min_votes >= 1) {
            return Err(Error::Config(
                "detector window must be positive and min_votes at least 1".into(),
            ));
        }
        let e = &self.evaluation;
        if !(e.halo > 0.0 && e.rate_window > 0.0 && e.rate_step > 0.0 && e.match_tolerance > 0.0) {
            return Err(Error::Config("evaluation parameters must be positive".into()));
        }
        self.synth.profile(self.seed).map(|_| ())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::load(Some(text), &[])
    }

    /// Parses an optional TOML document, applies `section.key=value`
    /// overrides on top and validates the result.
    pub fn load(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match text {
            Some(t) => t
                .parse()
                .map_err(|e| Error::Config(format!("config: {e}")))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
            .transpose()?;
        Self::load(text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable as TOML")
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let value = parse_value(raw.trim());
    let mut path: Vec<&str> = key.trim().split('.').collect();
    let last = path.pop().filter(|k| !k.is_empty()).ok_or_else(|| {
        Error::Config(format!("override '{assignment}' has an empty key"))
    })?;
    let mut node = table;
    for part in path {
        node = node
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key '{key}': '{part}' is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
