//! Experiment configuration: one JSON document per run, unknown keys
//! rejected, dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::curriculum::PhaseCriteria;
use crate::enforcer::{BudgetConfig, EnforcerMode};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::policy::{MessageMode, PolicyConfig};
use crate::trainer::TrainConfig;

/// Training regime, named after the comparison table rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Gate forced open, continuous messages.
    FixedCts,
    /// Gate forced open, prototype messages.
    FixedProto,
    /// Learned gate without budget shaping, continuous messages.
    GatedCts,
    /// Learned gate without budget shaping, prototype messages.
    GatedProto,
    /// Full curriculum ending in the configured enforcer.
    Enforcer,
}

impl RunMode {
    pub fn label(self) -> &'static str {
        match self {
            Self::FixedCts => "Fixed-Cts",
            Self::FixedProto => "Fixed-Proto",
            Self::GatedCts => "Gated-Cts",
            Self::GatedProto => "Gated-Proto",
            Self::Enforcer => "Enforcer",
        }
    }

    pub fn message_mode(self) -> Option<MessageMode> {
        match self {
            Self::FixedCts | Self::GatedCts => Some(MessageMode::Continuous),
            Self::FixedProto | Self::GatedProto => Some(MessageMode::Prototype),
            Self::Enforcer => None,
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| {
            Error::config(format!(
                "unknown mode `{s}` (fixed-cts, fixed-proto, gated-cts, gated-proto, enforcer)"
            ))
        })
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_out() -> String {
    "runs".into()
}

fn default_mode() -> RunMode {
    RunMode::Enforcer
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub curriculum: PhaseCriteria,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: String,
}

impl ExperimentConfig {
    /// Defaults for a named environment preset.
    pub fn for_env(name: &str) -> Result<Self> {
        let env = EnvConfig::preset(name)?;
        let curriculum = PhaseCriteria::for_env(name == "tj-medium");
        Ok(Self {
            env,
            mode: default_mode(),
            policy: PolicyConfig::default(),
            budget: BudgetConfig::default(),
            train: TrainConfig::default(),
            curriculum,
            seeds: default_seeds(),
            out_dir: default_out(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every block and the cross-block rules.
    pub fn validate(&self) -> Result<()> {
        self.env.spec()?;
        self.policy.validate()?;
        self.budget.validate()?;
        self.train.validate(self.env.max_steps())?;
        self.curriculum.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.mode == RunMode::Enforcer && self.budget.mode == EnforcerMode::None && self.budget.b < 1.0 {
            return Err(Error::config("a budget below 1 needs an enforcer mode"));
        }
        Ok(())
    }

    /// Enforcer name as logged; only the enforcer mode uses one.
    pub fn enforcer_name(&self) -> &'static str {
        match self.mode {
            RunMode::Enforcer => self.budget.mode.name(),
            _ => "none",
        }
    }

    /// Policy block with the mode's message type applied.
    pub fn effective_policy(&self) -> PolicyConfig {
        let mut p = self.policy.clone();
        if let Some(m) = self.mode.message_mode() {
            p.message_mode = m;
        }
        p
    }

    /// Apply `path=value` overrides, e.g. `budget.b=0.3`. The value is read
    /// as JSON when it parses, otherwise as a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for ov in overrides {
            let ov = ov.as_ref();
            let (path, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{ov}` is not of the form key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, path, value)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::config(format!("invalid override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override path `{path}` does not name an object field")))?;
        if k + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::config(format!("unknown field `{part}` in override `{path}`")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("unknown field `{part}` in override `{path}`")))?;
    }
    Err(Error::config("empty override path"))
}
