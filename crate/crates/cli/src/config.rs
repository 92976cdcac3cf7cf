//! Experiment configuration: profile defaults, JSON overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use didor_core::baselines::P2PConfig;
use didor_core::distill::DistillConfig;
use didor_core::domain::{DomainDistribution, Task};
use didor_core::envs::TaskConfig;
use didor_core::ppo::PpoConfig;
use didor_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Didor,
    Udr,
    Ensemble,
    P2pdrl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Didor => "didor",
            Method::Udr => "udr",
            Method::Ensemble => "ensemble",
            Method::P2pdrl => "p2pdrl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Rollouts per teacher domain.
    pub teacher_rollouts: usize,
    pub unseen_domains: usize,
    pub unseen_rollouts: usize,
    pub test_scale: f64,
}

impl EvalConfig {
    pub fn desk() -> Self {
        Self { teacher_rollouts: 10, unseen_domains: 16, unseen_rollouts: 10, test_scale: 1.5 }
    }

    pub fn paper() -> Self {
        Self { teacher_rollouts: 100, unseen_domains: 32, unseen_rollouts: 100, test_scale: 1.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.teacher_rollouts == 0 {
            return Err(Error::config("eval.teacher_rollouts", "must be >= 1"));
        }
        if self.unseen_rollouts == 0 {
            return Err(Error::config("eval.unseen_rollouts", "must be >= 1"));
        }
        if !(self.test_scale.is_finite() && self.test_scale >= 1.0) {
            return Err(Error::config("eval.test_scale", "must be >= 1"));
        }
        Ok(())
    }
}

/// Domain distribution given inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DistributionSource {
    File(PathBuf),
    Inline(DomainDistribution),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub task: Task,
    pub method: Method,
    pub master_seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Built-in distribution for the task when absent.
    pub distribution: Option<DistributionSource>,
    pub env: TaskConfig,
    pub ppo: PpoConfig,
    pub distill: DistillConfig,
    pub p2p: P2PConfig,
    pub eval: EvalConfig,
    /// Keep wall-clock milliseconds in learning curves (breaks byte-identical reruns).
    pub record_wall_ms: bool,
}

impl ExperimentConfig {
    pub fn defaults(profile: Profile, task: Task, method: Method) -> Self {
        let (env, ppo, distill, p2p, eval) = match profile {
            Profile::Desk => (
                TaskConfig::desk(task),
                PpoConfig::desk(),
                DistillConfig::desk(),
                P2PConfig::desk(),
                EvalConfig::desk(),
            ),
            Profile::Paper => (
                TaskConfig::paper(task),
                PpoConfig::paper(),
                DistillConfig::paper(),
                P2PConfig::paper(task),
                EvalConfig::paper(),
            ),
        };
        Self {
            profile,
            task,
            method,
            master_seed: 0,
            output_dir: None,
            distribution: None,
            env,
            ppo,
            distill,
            p2p,
            eval,
            record_wall_ms: false,
        }
    }

    /// Parses `text`, layering it over the defaults of its profile (or
    /// `profile_override`). `base` resolves relative distribution paths.
    pub fn from_json(text: &str, profile_override: Option<Profile>, base: Option<&Path>) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| anchored(text, "config", e.line(), e.column(), &e.to_string()))?;
        let obj = user
            .as_object()
            .ok_or_else(|| Error::config("config", "top level must be a JSON object"))?;
        let pick = |key: &str| -> Result<Option<Value>> { Ok(obj.get(key).cloned()) };
        let profile: Profile = match (profile_override, pick("profile")?) {
            (Some(p), _) => p,
            (None, Some(v)) => serde_json::from_value(v).map_err(|e| located(text, "profile", &e.to_string()))?,
            (None, None) => Profile::Desk,
        };
        let task: Task = match pick("task")? {
            Some(v) => serde_json::from_value(v).map_err(|e| located(text, "task", &e.to_string()))?,
            None => return Err(Error::config("task", "missing required key")),
        };
        let method: Method = match pick("method")? {
            Some(v) => serde_json::from_value(v).map_err(|e| located(text, "method", &e.to_string()))?,
            None => Method::Didor,
        };
        let mut merged = serde_json::to_value(Self::defaults(profile, task, method)).expect("defaults serialize");
        merge(&mut merged, user);
        if let Some(p) = profile_override {
            merged["profile"] = serde_json::to_value(p).expect("profile serializes");
        }
        let mut cfg: Self = serde_json::from_value(merged).map_err(|e| {
            let msg = e.to_string();
            let key = backticked(&msg).unwrap_or("config").to_string();
            located(text, &key, &msg)
        })?;
        if let (Some(DistributionSource::File(p)), Some(base)) = (&cfg.distribution, base) {
            if p.is_relative() {
                cfg.distribution = Some(DistributionSource::File(base.join(p)));
            }
        }
        cfg.validate().map_err(|e| match e {
            Error::Config { field, message } => {
                let leaf = field.rsplit('.').next().unwrap_or(&field).to_string();
                match locate(text, &leaf) {
                    Some((line, col)) => Error::config(field, format!("{message} (line {line}, column {col})")),
                    None => Error::config(field, message),
                }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile_override: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, profile_override, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        self.distill.validate()?;
        self.p2p.validate()?;
        self.eval.validate()?;
        if let Some(DistributionSource::File(p)) = &self.distribution {
            if !p.exists() {
                return Err(Error::config("distribution", format!("file {} does not exist", p.display())));
            }
        }
        let dist = self.domain_distribution()?;
        if dist.task() != self.task {
            return Err(Error::config("distribution", format!("describes {} but task is {}", dist.task(), self.task)));
        }
        Ok(())
    }

    pub fn domain_distribution(&self) -> Result<DomainDistribution> {
        match &self.distribution {
            None => Ok(DomainDistribution::builtin(self.task)),
            Some(DistributionSource::Inline(d)) => Ok(d.clone()),
            Some(DistributionSource::File(p)) => {
                let text = std::fs::read_to_string(p)?;
                DomainDistribution::from_json(&text)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes()))
    }
}

/// Recursively overlays `over` onto `base`; objects merge key-wise,
/// everything else replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn backticked(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

/// 1-based line and column of the first `"key"` in `text`.
pub fn locate(text: &str, key: &str) -> Option<(usize, usize)> {
    let pos = text.find(&format!("\"{key}\""))?;
    let line = text[..pos].matches('\n').count() + 1;
    let col = pos - text[..pos].rfind('\n').map_or(0, |i| i + 1) + 1;
    Some((line, col))
}

fn anchored(_text: &str, field: &str, line: usize, col: usize, msg: &str) -> Error {
    Error::config(field, format!("{msg} (line {line}, column {col})"))
}

fn located(text: &str, key: &str, msg: &str) -> Error {
    match locate(text, key) {
        Some((line, col)) => anchored(text, key, line, col, msg),
        None => Error::config(key, msg),
    }
}
