//! Distributions over physical constants and concrete domain samples.
//!
//! A [`DomainDistribution`] is a list of independent marginals (normal or
//! uniform) plus a global `scale` that stretches every marginal about its
//! center. Physically positive parameters carry a `floor` that clips draws
//! from below so that every sampled domain is a well-posed simulation.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cartpole,
    Furuta,
}

impl Task {
    /// Parameter names the task's dynamics read.
    pub fn required_params(self) -> &'static [&'static str] {
        match self {
            Task::Cartpole => &[
                "gravity",
                "cart_mass",
                "pole_mass",
                "pole_half_length",
                "rail_length",
                "pinion_radius",
                "gear_ratio",
                "gear_efficiency",
                "motor_efficiency",
                "motor_inertia",
                "motor_torque_const",
                "motor_resistance",
                "cart_damping",
                "pole_damping",
                "cart_friction",
            ],
            Task::Furuta => &[
                "gravity",
                "pend_mass",
                "arm_mass",
                "pend_length",
                "arm_length",
                "pend_damping",
                "arm_damping",
                "motor_resistance",
                "motor_const",
            ],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Cartpole => "cartpole",
            Task::Furuta => "furuta",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Normal,
    Uniform,
}

/// One marginal. For `Normal`, `a` is the mean and `b` the standard
/// deviation; for `Uniform`, `a` and `b` are the lower and upper bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub a: f64,
    pub b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
}

impl ParamSpec {
    pub fn normal(name: &str, mean: f64, std: f64, floor: Option<f64>) -> Self {
        Self {
            name: name.to_owned(),
            kind: ParamKind::Normal,
            a: mean,
            b: std,
            floor,
        }
    }

    pub fn uniform(name: &str, low: f64, high: f64, floor: Option<f64>) -> Self {
        Self {
            name: name.to_owned(),
            kind: ParamKind::Uniform,
            a: low,
            b: high,
            floor,
        }
    }

    /// Mean for normals, midpoint for uniforms.
    pub fn center(&self) -> f64 {
        match self.kind {
            ParamKind::Normal => self.a,
            ParamKind::Uniform => 0.5 * (self.a + self.b),
        }
    }

    /// Standard deviation of the unclipped marginal at the given scale.
    pub fn std_at(&self, scale: f64) -> f64 {
        match self.kind {
            ParamKind::Normal => self.b * scale,
            ParamKind::Uniform => (self.b - self.a) * scale / 12f64.sqrt(),
        }
    }

    fn clip(&self, v: f64) -> f64 {
        match self.floor {
            Some(f) => v.max(f),
            None => v,
        }
    }

    fn validate(&self) -> Result<()> {
        let field = |m: &str| Error::config(format!("specs.{}", self.name), m.to_owned());
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(field("bounds must be finite"));
        }
        match self.kind {
            ParamKind::Normal if self.b <= 0.0 => return Err(field("normal std must be > 0")),
            ParamKind::Uniform if self.a >= self.b => {
                return Err(field("uniform lower bound must be below upper bound"))
            }
            _ => {}
        }
        if let Some(f) = self.floor {
            if !f.is_finite() {
                return Err(field("floor must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDistribution {
    task: Task,
    #[serde(default = "one")]
    scale: f64,
    specs: Vec<ParamSpec>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct DomainDistribution {
    task: Task,
    scale: f64,
    specs: Vec<ParamSpec>,
}

impl TryFrom<RawDistribution> for DomainDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        Self::new(raw.task, raw.specs, raw.scale)
    }
}

impl DomainDistribution {
    /// Builds and validates a distribution. Uniform specs given with
    /// `a > b` are normalized by swapping the bounds.
    pub fn new(task: Task, mut specs: Vec<ParamSpec>, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::config("scale", "must be finite and non-negative"));
        }
        for s in &mut specs {
            if s.kind == ParamKind::Uniform && s.a > s.b {
                log::warn!("uniform `{}` given with lower > upper; swapping bounds", s.name);
                std::mem::swap(&mut s.a, &mut s.b);
            }
            s.validate()?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &specs {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::config(format!("specs.{}", s.name), "duplicate name"));
            }
        }
        for name in task.required_params() {
            if !seen.contains(name) {
                return Err(Error::config(
                    format!("specs.{name}"),
                    format!("parameter required by the {task} dynamics is missing"),
                ));
            }
        }
        Ok(Self { task, scale, specs })
    }

    /// The shipped distribution for a task.
    pub fn builtin(task: Task) -> Self {
        let text = match task {
            Task::Cartpole => include_str!("../data/cartpole.json"),
            Task::Furuta => include_str!("../data/furuta.json"),
        };
        serde_json::from_str(text).expect("built-in distribution is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("distribution serializes")
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Same distribution with `scale` overridden.
    pub fn with_scale(&self, scale: f64) -> Result<Self> {
        Self::new(self.task, self.specs.clone(), scale)
    }

    /// Multiplies the spread of every marginal by `factor`, keeping centers.
    pub fn widen(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "widen factor must be finite and > 0, got {factor}"
            )));
        }
        let mut out = self.clone();
        out.scale *= factor;
        Ok(out)
    }

    pub fn sample(&self, rng: &mut Rng) -> DomainParams {
        let values = self
            .specs
            .iter()
            .map(|s| {
                let raw = match s.kind {
                    ParamKind::Normal => {
                        let z: f64 = rng.sample(StandardNormal);
                        s.a + s.b * self.scale * z
                    }
                    ParamKind::Uniform => {
                        let u: f64 = rng.random();
                        let half = 0.5 * (s.b - s.a) * self.scale;
                        s.center() - half + 2.0 * half * u
                    }
                };
                (s.name.clone(), s.clip(raw))
            })
            .collect();
        DomainParams { values }
    }

    /// Means and midpoints, with floors applied.
    pub fn nominal(&self) -> DomainParams {
        DomainParams {
            values: self
                .specs
                .iter()
                .map(|s| (s.name.clone(), s.clip(s.center())))
                .collect(),
        }
    }

    /// Content hash over task, scale and every spec.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.task.name().as_bytes());
        h.update(self.scale.to_bits().to_le_bytes());
        for s in &self.specs {
            h.update(s.name.as_bytes());
            h.update([0u8, s.kind as u8]);
            h.update(s.a.to_bits().to_le_bytes());
            h.update(s.b.to_bits().to_le_bytes());
            h.update(s.floor.map_or(u64::MAX, f64::to_bits).to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

pub fn sample_domain(dist: &DomainDistribution, rng: &mut Rng) -> DomainParams {
    dist.sample(rng)
}

pub fn nominal_domain(dist: &DomainDistribution) -> DomainParams {
    dist.nominal()
}

pub fn widen(dist: &DomainDistribution, factor: f64) -> Result<DomainDistribution> {
    dist.widen(factor)
}

/// A concrete set of physical constants, keyed by parameter name (SI units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainParams {
    values: BTreeMap<String, f64>,
}

impl DomainParams {
    pub fn from_map(values: BTreeMap<String, f64>) -> Self {
        Self { values }
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        self.values.get(name).copied().ok_or_else(|| {
            Error::config(
                format!("domain.{name}"),
                "parameter missing from domain",
            )
        })
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.values.insert(name.to_owned(), value);
    }

    pub fn values(&self) -> &BTreeMap<String, f64> {
        &self.values
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            h.update(k.as_bytes());
            h.update([0u8]);
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}
