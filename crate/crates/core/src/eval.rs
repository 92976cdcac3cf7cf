//! Evaluation protocol: deterministic rollouts across domain sets, return
//! summaries and cross-method comparison.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{DomainDistribution, DomainParams, Task};
use crate::envs::{obs_dim, Env, TaskConfig};
use crate::error::{Error, Result};
use crate::net::GaussianPolicy;
use crate::seed::Seeds;

/// Anything that maps an observation to a deterministic action.
pub trait Actor: Sync {
    fn obs_dim(&self) -> usize;
    fn act(&self, obs: &[f64]) -> Result<Vec<f64>>;
}

impl Actor for GaussianPolicy {
    fn obs_dim(&self) -> usize {
        GaussianPolicy::obs_dim(self)
    }

    fn act(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.mean_action(obs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    pub task: Task,
    /// `teacher` or `unseen`.
    pub panel: String,
    pub n_domains: usize,
    pub n_rollouts: usize,
    pub test_scale: f64,
    pub max_steps: usize,
}

impl EvalProtocol {
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("protocol serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub domain: usize,
    pub fingerprint: String,
    pub returns: Vec<f64>,
    pub diverged: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_us: f64,
    pub max_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub protocol: EvalProtocol,
    pub domains: Vec<DomainResult>,
    pub latency: Latency,
}

impl EvalReport {
    pub fn all_returns(&self) -> Vec<f64> {
        self.domains.iter().flat_map(|d| d.returns.iter().copied()).collect()
    }

    /// Report with latency zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self { latency: Latency::default(), ..self.clone() }
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for d in &self.domains {
            let line = serde_json::json!({
                "method": self.method,
                "seed": self.seed,
                "panel": self.protocol.panel,
                "domain": d.domain,
                "fingerprint": d.fingerprint,
                "returns": d.returns,
                "diverged": d.diverged,
            });
            s.push_str(&line.to_string());
            s.push('\n');
        }
        s
    }

    /// Rows `method,seed,domain,rollout,return`, without a header.
    pub fn csv_rows(&self, out: &mut String) {
        for d in &self.domains {
            for (r, v) in d.returns.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{},{}", self.method, self.seed, d.domain, r, v);
            }
        }
    }
}

pub const CSV_HEADER: &str = "method,seed,domain,rollout,return";

/// Runs `n_rollouts` mean-action episodes in every domain. Rollout `r` in
/// domain `d` starts from `seeds.child("eval-domain", d).rng("rollout", r)`,
/// so all methods see the same initial states. Diverged rollouts score 0.
pub fn evaluate_policy<A: Actor>(
    actor: &A,
    method: &str,
    seed: u64,
    task: Task,
    task_cfg: &TaskConfig,
    domains: &[DomainParams],
    panel: &str,
    test_scale: f64,
    n_rollouts: usize,
    seeds: &Seeds,
) -> Result<EvalReport> {
    evaluate_matched(&[actor as &dyn Actor], method, seed, task, task_cfg, domains, panel, test_scale, n_rollouts, seeds)
}

/// Like [`evaluate_policy`], but `actors[d]` acts in `domains[d]` (a single
/// actor is used everywhere).
pub fn evaluate_matched(
    actors: &[&dyn Actor],
    method: &str,
    seed: u64,
    task: Task,
    task_cfg: &TaskConfig,
    domains: &[DomainParams],
    panel: &str,
    test_scale: f64,
    n_rollouts: usize,
    seeds: &Seeds,
) -> Result<EvalReport> {
    if actors.len() != 1 && actors.len() != domains.len() {
        return Err(Error::InvalidArgument(format!("{} actors for {} domains", actors.len(), domains.len())));
    }
    let od = obs_dim(task);
    if let Some(a) = actors.iter().find(|a| a.obs_dim() != od) {
        return Err(Error::Shape { what: format!("{task} observation"), expected: od, got: a.obs_dim() });
    }
    if n_rollouts == 0 {
        return Err(Error::InvalidArgument("n_rollouts must be >= 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..domains.len())
        .flat_map(|d| (0..n_rollouts).map(move |r| (d, r)))
        .collect();
    let results: Vec<(f64, bool, f64, f64, usize)> = jobs
        .par_iter()
        .map(|&(d, r)| {
            let mut rng = seeds.child("eval-domain", d as u64).rng("rollout", r as u64);
            let mut env = Env::new(task, task_cfg, &domains[d]).map_err(|e| e.in_domain(d))?;
            let mut obs = env.reset(&mut rng);
            let (mut ret, mut total_us, mut max_us, mut n) = (0.0, 0.0f64, 0.0f64, 0usize);
            loop {
                let t = Instant::now();
                let a = actors[if actors.len() == 1 { 0 } else { d }].act(&obs)?;
                let us = t.elapsed().as_secs_f64() * 1e6;
                total_us += us;
                max_us = max_us.max(us);
                n += 1;
                match env.step(a[0]) {
                    Ok(res) => {
                        ret += res.reward;
                        if res.done {
                            return Ok((ret, false, total_us, max_us, n));
                        }
                        obs = res.obs;
                    }
                    Err(Error::SimulationDiverged { .. }) => {
                        log::warn!("rollout {r} diverged in domain {d}");
                        return Ok((0.0, true, total_us, max_us, n));
                    }
                    Err(e) => return Err(e.in_domain(d)),
                }
            }
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(domains.len());
    let (mut total_us, mut max_us, mut count) = (0.0, 0.0f64, 0usize);
    for (d, dom) in domains.iter().enumerate() {
        let chunk = &results[d * n_rollouts..(d + 1) * n_rollouts];
        for c in chunk {
            total_us += c.2;
            max_us = max_us.max(c.3);
            count += c.4;
        }
        out.push(DomainResult {
            domain: d,
            fingerprint: dom.fingerprint(),
            returns: chunk.iter().map(|c| c.0).collect(),
            diverged: chunk.iter().map(|c| c.1).collect(),
        });
    }
    Ok(EvalReport {
        method: method.into(),
        seed,
        protocol: EvalProtocol {
            task,
            panel: panel.into(),
            n_domains: domains.len(),
            n_rollouts,
            test_scale,
            max_steps: task_cfg.max_steps,
        },
        domains: out,
        latency: Latency { mean_us: if count > 0 { total_us / count as f64 } else { 0.0 }, max_us },
    })
}

/// Unseen test domains from `widen(dist, test_scale)`, drawn from the
/// dedicated stream `("unseen-domains", 0)`.
pub fn unseen_domains(dist: &DomainDistribution, test_scale: f64, n: usize, seeds: &Seeds) -> Result<Vec<DomainParams>> {
    let wide = dist.widen(test_scale)?;
    let mut rng = seeds.rng("unseen-domains", 0);
    Ok((0..n).map(|_| wide.sample(&mut rng)).collect())
}

/// Quantile with linear interpolation between order statistics
/// (`h = (n − 1) p`). NaN for an empty slice.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub domain_medians: Vec<f64>,
}

impl SummaryStats {
    pub fn from_values(values: &[f64], domain_medians: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("cannot summarize an empty set of returns".into()));
        }
        Ok(Self {
            count: values.len(),
            median: quantile(values, 0.5),
            q1: quantile(values, 0.25),
            q3: quantile(values, 0.75),
            min: quantile(values, 0.0),
            max: quantile(values, 1.0),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            domain_medians,
        })
    }
}

pub fn summarize(report: &EvalReport) -> Result<SummaryStats> {
    let medians = report.domains.iter().map(|d| quantile(&d.returns, 0.5)).collect();
    SummaryStats::from_values(&report.all_returns(), medians)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub stats: SummaryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub pooled: SummaryStats,
    pub seeds: Vec<SeedSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub protocol: String,
    pub rows: Vec<ComparisonRow>,
}

/// Groups reports by method (first-appearance order) after checking that
/// every report shares one protocol.
pub fn compare_methods(reports: &[EvalReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no reports to compare".into()))?;
    let fp = first.protocol.fingerprint();
    for r in reports {
        let other = r.protocol.fingerprint();
        if other != fp {
            return Err(Error::InvalidArgument(format!(
                "incompatible protocols: {fp} ({} domains) vs {other} ({} domains)",
                first.protocol.n_domains, r.protocol.n_domains
            )));
        }
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let rows = methods
        .into_iter()
        .map(|m| {
            let group: Vec<&EvalReport> = reports.iter().filter(|r| r.method == m).collect();
            let pooled: Vec<f64> = group.iter().flat_map(|r| r.all_returns()).collect();
            let n_dom = group[0].domains.len();
            let domain_medians = (0..n_dom)
                .map(|d| {
                    let v: Vec<f64> = group.iter().flat_map(|r| r.domains[d].returns.iter().copied()).collect();
                    quantile(&v, 0.5)
                })
                .collect();
            Ok(ComparisonRow {
                method: m.to_string(),
                pooled: SummaryStats::from_values(&pooled, domain_medians)?,
                seeds: group
                    .iter()
                    .map(|r| Ok(SeedSummary { seed: r.seed, stats: summarize(r)? }))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Comparison { protocol: fp, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(f64, usize);

    impl Actor for Constant {
        fn obs_dim(&self) -> usize {
            self.1
        }
        fn act(&self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![self.0])
        }
    }

    fn report(values: &[&[f64]], n_domains: usize) -> EvalReport {
        EvalReport {
            method: "m".into(),
            seed: 0,
            protocol: EvalProtocol {
                task: Task::Cartpole,
                panel: "teacher".into(),
                n_domains,
                n_rollouts: values[0].len(),
                test_scale: 1.0,
                max_steps: 600,
            },
            domains: values
                .iter()
                .enumerate()
                .map(|(i, v)| DomainResult {
                    domain: i,
                    fingerprint: format!("{i}"),
                    returns: v.to_vec(),
                    diverged: vec![false; v.len()],
                })
                .collect(),
            latency: Latency::default(),
        }
    }

    #[test]
    fn quantile_rule() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.25), 1.75);
        assert_eq!(quantile(&[7.0], 0.3), 7.0);
    }

    #[test]
    fn single_value_summary() {
        let s = summarize(&report(&[&[5.0]], 1)).unwrap();
        for v in [s.median, s.q1, s.q3, s.min, s.max, s.mean] {
            assert_eq!(v, 5.0);
        }
    }

    #[test]
    fn empty_report_is_rejected() {
        let mut r = report(&[&[1.0]], 1);
        r.domains.clear();
        assert!(matches!(summarize(&r), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mixed_protocols_name_both_fingerprints() {
        let a = report(&[&[1.0]], 31);
        let b = report(&[&[1.0]], 32);
        let msg = compare_methods(&[a.clone(), b.clone()]).unwrap_err().to_string();
        assert!(msg.contains(&a.protocol.fingerprint()) && msg.contains(&b.protocol.fingerprint()));
    }

    #[test]
    fn identical_reports_give_identical_rows() {
        let a = report(&[&[1.0, 2.0], &[3.0, 5.0]], 2);
        let mut b = a.clone();
        b.method = "other".into();
        let c = compare_methods(&[a, b]).unwrap();
        assert_eq!(c.rows.len(), 2);
        assert_eq!(c.rows[0].pooled, c.rows[1].pooled);
    }

    #[test]
    fn grid_size_and_determinism() {
        let task = Task::Cartpole;
        let mut tc = TaskConfig::desk(task);
        tc.max_steps = 20;
        let dist = DomainDistribution::builtin(task);
        let seeds = Seeds::new(9);
        let doms = unseen_domains(&dist, 1.5, 3, &seeds).unwrap();
        let run = || evaluate_policy(&Constant(0.5, 5), "c", 0, task, &tc, &doms, "unseen", 1.5, 4, &seeds).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.all_returns().len(), 12);
        assert_eq!(a.without_timing(), b.without_timing());
        let mut csv = String::new();
        a.csv_rows(&mut csv);
        assert_eq!(csv.lines().count(), 12);
    }

    #[test]
    fn wrong_obs_dim_is_a_shape_error() {
        let task = Task::Furuta;
        let d = DomainDistribution::builtin(task).nominal();
        let err = evaluate_policy(&Constant(0.0, 5), "c", 0, task, &TaskConfig::desk(task), &[d], "teacher", 1.0, 1, &Seeds::new(0)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
