//! Comparison methods: uniform domain randomization, teacher ensembles and
//! peer-to-peer distillation.

use serde::{Deserialize, Serialize};

use crate::domain::{DomainDistribution, Task};
use crate::envs::TaskConfig;
use crate::error::{Error, Result};
use crate::eval::Actor;
use crate::net::{kl_and_student_grads, GaussianPolicy, PolicyMeta};
use crate::ppo::{ppo_iteration, train_ppo, CurveRecord, DomainMode, Learner, PolicyRegularizer, PpoConfig, RolloutBatch, TrainOutput};
use crate::seed::Seeds;

/// Trains one policy with fresh domains for every environment at every
/// iteration.
pub fn train_udr(
    task: Task,
    task_cfg: &TaskConfig,
    dist: &DomainDistribution,
    total_iterations: usize,
    ppo_cfg: &PpoConfig,
    seeds: &Seeds,
) -> Result<TrainOutput> {
    if total_iterations == 0 {
        return Err(Error::InvalidArgument("train_udr needs at least one iteration".into()));
    }
    let cfg = PpoConfig { iterations: total_iterations, ..ppo_cfg.clone() };
    let mut out = train_ppo(task, task_cfg, &DomainMode::PerEnv(dist.clone()), &cfg, seeds)?;
    out.policy.meta = PolicyMeta {
        seed: seeds.master(),
        task: task.name().into(),
        method: "udr".into(),
        created: "udr".into(),
    };
    Ok(out)
}

/// Averages the mean actions of its members.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePolicy {
    members: Vec<GaussianPolicy>,
}

impl EnsemblePolicy {
    pub fn new(members: Vec<GaussianPolicy>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one member".into()))?;
        for m in &members {
            if m.obs_dim() != first.obs_dim() || m.act_dim() != first.act_dim() {
                return Err(Error::Shape { what: "ensemble member".into(), expected: first.obs_dim(), got: m.obs_dim() });
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[GaussianPolicy] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Arithmetic mean of member mean actions. Each action dimension is summed
/// in sorted order so the result does not depend on member order.
pub fn ensemble_action(ens: &EnsemblePolicy, obs: &[f64]) -> Result<Vec<f64>> {
    if ens.members.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let outs = ens.members.iter().map(|m| m.mean_action(obs)).collect::<Result<Vec<_>>>()?;
    let ad = outs[0].len();
    let n = outs.len() as f64;
    Ok((0..ad)
        .map(|d| {
            let mut col: Vec<f64> = outs.iter().map(|o| o[d]).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / n
        })
        .collect())
}

impl Actor for EnsemblePolicy {
    fn obs_dim(&self) -> usize {
        self.members[0].obs_dim()
    }

    fn act(&self, obs: &[f64]) -> Result<Vec<f64>> {
        ensemble_action(self, obs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct P2PConfig {
    pub workers: usize,
    pub alpha: f64,
    #[serde(default)]
    pub output_worker: usize,
}

impl P2PConfig {
    pub fn desk() -> Self {
        Self { workers: 4, alpha: 0.05, output_worker: 0 }
    }

    pub fn paper(task: Task) -> Self {
        match task {
            Task::Cartpole => Self { workers: 4, alpha: 0.05, output_worker: 0 },
            Task::Furuta => Self { workers: 2, alpha: 0.05, output_worker: 0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers < 2 {
            return Err(Error::config("p2p.workers", "must be >= 2"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config("p2p.alpha", "must be >= 0"));
        }
        if self.output_worker >= self.workers {
            return Err(Error::config("p2p.output_worker", "must index an existing worker"));
        }
        Ok(())
    }
}

/// `α/(K−1) · Σ_j mean_s KL(π_j(s) ‖ π_self(s))` with frozen peers whose
/// outputs are precomputed on every row of the worker's batch.
#[derive(Debug, Clone)]
pub struct P2PRegularizer {
    pub peer_means: Vec<Vec<f64>>,
    pub peer_log_std: Vec<Vec<f64>>,
    pub coef: f64,
}

impl P2PRegularizer {
    pub fn new(peers: &[&GaussianPolicy], obs: &[f64], n: usize, alpha: f64, workers: usize) -> Result<Self> {
        let peer_means = peers
            .iter()
            .map(|p| Ok(p.mean.forward_batch(obs, n)?.output().to_vec()))
            .collect::<Result<_>>()?;
        Ok(Self {
            peer_means,
            peer_log_std: peers.iter().map(|p| p.log_std.clone()).collect(),
            coef: alpha / (workers - 1) as f64,
        })
    }
}

impl PolicyRegularizer for P2PRegularizer {
    fn loss_and_grad(&self, rows: &[usize], means: &[f64], log_std: &[f64], d_mean: &mut [f64], d_log_std: &mut [f64]) -> f64 {
        let ad = log_std.len();
        let w = self.coef / rows.len() as f64;
        let mut loss = 0.0;
        for (pm, pls) in self.peer_means.iter().zip(&self.peer_log_std) {
            for (b, &row) in rows.iter().enumerate() {
                for d in 0..ad {
                    let (kl, gm, gs) = kl_and_student_grads(pm[row * ad + d], pls[d], means[b * ad + d], log_std[d]);
                    loss += w * kl;
                    d_mean[b * ad + d] += w * gm;
                    d_log_std[d] += w * gs;
                }
            }
        }
        loss
    }
}

#[derive(Debug, Clone)]
pub struct P2POutput {
    pub policy: GaussianPolicy,
    pub curves: Vec<Vec<CurveRecord>>,
    pub domain_logs: Vec<Vec<Vec<String>>>,
    /// Number of policies held in memory at once.
    pub resident_policies: usize,
}

/// Worker `k` trains under `seeds.child("worker", k)` with a fresh domain
/// per iteration. Peers are snapshotted at the start of every iteration;
/// workers then update in index order.
pub fn train_p2pdrl(
    task: Task,
    task_cfg: &TaskConfig,
    dist: &DomainDistribution,
    cfg: &P2PConfig,
    ppo_cfg: &PpoConfig,
    seeds: &Seeds,
) -> Result<P2POutput> {
    cfg.validate()?;
    ppo_cfg.validate()?;
    task_cfg.validate()?;
    let k = cfg.workers;
    let worker_seeds: Vec<Seeds> = (0..k).map(|w| seeds.child("worker", w as u64)).collect();
    let mut learners: Vec<Learner> = worker_seeds.iter().map(|s| Learner::new(task, &ppo_cfg.hidden, s)).collect();
    let mode = DomainMode::PerIteration(dist.clone());
    let mut curves = vec![Vec::with_capacity(ppo_cfg.iterations); k];
    let mut domain_logs = vec![Vec::with_capacity(ppo_cfg.iterations); k];
    for iter in 0..ppo_cfg.iterations {
        let snapshot: Vec<GaussianPolicy> = learners.iter().map(|l| l.policy.clone()).collect();
        for w in 0..k {
            let domains = mode.domains(iter, ppo_cfg.n_envs, &worker_seeds[w]);
            let peers: Vec<&GaussianPolicy> = snapshot.iter().enumerate().filter(|(j, _)| *j != w).map(|(_, p)| p).collect();
            let build = |batch: &RolloutBatch| -> Box<dyn PolicyRegularizer> {
                Box::new(
                    P2PRegularizer::new(&peers, &batch.obs, batch.len(), cfg.alpha, k)
                        .expect("peer dimensions match the worker"),
                )
            };
            let reg: Option<&dyn Fn(&RolloutBatch) -> Box<dyn PolicyRegularizer>> =
                if cfg.alpha > 0.0 { Some(&build) } else { None };
            let rec = ppo_iteration(&mut learners[w], task, task_cfg, &domains, ppo_cfg, iter, &worker_seeds[w], reg)
                .map_err(|e| e.at(format!("worker {w}, iteration {iter}")))?;
            curves[w].push(rec);
            domain_logs[w].push(domains.iter().map(|d| d.fingerprint()).collect());
        }
    }
    let mut policy = learners.swap_remove(cfg.output_worker).policy;
    policy.meta = PolicyMeta {
        seed: seeds.master(),
        task: task.name().into(),
        method: "p2pdrl".into(),
        created: format!("worker-{}", cfg.output_worker),
    };
    Ok(P2POutput { policy, curves, domain_logs, resident_policies: k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Mlp;

    fn constant(mean: f64) -> GaussianPolicy {
        let mut mlp = Mlp::zeros(&[5, 2, 1]);
        mlp.layer_mut(1).1[0] = mean;
        GaussianPolicy { mean: mlp, log_std: vec![0.0], meta: PolicyMeta::default() }
    }

    #[test]
    fn ensemble_examples() {
        let obs = [0.1, 0.2, 0.3, 0.4, 0.5];
        let e = EnsemblePolicy::new(vec![constant(0.7), constant(-0.7)]).unwrap();
        assert_eq!(ensemble_action(&e, &obs).unwrap(), vec![0.0]);
        let e = EnsemblePolicy::new(vec![constant(1.0), constant(2.0), constant(6.0)]).unwrap();
        assert_eq!(ensemble_action(&e, &obs).unwrap(), vec![3.0]);
        assert!(matches!(EnsemblePolicy::new(vec![]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ensemble_is_order_invariant() {
        let obs = [0.3, -0.2, 0.9, 0.0, 1.0];
        let ms = [0.1, 0.2, 0.3, 1e16, -1e16];
        let a = EnsemblePolicy::new(ms.iter().map(|m| constant(*m)).collect()).unwrap();
        let b = EnsemblePolicy::new(ms.iter().rev().map(|m| constant(*m)).collect()).unwrap();
        assert_eq!(ensemble_action(&a, &obs).unwrap(), ensemble_action(&b, &obs).unwrap());
    }

    #[test]
    fn identical_peers_give_zero_regularizer() {
        let p = constant(0.4);
        let obs: Vec<f64> = (0..15).map(|i| i as f64 * 0.1).collect();
        let reg = P2PRegularizer::new(&[&p], &obs, 3, 0.05, 2).unwrap();
        let means = p.mean.forward_batch(&obs, 3).unwrap().output().to_vec();
        let (mut dm, mut ds) = (vec![0.0; 3], vec![0.0; 1]);
        assert_eq!(reg.loss_and_grad(&[0, 1, 2], &means, &p.log_std, &mut dm, &mut ds), 0.0);
    }

    #[test]
    fn p2p_validation() {
        assert!(P2PConfig { workers: 1, ..P2PConfig::desk() }.validate().is_err());
        assert!(P2PConfig { alpha: -0.1, ..P2PConfig::desk() }.validate().is_err());
    }
}
