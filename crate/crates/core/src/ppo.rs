//! On-policy PPO trainer with GAE and KL-based early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{DomainDistribution, DomainParams, Task};
use crate::envs::{obs_dim, Env, TaskConfig, ACT_DIM};
use crate::error::{Error, Result};
use crate::net::{gaussian_entropy, log_prob_with_log_std, Adam, GaussianPolicy, PolicyGrad, ValueNet};
use crate::seed::{Rng, Seeds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lam: f64,
    pub clip: f64,
    pub kl_stop: f64,
    pub lr: f64,
    pub n_envs: usize,
    pub steps_per_env: usize,
    pub iterations: usize,
    pub update_epochs: usize,
    pub minibatch_size: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub hidden: Vec<usize>,
}

impl PpoConfig {
    pub fn desk() -> Self {
        Self {
            gamma: 0.99,
            lam: 0.97,
            clip: 0.1,
            kl_stop: 0.05,
            lr: 1e-3,
            n_envs: 8,
            steps_per_env: 1200,
            iterations: 40,
            update_epochs: 10,
            minibatch_size: 512,
            value_coef: 0.5,
            entropy_coef: 0.0,
            hidden: vec![64, 64],
        }
    }

    /// Sim-to-real hyper-parameters: 48 envs × 8000 steps, lr 1e-3.
    pub fn paper() -> Self {
        Self {
            n_envs: 48,
            steps_per_env: 8000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("ppo.{f}"), m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lam) {
            return bad("lam", "must be in [0, 1]");
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return bad("clip", "must be > 0");
        }
        if !(self.kl_stop.is_finite() && self.kl_stop > 0.0) {
            return bad("kl_stop", "must be > 0");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be > 0");
        }
        if self.n_envs == 0 {
            return bad("n_envs", "must be >= 1");
        }
        if self.steps_per_env == 0 {
            return bad("steps_per_env", "must be >= 1");
        }
        if self.update_epochs == 0 {
            return bad("update_epochs", "must be >= 1");
        }
        if self.minibatch_size == 0 {
            return bad("minibatch_size", "must be >= 1");
        }
        if !(self.value_coef.is_finite() && self.value_coef >= 0.0) {
            return bad("value_coef", "must be >= 0");
        }
        if !self.entropy_coef.is_finite() {
            return bad("entropy_coef", "must be finite");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden", "needs at least one non-empty layer");
        }
        Ok(())
    }
}

/// One contiguous piece of experience from a single environment. It ends
/// either at episode termination (`done` on the last step) or because
/// collection stopped or the episode hit its time limit, in which case
/// `bootstrap` holds the value estimate of the following state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub bootstrap: f64,
    pub domain: usize,
}

impl Trajectory {
    fn new(domain: usize) -> Self {
        Self {
            obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            log_probs: Vec::new(),
            values: Vec::new(),
            dones: Vec::new(),
            bootstrap: 0.0,
            domain,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Normalized to zero mean and unit (population) std.
    pub advantages: Vec<f64>,
    /// Unnormalized `A + V` regression targets.
    pub returns: Vec<f64>,
    pub domain_ids: Vec<usize>,
    /// Undiscounted returns of episodes that finished during collection.
    pub episode_returns: Vec<f64>,
    /// Undiscounted partial returns of episodes cut off by the collection end.
    pub partial_returns: Vec<f64>,
    pub trajectories: usize,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    /// Mean over finished episodes, falling back to partial episodes.
    pub fn mean_return(&self) -> f64 {
        let src = if self.episode_returns.is_empty() {
            &self.partial_returns
        } else {
            &self.episode_returns
        };
        if src.is_empty() {
            0.0
        } else {
            src.iter().sum::<f64>() / src.len() as f64
        }
    }
}

/// GAE over one trajectory:
/// `δ_t = r_t + γ v_{t+1} (1 − d_t) − v_t`, `A_t = δ_t + γλ (1 − d_t) A_{t+1}`,
/// with `v_T = bootstrap`. Returns `(advantages, advantages + values)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "GAE inputs must have equal length");
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lam * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// In-place standardization; leaves an all-equal vector at zero.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in xs.iter_mut() {
        *x = if std > 1e-12 { (*x - mean) / std } else { 0.0 };
    }
}

/// Runs one environment for `steps` transitions, resetting after every
/// episode, and splits the stream into trajectories.
fn run_env(
    policy: &GaussianPolicy,
    value: &ValueNet,
    task: Task,
    task_cfg: &TaskConfig,
    domain: &DomainParams,
    domain_id: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<(Vec<Trajectory>, Vec<f64>, f64)> {
    let mut env = Env::new(task, task_cfg, domain)?;
    let mut obs = env.reset(rng);
    let mut trajs = Vec::new();
    let mut cur = Trajectory::new(domain_id);
    let mut finished = Vec::new();
    let mut ep_return = 0.0;
    for step in 0..steps {
        let v = value.value(&obs)?;
        let (action, lp) = policy.sample(&obs, rng)?;
        let res = env.step(action[0])?;
        cur.obs.extend_from_slice(&obs);
        cur.actions.extend_from_slice(&action);
        cur.rewards.push(res.reward);
        cur.log_probs.push(lp);
        cur.values.push(v);
        cur.dones.push(res.out_of_bounds);
        ep_return += res.reward;
        let last = step + 1 == steps;
        if res.done || last {
            cur.bootstrap = if res.out_of_bounds { 0.0 } else { value.value(&res.obs)? };
            trajs.push(std::mem::replace(&mut cur, Trajectory::new(domain_id)));
        }
        if res.done {
            finished.push(ep_return);
            ep_return = 0.0;
            obs = env.reset(rng);
        } else {
            obs = res.obs;
        }
    }
    Ok((trajs, finished, ep_return))
}

/// Collects `cfg.steps_per_env` transitions from each of `cfg.n_envs`
/// environments; environment `i` runs in `domains[i % domains.len()]` and
/// draws from the stream `seeds.rng("env", i)`. Results are merged in
/// environment order.
pub fn collect_rollouts(
    policy: &GaussianPolicy,
    value: &ValueNet,
    task: Task,
    task_cfg: &TaskConfig,
    domains: &[DomainParams],
    cfg: &PpoConfig,
    seeds: &Seeds,
) -> Result<RolloutBatch> {
    if domains.is_empty() {
        return Err(Error::InvalidArgument("collect_rollouts needs at least one domain".into()));
    }
    let od = obs_dim(task);
    if policy.obs_dim() != od || value.net.input_dim() != od {
        return Err(Error::Shape {
            what: format!("{task} observation"),
            expected: od,
            got: policy.obs_dim(),
        });
    }
    let per_env: Vec<_> = (0..cfg.n_envs)
        .into_par_iter()
        .map(|i| {
            let d = i % domains.len();
            let mut rng = seeds.rng("env", i as u64);
            run_env(policy, value, task, task_cfg, &domains[d], d, cfg.steps_per_env, &mut rng)
                .map_err(|e| e.in_domain(d))
        })
        .collect();

    let mut batch = RolloutBatch {
        obs_dim: od,
        act_dim: policy.act_dim(),
        obs: Vec::new(),
        actions: Vec::new(),
        log_probs: Vec::new(),
        values: Vec::new(),
        rewards: Vec::new(),
        dones: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
        domain_ids: Vec::new(),
        episode_returns: Vec::new(),
        partial_returns: Vec::new(),
        trajectories: 0,
    };
    for res in per_env {
        let (trajs, finished, partial) = res?;
        batch.episode_returns.extend(finished);
        if trajs.last().is_some_and(|t| !t.dones.last().copied().unwrap_or(false)) && partial > 0.0 {
            batch.partial_returns.push(partial);
        }
        for t in trajs {
            let (adv, ret) = compute_gae(&t.rewards, &t.values, &t.dones, t.bootstrap, cfg.gamma, cfg.lam);
            batch.obs.extend(t.obs);
            batch.actions.extend(t.actions);
            batch.log_probs.extend(&t.log_probs);
            batch.values.extend(&t.values);
            batch.rewards.extend(&t.rewards);
            batch.dones.extend(&t.dones);
            batch.domain_ids.extend(std::iter::repeat_n(t.domain, t.rewards.len()));
            batch.advantages.extend(adv);
            batch.returns.extend(ret);
            batch.trajectories += 1;
        }
    }
    normalize(&mut batch.advantages);
    Ok(batch)
}

/// `min(ρA, clip(ρ, 1−ε, 1+ε)·A)`.
pub fn clipped_objective(ratio: f64, adv: f64, clip: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv)
}

/// Additional policy loss term evaluated on minibatches (used by the
/// peer-to-peer baseline). `rows` index into the rollout batch; `means`
/// holds the current policy means for those rows. Returns the loss and
/// accumulates its gradient into `d_mean` / `d_log_std`.
pub trait PolicyRegularizer: Sync {
    fn loss_and_grad(
        &self,
        rows: &[usize],
        means: &[f64],
        log_std: &[f64],
        d_mean: &mut [f64],
        d_log_std: &mut [f64],
    ) -> f64;
}

/// Clipped-surrogate loss `−mean(min(ρA, clip(ρ)A))` for a minibatch and its
/// gradient w.r.t. the policy means and `log_std`.
pub fn surrogate_loss_and_grad(
    means: &[f64],
    log_std: &[f64],
    actions: &[f64],
    old_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let ad = log_std.len();
    let n = old_log_probs.len();
    let inv_n = 1.0 / n as f64;
    let inv_var: Vec<f64> = log_std.iter().map(|l| (-2.0 * l).exp()).collect();
    let mut d_mean = vec![0.0; n * ad];
    let mut d_log_std = vec![0.0; ad];
    let mut loss = 0.0;
    for b in 0..n {
        let mu = &means[b * ad..(b + 1) * ad];
        let a = &actions[b * ad..(b + 1) * ad];
        let lp = log_prob_with_log_std(mu, log_std, a);
        let ratio = (lp - old_log_probs[b]).exp();
        let adv = advantages[b];
        loss -= clipped_objective(ratio, adv, clip) * inv_n;
        let unclipped_active = ratio * adv <= ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        if unclipped_active {
            // ∂loss/∂logπ = −A ρ / n
            let g = -adv * ratio * inv_n;
            for d in 0..ad {
                let diff = a[d] - mu[d];
                d_mean[b * ad + d] += g * diff * inv_var[d];
                d_log_std[d] += g * (diff * diff * inv_var[d] - 1.0);
            }
        }
    }
    (loss, d_mean, d_log_std)
}

/// Squared-error value loss `coef · mean((v − R)²)` and its gradient w.r.t. `v`.
pub fn value_loss_and_grad(values: &[f64], targets: &[f64], coef: f64) -> (f64, Vec<f64>) {
    let inv_n = 1.0 / values.len() as f64;
    let mut loss = 0.0;
    let grad = values
        .iter()
        .zip(targets)
        .map(|(v, r)| {
            let e = v - r;
            loss += coef * e * e * inv_n;
            2.0 * coef * e * inv_n
        })
        .collect();
    (loss, grad)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub entropy: f64,
    pub epochs: usize,
    /// Approximate KL after each completed epoch.
    pub kl_per_epoch: Vec<f64>,
}

fn gather(src: &[f64], width: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

/// Mean of `logπ_old − logπ_new` over the whole batch.
pub fn approx_kl(policy: &GaussianPolicy, batch: &RolloutBatch) -> Result<f64> {
    let n = batch.len();
    let tr = policy.mean.forward_batch(&batch.obs, n)?;
    let ad = batch.act_dim;
    let mut s = 0.0;
    for b in 0..n {
        let lp = log_prob_with_log_std(
            &tr.output()[b * ad..(b + 1) * ad],
            &policy.log_std,
            &batch.actions[b * ad..(b + 1) * ad],
        );
        s += batch.log_probs[b] - lp;
    }
    Ok(s / n as f64)
}

/// The mutable state of one PPO learner.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: GaussianPolicy,
    pub value: ValueNet,
    pub policy_opt: Adam,
    pub value_opt: Adam,
}

impl Learner {
    pub fn new(task: Task, hidden: &[usize], seeds: &Seeds) -> Self {
        let od = obs_dim(task);
        let policy = GaussianPolicy::new(od, ACT_DIM, hidden, &mut seeds.rng("init-policy", 0));
        let value = ValueNet::new(od, hidden, &mut seeds.rng("init-value", 0));
        Self {
            policy_opt: policy.adam(),
            value_opt: value.adam(),
            policy,
            value,
        }
    }
}

/// Clipped PPO update with early stopping once the batch KL exceeds
/// `cfg.kl_stop`. On a non-finite loss the learner is restored to its
/// state before the call and the error carries the diagnostics so far.
pub fn ppo_update(
    learner: &mut Learner,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    regularizer: Option<&dyn PolicyRegularizer>,
    rng: &mut Rng,
) -> Result<UpdateDiagnostics> {
    let snapshot = learner.clone();
    let res = ppo_epochs(learner, batch, cfg, regularizer, rng);
    if res.is_err() {
        *learner = snapshot;
    }
    res
}

fn ppo_epochs(
    learner: &mut Learner,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    regularizer: Option<&dyn PolicyRegularizer>,
    rng: &mut Rng,
) -> Result<UpdateDiagnostics> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty rollout batch".into()));
    }
    let (od, ad) = (batch.obs_dim, batch.act_dim);
    let mut diag = UpdateDiagnostics::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.update_epochs {
        order.shuffle(rng);
        let (mut pl_sum, mut vl_sum, mut count) = (0.0, 0.0, 0usize);
        for rows in order.chunks(cfg.minibatch_size) {
            let obs = gather(&batch.obs, od, rows);
            let acts = gather(&batch.actions, ad, rows);
            let old_lp = gather(&batch.log_probs, 1, rows);
            let adv = gather(&batch.advantages, 1, rows);
            let ret = gather(&batch.returns, 1, rows);
            let m = rows.len();

            let policy = &mut learner.policy;
            let tr = policy.mean.forward_batch(&obs, m)?;
            let (mut pl, mut d_mean, mut d_log_std) =
                surrogate_loss_and_grad(tr.output(), &policy.log_std, &acts, &old_lp, &adv, cfg.clip);
            if cfg.entropy_coef != 0.0 {
                pl -= cfg.entropy_coef * gaussian_entropy(&policy.std());
                d_log_std.iter_mut().for_each(|g| *g -= cfg.entropy_coef);
            }
            if let Some(reg) = regularizer {
                pl += reg.loss_and_grad(rows, tr.output(), &policy.log_std, &mut d_mean, &mut d_log_std);
            }
            if !pl.is_finite() {
                return Err(Error::NonFinite(format!(
                    "policy loss {pl} at epoch {epoch}; diagnostics so far {diag:?}"
                )));
            }
            let mut grad: PolicyGrad = policy.zero_grad();
            policy.backward(&tr, &d_mean, &d_log_std, &mut grad);
            policy.adam_update(&grad, &mut learner.policy_opt, cfg.lr)?;

            let vtr = learner.value.net.forward_batch(&obs, m)?;
            let (vl, dv) = value_loss_and_grad(vtr.output(), &ret, cfg.value_coef);
            if !vl.is_finite() {
                return Err(Error::NonFinite(format!(
                    "value loss {vl} at epoch {epoch}; diagnostics so far {diag:?}"
                )));
            }
            let mut vgrad = vec![0.0; learner.value.net.params().len()];
            learner.value.net.backward(&vtr, &dv, &mut vgrad);
            learner.value.adam_update(&vgrad, &mut learner.value_opt, cfg.lr)?;

            pl_sum += pl * m as f64;
            vl_sum += vl * m as f64;
            count += m;
        }
        let kl = approx_kl(&learner.policy, batch)?;
        diag.policy_loss = pl_sum / count as f64;
        diag.value_loss = vl_sum / count as f64;
        diag.kl = kl;
        diag.kl_per_epoch.push(kl);
        diag.epochs = epoch + 1;
        if kl > cfg.kl_stop {
            break;
        }
    }
    diag.entropy = gaussian_entropy(&learner.policy.std());
    Ok(diag)
}

/// One line of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iter: usize,
    pub mean_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub entropy: f64,
    pub wall_ms: u64,
}

impl CurveRecord {
    /// Same record with the wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self { wall_ms: 0, ..self.clone() }
    }
}

/// Where training domains come from.
#[derive(Debug, Clone)]
pub enum DomainMode {
    /// One frozen domain for every environment and iteration.
    Fixed(DomainParams),
    /// Fresh domain per environment per iteration.
    PerEnv(DomainDistribution),
    /// One fresh domain per iteration shared by all environments.
    PerIteration(DomainDistribution),
}

impl DomainMode {
    /// Domains for iteration `iter`, drawn from the stream `("domains", iter)`.
    pub fn domains(&self, iter: usize, n_envs: usize, seeds: &Seeds) -> Vec<DomainParams> {
        match self {
            DomainMode::Fixed(p) => vec![p.clone()],
            DomainMode::PerEnv(d) => {
                let mut rng = seeds.rng("domains", iter as u64);
                (0..n_envs).map(|_| d.sample(&mut rng)).collect()
            }
            DomainMode::PerIteration(d) => vec![d.sample(&mut seeds.rng("domains", iter as u64))],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: GaussianPolicy,
    pub value: ValueNet,
    pub curve: Vec<CurveRecord>,
    /// Fingerprints of the domains used at each iteration.
    pub domain_log: Vec<Vec<String>>,
}

/// One collect-and-update round for `learner`.
pub fn ppo_iteration(
    learner: &mut Learner,
    task: Task,
    task_cfg: &TaskConfig,
    domains: &[DomainParams],
    cfg: &PpoConfig,
    iter: usize,
    seeds: &Seeds,
    regularizer: Option<&dyn Fn(&RolloutBatch) -> Box<dyn PolicyRegularizer>>,
) -> Result<CurveRecord> {
    let start = Instant::now();
    let batch = collect_rollouts(
        &learner.policy,
        &learner.value,
        task,
        task_cfg,
        domains,
        cfg,
        &seeds.child("collect", iter as u64),
    )?;
    let reg = regularizer.map(|f| f(&batch));
    let diag = ppo_update(learner, &batch, cfg, reg.as_deref(), &mut seeds.rng("shuffle", iter as u64))?;
    Ok(CurveRecord {
        iter,
        mean_return: batch.mean_return(),
        policy_loss: diag.policy_loss,
        value_loss: diag.value_loss,
        kl: diag.kl,
        entropy: diag.entropy,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Trains a fresh policy/value pair for `cfg.iterations` iterations.
pub fn train_ppo(
    task: Task,
    task_cfg: &TaskConfig,
    mode: &DomainMode,
    cfg: &PpoConfig,
    seeds: &Seeds,
) -> Result<TrainOutput> {
    cfg.validate()?;
    task_cfg.validate()?;
    let mut learner = Learner::new(task, &cfg.hidden, seeds);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut domain_log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let domains = mode.domains(iter, cfg.n_envs, seeds);
        let rec = ppo_iteration(&mut learner, task, task_cfg, &domains, cfg, iter, seeds, None)
            .map_err(|e| e.at(format!("iteration {iter}")))?;
        log::debug!("iter {iter}: mean return {:.2}, kl {:.4}", rec.mean_return, rec.kl);
        curve.push(rec);
        domain_log.push(domains.iter().map(DomainParams::fingerprint).collect());
    }
    Ok(TrainOutput {
        policy: learner.policy,
        value: learner.value,
        curve,
        domain_log,
    })
}
