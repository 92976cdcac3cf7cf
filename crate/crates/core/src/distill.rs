//! Multi-teacher on-policy distillation.

use std::borrow::Cow;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{DomainDistribution, DomainParams, Task};
use crate::envs::{obs_dim, Env, TaskConfig, ACT_DIM};
use crate::error::{Error, Result};
use crate::net::{kl_and_student_grads, GaussianPolicy, PolicyGrad, PolicyMeta};
use crate::ppo::{train_ppo, CurveRecord, DomainMode, PpoConfig};
use crate::seed::{Rng, Seeds};

#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub policy: GaussianPolicy,
    pub domain: DomainParams,
    pub curve: Vec<CurveRecord>,
    /// Final mean training return fell below the configured floor.
    pub below_floor: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSet {
    pub teachers: Vec<Teacher>,
    pub source_fingerprint: String,
}

impl TeacherSet {
    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn domains(&self) -> Vec<DomainParams> {
        self.teachers.iter().map(|t| t.domain.clone()).collect()
    }

    pub fn policies(&self) -> Vec<GaussianPolicy> {
        self.teachers.iter().map(|t| t.policy.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub n_teachers: usize,
    pub iterations: usize,
    pub epochs: usize,
    pub steps_per_teacher: usize,
    pub lr: f64,
    /// Teachers whose final mean return is below this are flagged.
    pub teacher_return_floor: f64,
    /// Student hidden layers; empty means the teacher architecture.
    #[serde(default)]
    pub student_hidden: Vec<usize>,
    /// Read teachers from disk one at a time instead of keeping all resident.
    #[serde(default)]
    pub sequential_teachers: bool,
    /// States per teacher in each Adam step; `None` takes one full-batch
    /// step per epoch.
    #[serde(default)]
    pub minibatch_size: Option<usize>,
}

impl DistillConfig {
    pub fn desk() -> Self {
        Self {
            n_teachers: 4,
            iterations: 20,
            epochs: 10,
            steps_per_teacher: 2400,
            lr: 1e-3,
            teacher_return_floor: 0.0,
            student_hidden: Vec::new(),
            sequential_teachers: false,
            minibatch_size: Some(64),
        }
    }

    /// Sim-to-real scale: 16 teachers.
    pub fn paper() -> Self {
        Self {
            n_teachers: 16,
            iterations: 40,
            steps_per_teacher: 8000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("distill.{f}"), m));
        if self.n_teachers == 0 {
            return bad("n_teachers", "must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.steps_per_teacher == 0 {
            return bad("steps_per_teacher", "must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be > 0");
        }
        if !self.teacher_return_floor.is_finite() {
            return bad("teacher_return_floor", "must be finite");
        }
        if self.student_hidden.contains(&0) {
            return bad("student_hidden", "layers must be non-empty");
        }
        if self.minibatch_size == Some(0) {
            return bad("minibatch_size", "must be >= 1");
        }
        Ok(())
    }
}

/// Samples `n` domains once from the stream `("teacher-domains", 0)` and
/// trains teacher `k` on domain `k` with seeds `child("teacher", k)`.
pub fn train_teachers(
    task: Task,
    task_cfg: &TaskConfig,
    dist: &DomainDistribution,
    n: usize,
    ppo_cfg: &PpoConfig,
    return_floor: f64,
    seeds: &Seeds,
) -> Result<TeacherSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("train_teachers needs n >= 1".into()));
    }
    let mut rng = seeds.rng("teacher-domains", 0);
    let domains: Vec<DomainParams> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    let teachers = domains
        .into_par_iter()
        .enumerate()
        .map(|(k, domain)| {
            let s = seeds.child("teacher", k as u64);
            let out = train_ppo(task, task_cfg, &DomainMode::Fixed(domain.clone()), ppo_cfg, &s)
                .map_err(|e| e.in_domain(k).at(format!("teacher {k}")))?;
            let final_return = out.curve.last().map_or(0.0, |r| r.mean_return);
            let below_floor = final_return < return_floor;
            if below_floor {
                log::warn!("teacher {k} final return {final_return:.2} below floor {return_floor}");
            }
            let mut policy = out.policy;
            policy.meta = PolicyMeta {
                seed: s.master(),
                task: task.name().into(),
                method: "didor".into(),
                created: format!("teacher-{k}"),
            };
            Ok(Teacher { policy, domain, curve: out.curve, below_floor })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherSet { teachers, source_fingerprint: dist.fingerprint() })
}

/// Student experience in one teacher domain.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentRollout {
    pub obs: Vec<f64>,
    pub steps: usize,
    /// Undiscounted returns of finished episodes, or the running partial
    /// return when none finished.
    pub returns: Vec<f64>,
}

/// Runs the stochastic student for exactly `steps` transitions in `domain`.
pub fn collect_in_domain(
    student: &GaussianPolicy,
    task: Task,
    task_cfg: &TaskConfig,
    domain: &DomainParams,
    steps: usize,
    rng: &mut Rng,
) -> Result<StudentRollout> {
    let od = obs_dim(task);
    if student.obs_dim() != od {
        return Err(Error::Shape { what: format!("{task} observation"), expected: od, got: student.obs_dim() });
    }
    let mut env = Env::new(task, task_cfg, domain)?;
    let mut obs = env.reset(rng);
    let mut out = StudentRollout { obs: Vec::with_capacity(steps * od), steps, returns: Vec::new() };
    let mut ep = 0.0;
    for _ in 0..steps {
        let (a, _) = student.sample(&obs, rng)?;
        let res = env.step(a[0])?;
        out.obs.extend_from_slice(&obs);
        ep += res.reward;
        if res.done {
            out.returns.push(ep);
            ep = 0.0;
            obs = env.reset(rng);
        } else {
            obs = res.obs;
        }
    }
    if out.returns.is_empty() {
        out.returns.push(ep);
    }
    Ok(out)
}

/// One rollout per teacher domain; domain `n` draws from `seeds.rng("student-env", n)`.
pub fn collect_student_rollouts(
    student: &GaussianPolicy,
    task: Task,
    task_cfg: &TaskConfig,
    domains: &[DomainParams],
    steps: usize,
    seeds: &Seeds,
) -> Result<Vec<StudentRollout>> {
    domains
        .par_iter()
        .enumerate()
        .map(|(n, d)| {
            collect_in_domain(student, task, task_cfg, d, steps, &mut seeds.rng("student-env", n as u64))
                .map_err(|e| e.in_domain(n))
        })
        .collect()
}

/// A teacher's action distribution on the states of one student rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    pub obs: Vec<f64>,
    pub n: usize,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl TeacherTargets {
    pub fn new(teacher: &GaussianPolicy, obs: &[f64]) -> Result<Self> {
        let od = teacher.obs_dim();
        if !obs.len().is_multiple_of(od) {
            return Err(Error::Shape { what: "teacher observations".into(), expected: od, got: obs.len() % od });
        }
        let n = obs.len() / od;
        let tr = teacher.mean.forward_batch(obs, n)?;
        Ok(Self { obs: obs.to_vec(), n, mean: tr.output().to_vec(), log_std: teacher.log_std.clone() })
    }

    /// Targets restricted to `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let od = self.obs.len() / self.n.max(1);
        let ad = self.log_std.len();
        Self {
            obs: rows.iter().flat_map(|&r| self.obs[r * od..(r + 1) * od].iter().copied()).collect(),
            n: rows.len(),
            mean: rows.iter().flat_map(|&r| self.mean[r * ad..(r + 1) * ad].iter().copied()).collect(),
            log_std: self.log_std.clone(),
        }
    }
}

/// Where frozen teachers are read from during distillation.
#[derive(Debug, Clone)]
pub enum TeacherSource {
    Memory(Vec<GaussianPolicy>),
    Disk(Vec<PathBuf>),
}

impl TeacherSource {
    pub fn len(&self) -> usize {
        match self {
            TeacherSource::Memory(v) => v.len(),
            TeacherSource::Disk(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, k: usize) -> Result<Cow<'_, GaussianPolicy>> {
        match self {
            TeacherSource::Memory(v) => Ok(Cow::Borrowed(&v[k])),
            TeacherSource::Disk(v) => {
                let text = std::fs::read_to_string(&v[k])?;
                GaussianPolicy::from_json(&text).map(Cow::Owned).map_err(|e| match e {
                    Error::Parse { offset, message, .. } => Error::Parse { path: v[k].clone(), offset, message },
                    other => other,
                })
            }
        }
    }
}

/// Per-state `KL(teacher ‖ student)` over every target set, pooled.
pub fn per_state_kl(student: &GaussianPolicy, targets: &[TeacherTargets]) -> Result<Vec<f64>> {
    let ad = student.act_dim();
    let mut out = Vec::new();
    for t in targets {
        let tr = student.mean.forward_batch(&t.obs, t.n)?;
        let mq = tr.output();
        for b in 0..t.n {
            let mut kl = 0.0;
            for d in 0..ad {
                kl += kl_and_student_grads(t.mean[b * ad + d], t.log_std[d], mq[b * ad + d], student.log_std[d]).0;
            }
            out.push(kl);
        }
    }
    Ok(out)
}

/// `Σ_n mean_{s∈τ_n} KL(teacher_n(s) ‖ student(s))` and its gradient
/// w.r.t. the student parameters.
pub fn distillation_loss(student: &GaussianPolicy, targets: &[TeacherTargets]) -> Result<(f64, PolicyGrad)> {
    let ad = student.act_dim();
    let mut grad = student.zero_grad();
    let mut loss = 0.0;
    for t in targets {
        if t.n == 0 {
            continue;
        }
        if t.log_std.len() != ad || t.mean.len() != t.n * ad {
            return Err(Error::Shape { what: "teacher targets".into(), expected: t.n * ad, got: t.mean.len() });
        }
        let tr = student.mean.forward_batch(&t.obs, t.n)?;
        let mq = tr.output();
        let inv_n = 1.0 / t.n as f64;
        let mut d_mean = vec![0.0; t.n * ad];
        let mut d_log_std = vec![0.0; ad];
        for b in 0..t.n {
            for d in 0..ad {
                let i = b * ad + d;
                let (kl, gm, gs) = kl_and_student_grads(t.mean[i], t.log_std[d], mq[i], student.log_std[d]);
                loss += kl * inv_n;
                d_mean[i] = gm * inv_n;
                d_log_std[d] += gs * inv_n;
            }
        }
        student.backward(&tr, &d_mean, &d_log_std, &mut grad);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub iter: usize,
    /// Loss on freshly collected states before this iteration's updates.
    pub loss_before: f64,
    pub loss_after: f64,
    /// Median pooled per-state KL before this iteration's updates.
    pub median_kl: f64,
    /// Median over domains of the student's mean collection return.
    pub student_return: f64,
    pub wall_ms: u64,
}

impl DistillRecord {
    pub fn without_timing(&self) -> Self {
        Self { wall_ms: 0, ..self.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub student: GaussianPolicy,
    pub curve: Vec<DistillRecord>,
    /// Fingerprints of the domains used at each iteration.
    pub domain_log: Vec<Vec<String>>,
}

pub fn median(xs: &[f64]) -> f64 {
    crate::eval::quantile(xs, 0.5)
}

/// Runs `cfg.iterations` rounds of {collect student rollouts in every
/// teacher domain; `cfg.epochs` full-batch Adam steps on the distillation
/// loss}. Teachers are never mutated.
pub fn distill(
    student: GaussianPolicy,
    teachers: &TeacherSource,
    domains: &[DomainParams],
    task: Task,
    task_cfg: &TaskConfig,
    cfg: &DistillConfig,
    seeds: &Seeds,
) -> Result<DistillOutput> {
    cfg.validate()?;
    if teachers.len() != domains.len() || teachers.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} teachers for {} domains",
            teachers.len(),
            domains.len()
        )));
    }
    let mut student = student;
    let mut opt = student.adam();
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut domain_log = Vec::with_capacity(cfg.iterations);
    let fps: Vec<String> = domains.iter().map(DomainParams::fingerprint).collect();
    for iter in 0..cfg.iterations {
        let start = Instant::now();
        let rollouts = collect_student_rollouts(
            &student,
            task,
            task_cfg,
            domains,
            cfg.steps_per_teacher,
            &seeds.child("distill-collect", iter as u64),
        )
        .map_err(|e| e.at(format!("distill iteration {iter}")))?;
        let mut targets = Vec::with_capacity(rollouts.len());
        for (k, r) in rollouts.iter().enumerate() {
            let teacher = teachers.get(k)?;
            if teacher.obs_dim() != student.obs_dim() || teacher.act_dim() != student.act_dim() {
                return Err(Error::Shape { what: format!("teacher {k}"), expected: student.obs_dim(), got: teacher.obs_dim() });
            }
            targets.push(TeacherTargets::new(&teacher, &r.obs)?);
        }
        let median_kl = median(&per_state_kl(&student, &targets)?);
        let (loss_before, _) = distillation_loss(&student, &targets)?;
        let mut shuffle = seeds.rng("distill-shuffle", iter as u64);
        for epoch in 0..cfg.epochs {
            let batches = match cfg.minibatch_size {
                None => vec![targets.clone()],
                Some(mb) => minibatches(&targets, mb, &mut shuffle),
            };
            for batch in &batches {
                let (loss, grad) = distillation_loss(&student, batch)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("distillation loss {loss} at iteration {iter}, epoch {epoch}")));
                }
                student
                    .adam_update(&grad, &mut opt, cfg.lr)
                    .map_err(|e| e.at(format!("distill iteration {iter}, epoch {epoch}")))?;
            }
        }
        let (loss_after, _) = distillation_loss(&student, &targets)?;
        let returns: Vec<f64> = rollouts
            .iter()
            .map(|r| r.returns.iter().sum::<f64>() / r.returns.len() as f64)
            .collect();
        let rec = DistillRecord {
            iter,
            loss_before,
            loss_after,
            median_kl,
            student_return: median(&returns),
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::debug!("distill {iter}: loss {loss_before:.4} -> {loss_after:.4}, median kl {median_kl:.4}");
        curve.push(rec);
        domain_log.push(fps.clone());
    }
    Ok(DistillOutput { student, curve, domain_log })
}

/// Splits every teacher's states into the same number of shuffled chunks
/// of at most `size` states; chunk `c` of all teachers forms minibatch `c`.
fn minibatches(targets: &[TeacherTargets], size: usize, rng: &mut Rng) -> Vec<Vec<TeacherTargets>> {
    let chunks = targets.iter().map(|t| t.n).max().unwrap_or(0).div_ceil(size).max(1);
    let perms: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| {
            let mut p: Vec<usize> = (0..t.n).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    (0..chunks)
        .map(|c| {
            targets
                .iter()
                .zip(&perms)
                .map(|(t, p)| t.subset(&p[c * p.len() / chunks..(c + 1) * p.len() / chunks]))
                .collect()
        })
        .collect()
}

/// Fresh student with the configured (or teacher) architecture.
pub fn init_student(task: Task, hidden: &[usize], seeds: &Seeds) -> GaussianPolicy {
    GaussianPolicy::new(obs_dim(task), ACT_DIM, hidden, &mut seeds.rng("init-student", 0))
}

#[derive(Debug, Clone)]
pub struct DidorOutput {
    pub teachers: TeacherSet,
    pub student: GaussianPolicy,
    pub distill_curve: Vec<DistillRecord>,
    pub domain_log: Vec<Vec<String>>,
}

/// Teacher training followed by distillation, with stage-labelled errors.
/// With `cfg.sequential_teachers`, teachers are written to
/// `teacher_dir/teacher_{k}.policy.json` and read back one at a time.
pub fn run_didor(
    task: Task,
    task_cfg: &TaskConfig,
    dist: &DomainDistribution,
    ppo_cfg: &PpoConfig,
    cfg: &DistillConfig,
    seeds: &Seeds,
    teacher_dir: Option<&std::path::Path>,
) -> Result<DidorOutput> {
    cfg.validate()?;
    let teachers = train_teachers(
        task,
        task_cfg,
        dist,
        cfg.n_teachers,
        ppo_cfg,
        cfg.teacher_return_floor,
        &seeds.child("teachers", 0),
    )
    .map_err(|e| e.at("teachers"))?;
    let hidden = if cfg.student_hidden.is_empty() { &ppo_cfg.hidden } else { &cfg.student_hidden };
    let student = init_student(task, hidden, seeds);
    let source = match (cfg.sequential_teachers, teacher_dir) {
        (true, Some(dir)) => {
            std::fs::create_dir_all(dir)?;
            let mut paths = Vec::with_capacity(teachers.len());
            for (k, t) in teachers.teachers.iter().enumerate() {
                let path = dir.join(format!("teacher_{k}.policy.json"));
                std::fs::write(&path, t.policy.to_json())?;
                paths.push(path);
            }
            TeacherSource::Disk(paths)
        }
        (true, None) => {
            return Err(Error::config("distill.sequential_teachers", "needs a directory for teacher files"))
        }
        (false, _) => TeacherSource::Memory(teachers.policies()),
    };
    let out = distill(
        student,
        &source,
        &teachers.domains(),
        task,
        task_cfg,
        cfg,
        &seeds.child("distill", 0),
    )
    .map_err(|e| e.at("distill"))?;
    let mut student = out.student;
    student.meta = PolicyMeta {
        seed: seeds.master(),
        task: task.name().into(),
        method: "didor".into(),
        created: "student".into(),
    };
    Ok(DidorOutput { teachers, student, distill_curve: out.curve, domain_log: out.domain_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Mlp;

    fn constant_policy(mean: f64, log_std: f64) -> GaussianPolicy {
        let mut mlp = Mlp::zeros(&[5, 3, 1]);
        mlp.layer_mut(1).1[0] = mean;
        GaussianPolicy { mean: mlp, log_std: vec![log_std], meta: PolicyMeta::default() }
    }

    fn obs(n: usize) -> Vec<f64> {
        (0..n * 5).map(|i| (i as f64 * 0.37).sin()).collect()
    }

    #[test]
    fn toy_closed_form() {
        let teacher = constant_policy(1.0, 0.0);
        let student = constant_policy(0.0, 0.0);
        let t = TeacherTargets::new(&teacher, &obs(7)).unwrap();
        let (loss, _) = distillation_loss(&student, std::slice::from_ref(&t)).unwrap();
        assert!((loss - 0.5).abs() < 1e-15);
        assert!(per_state_kl(&student, &[t]).unwrap().iter().all(|k| (k - 0.5).abs() < 1e-15));
    }

    #[test]
    fn copy_of_teacher_has_zero_loss() {
        let mut rng = Seeds::new(1).rng("t", 0);
        let teacher = GaussianPolicy::new(5, 1, &[8], &mut rng);
        let t = TeacherTargets::new(&teacher, &obs(11)).unwrap();
        let (loss, _) = distillation_loss(&teacher, &[t]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn identical_teachers_scale_linearly() {
        let teacher = constant_policy(0.3, -0.2);
        let student = constant_policy(-0.1, 0.4);
        let t = TeacherTargets::new(&teacher, &obs(5)).unwrap();
        let (one, _) = distillation_loss(&student, std::slice::from_ref(&t)).unwrap();
        let (three, _) = distillation_loss(&student, &[t.clone(), t.clone(), t]).unwrap();
        assert!((three - 3.0 * one).abs() < 1e-14);
    }

    #[test]
    fn zero_iterations_leave_student() {
        let task = Task::Cartpole;
        let seeds = Seeds::new(3);
        let student = init_student(task, &[8], &seeds);
        let teacher = init_student(task, &[8], &Seeds::new(4));
        let cfg = DistillConfig { iterations: 0, ..DistillConfig::desk() };
        let d = DomainDistribution::builtin(task).nominal();
        let out = distill(student.clone(), &TeacherSource::Memory(vec![teacher]), &[d], task, &TaskConfig::desk(task), &cfg, &seeds).unwrap();
        assert_eq!(out.student, student);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn rollouts_have_exact_length() {
        let task = Task::Furuta;
        let seeds = Seeds::new(5);
        let student = init_student(task, &[8], &seeds);
        let d = DomainDistribution::builtin(task).nominal();
        let rs = collect_student_rollouts(&student, task, &TaskConfig::desk(task), &[d.clone(), d], 700, &seeds).unwrap();
        assert_eq!(rs.len(), 2);
        assert!(rs.iter().all(|r| r.steps == 700 && r.obs.len() == 700 * 6));
    }

    #[test]
    fn config_validation_names_field() {
        let err = DistillConfig { epochs: 0, ..DistillConfig::desk() }.validate().unwrap_err();
        assert!(err.to_string().contains("distill.epochs"));
        let err = DistillConfig { minibatch_size: Some(0), ..DistillConfig::desk() }.validate().unwrap_err();
        assert!(err.to_string().contains("distill.minibatch_size"));
    }

    #[test]
    fn minibatches_partition_every_teacher() {
        let teacher = constant_policy(0.2, 0.1);
        let targets = vec![
            TeacherTargets::new(&teacher, &obs(10)).unwrap(),
            TeacherTargets::new(&teacher, &obs(7)).unwrap(),
        ];
        let batches = minibatches(&targets, 4, &mut Seeds::new(6).rng("mb", 0));
        assert_eq!(batches.len(), 3);
        for (k, t) in targets.iter().enumerate() {
            let mut seen: Vec<f64> = batches.iter().flat_map(|b| b[k].obs.chunks(5).map(|r| r[0])).collect();
            assert!(batches.iter().all(|b| b[k].n <= 4));
            let mut all: Vec<f64> = t.obs.chunks(5).map(|r| r[0]).collect();
            seen.sort_by(f64::total_cmp);
            all.sort_by(f64::total_cmp);
            assert_eq!(seen, all);
        }
    }
}
