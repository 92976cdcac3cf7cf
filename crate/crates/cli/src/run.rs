//! Experiment orchestration: training dispatch, bundle evaluation.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use didor_core::baselines::{train_p2pdrl, train_udr, EnsemblePolicy};
use didor_core::distill::{run_didor, train_teachers, DistillRecord, TeacherSet};
use didor_core::domain::{DomainParams, Task};
use didor_core::eval::{evaluate_matched, summarize, unseen_domains, Actor, EvalReport, SummaryStats};
use didor_core::net::GaussianPolicy;
use didor_core::ppo::CurveRecord;
use didor_core::seed::Seeds;
use didor_core::{Error, Result};

use crate::config::{ExperimentConfig, Method};
use crate::store::{unix_now, Bundle, Manifest};

pub const CONFIG_FILE: &str = "config.json";
pub const DOMAINS_FILE: &str = "domains.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherDomain {
    pub index: usize,
    pub fingerprint: String,
    pub below_floor: bool,
    pub params: DomainParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainsDoc {
    pub source_fingerprint: String,
    pub teachers: Vec<TeacherDomain>,
}

impl DomainsDoc {
    pub fn from_teachers(set: &TeacherSet) -> Self {
        Self {
            source_fingerprint: set.source_fingerprint.clone(),
            teachers: set
                .teachers
                .iter()
                .enumerate()
                .map(|(index, t)| TeacherDomain {
                    index,
                    fingerprint: t.domain.fingerprint(),
                    below_floor: t.below_floor,
                    params: t.domain.clone(),
                })
                .collect(),
        }
    }

    pub fn domains(&self) -> Vec<DomainParams> {
        self.teachers.iter().map(|t| t.params.clone()).collect()
    }
}

/// Stage streams derived from the master seed.
pub struct StageSeeds {
    pub master: Seeds,
}

impl StageSeeds {
    pub fn new(master_seed: u64) -> Self {
        Self { master: Seeds::new(master_seed) }
    }

    pub fn teachers(&self) -> Seeds {
        self.master.child("teachers", 0)
    }

    pub fn distill(&self) -> Seeds {
        self.master.child("distill", 0)
    }

    pub fn udr(&self) -> Seeds {
        self.master.child("udr", 0)
    }

    pub fn p2pdrl(&self) -> Seeds {
        self.master.child("p2pdrl", 0)
    }

    pub fn teacher_panel(&self) -> Seeds {
        self.master.child("eval-teacher-panel", 0)
    }

    pub fn unseen(&self) -> Seeds {
        self.master.child("eval-unseen", 0)
    }

    /// Every stage's derived master seed, for the manifest.
    pub fn log(&self, n_teachers: usize, workers: usize) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        m.insert("master".into(), self.master.master());
        m.insert("teachers".into(), self.teachers().master());
        for k in 0..n_teachers {
            m.insert(format!("teacher-{k}"), self.teachers().child("teacher", k as u64).master());
        }
        m.insert("distill".into(), self.distill().master());
        m.insert("udr".into(), self.udr().master());
        m.insert("p2pdrl".into(), self.p2pdrl().master());
        for w in 0..workers {
            m.insert(format!("p2pdrl-worker-{w}"), self.p2pdrl().child("worker", w as u64).master());
        }
        m.insert("eval-teacher-panel".into(), self.teacher_panel().master());
        m.insert("eval-unseen".into(), self.unseen().master());
        m
    }
}

fn strip_ppo(curve: &[CurveRecord], keep: bool) -> Vec<CurveRecord> {
    curve.iter().map(|r| if keep { r.clone() } else { r.without_timing() }).collect()
}

fn strip_distill(curve: &[DistillRecord], keep: bool) -> Vec<DistillRecord> {
    curve.iter().map(|r| if keep { r.clone() } else { r.without_timing() }).collect()
}

fn put_teachers(bundle: &mut Bundle, set: &TeacherSet, keep_ms: bool) -> Result<()> {
    bundle.put_json(DOMAINS_FILE, &DomainsDoc::from_teachers(set))?;
    for (k, t) in set.teachers.iter().enumerate() {
        bundle.put_policy(&format!("teacher_{k}.policy.json"), &t.policy)?;
        bundle.put_jsonl(&format!("teacher_{k}.curve.jsonl"), &strip_ppo(&t.curve, keep_ms))?;
    }
    Ok(())
}

/// Trains the configured method and writes a complete bundle to `out`.
/// A failure leaves the manifest with `complete = false`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Bundle> {
    cfg.validate()?;
    let seeds = StageSeeds::new(cfg.master_seed);
    let manifest = Manifest {
        method: cfg.method.name().into(),
        task: cfg.task.name().into(),
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        master_seed: cfg.master_seed,
        stage_seeds: seeds.log(cfg.distill.n_teachers, cfg.p2p.workers),
        artifacts: Vec::new(),
        complete: false,
        started_unix: unix_now(),
        finished_unix: None,
        timings: BTreeMap::new(),
    };
    let mut bundle = Bundle::create(out, manifest)?;
    bundle.put(CONFIG_FILE, format!("{}\n", cfg.to_json()).as_bytes())?;
    let dist = cfg.domain_distribution()?;
    let keep = cfg.record_wall_ms;
    let start = Instant::now();
    match cfg.method {
        Method::Didor => {
            let teacher_dir = bundle.dir.join("teachers.tmp");
            let res = run_didor(cfg.task, &cfg.env, &dist, &cfg.ppo, &cfg.distill, &seeds.master, Some(&teacher_dir))?;
            if teacher_dir.exists() {
                std::fs::remove_dir_all(&teacher_dir)?;
            }
            put_teachers(&mut bundle, &res.teachers, keep)?;
            bundle.put_policy("student.policy.json", &res.student)?;
            bundle.put_jsonl("distill.curve.jsonl", &strip_distill(&res.distill_curve, keep))?;
            bundle.put_jsonl("distill.domains.jsonl", &res.domain_log)?;
        }
        Method::Ensemble => {
            let set = train_teachers(
                cfg.task,
                &cfg.env,
                &dist,
                cfg.distill.n_teachers,
                &cfg.ppo,
                cfg.distill.teacher_return_floor,
                &seeds.teachers(),
            )
            .map_err(|e| e.at("teachers"))?;
            put_teachers(&mut bundle, &set, keep)?;
        }
        Method::Udr => {
            let total = cfg.distill.n_teachers * cfg.ppo.iterations;
            let res = train_udr(cfg.task, &cfg.env, &dist, total, &cfg.ppo, &seeds.udr()).map_err(|e| e.at("udr"))?;
            bundle.put_policy("udr.policy.json", &res.policy)?;
            bundle.put_jsonl("udr.curve.jsonl", &strip_ppo(&res.curve, keep))?;
            bundle.put_jsonl("udr.domains.jsonl", &res.domain_log)?;
        }
        Method::P2pdrl => {
            let res = train_p2pdrl(cfg.task, &cfg.env, &dist, &cfg.p2p, &cfg.ppo, &seeds.p2pdrl()).map_err(|e| e.at("p2pdrl"))?;
            bundle.put_policy("p2pdrl.policy.json", &res.policy)?;
            for (w, c) in res.curves.iter().enumerate() {
                bundle.put_jsonl(&format!("worker_{w}.curve.jsonl"), &strip_ppo(c, keep))?;
                bundle.put_jsonl(&format!("worker_{w}.domains.jsonl"), &res.domain_logs[w])?;
            }
        }
    }
    bundle.manifest.timings.insert("train".into(), start.elapsed().as_secs_f64());
    bundle.finish()?;
    Ok(bundle)
}

/// Teacher-domain set for a bundle: the frozen teacher domains when the
/// bundle has them, otherwise the same draw the teachers would have used.
pub fn teacher_domains(bundle: &Bundle, cfg: &ExperimentConfig) -> Result<Vec<DomainParams>> {
    if bundle.manifest.artifacts.iter().any(|a| a.path == DOMAINS_FILE) {
        let doc: DomainsDoc = serde_json::from_slice(&bundle.read_verified(DOMAINS_FILE)?)?;
        return Ok(doc.domains());
    }
    let dist = cfg.domain_distribution()?;
    let mut rng = StageSeeds::new(cfg.master_seed).teachers().rng("teacher-domains", 0);
    Ok((0..cfg.distill.n_teachers).map(|_| dist.sample(&mut rng)).collect())
}

pub fn bundle_config(bundle: &Bundle) -> Result<ExperimentConfig> {
    let bytes = bundle.read_verified(CONFIG_FILE)?;
    ExperimentConfig::from_json(&String::from_utf8_lossy(&bytes), None, None)
}

enum Evaluated {
    Single(GaussianPolicy),
    Ensemble(EnsemblePolicy),
}

impl Evaluated {
    fn actor(&self) -> &dyn Actor {
        match self {
            Evaluated::Single(p) => p,
            Evaluated::Ensemble(e) => e,
        }
    }
}

fn load_teachers(bundle: &Bundle, n: usize) -> Result<Vec<GaussianPolicy>> {
    (0..n).map(|k| bundle.load_policy(&format!("teacher_{k}.policy.json"))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub reports: BTreeMap<String, SummaryStats>,
}

/// Evaluates the bundle's output policy on the teacher and unseen panels
/// (plus every teacher on its own domain when teachers exist) and stores
/// the reports under `eval/`.
pub fn evaluate_bundle(bundle: &mut Bundle) -> Result<Vec<(String, EvalReport)>> {
    let cfg = bundle_config(bundle)?;
    let seeds = StageSeeds::new(cfg.master_seed);
    let method = cfg.method.name();
    let n = cfg.distill.n_teachers;
    let policy = match cfg.method {
        Method::Didor => Evaluated::Single(bundle.load_policy("student.policy.json")?),
        Method::Ensemble => Evaluated::Ensemble(EnsemblePolicy::new(load_teachers(bundle, n)?)?),
        Method::Udr => Evaluated::Single(bundle.load_policy("udr.policy.json")?),
        Method::P2pdrl => Evaluated::Single(bundle.load_policy("p2pdrl.policy.json")?),
    };
    let tdoms = teacher_domains(bundle, &cfg)?;
    let dist = cfg.domain_distribution()?;
    let udoms = unseen_domains(&dist, cfg.eval.test_scale, cfg.eval.unseen_domains, &seeds.unseen())?;
    let start = Instant::now();
    let mut reports = vec![
        (
            format!("eval/{method}.teacher.report.json"),
            evaluate_matched(&[policy.actor()], method, cfg.master_seed, cfg.task, &cfg.env, &tdoms, "teacher", 1.0, cfg.eval.teacher_rollouts, &seeds.teacher_panel())?,
        ),
        (
            format!("eval/{method}.unseen.report.json"),
            evaluate_matched(&[policy.actor()], method, cfg.master_seed, cfg.task, &cfg.env, &udoms, "unseen", cfg.eval.test_scale, cfg.eval.unseen_rollouts, &seeds.unseen())?,
        ),
    ];
    if matches!(cfg.method, Method::Didor | Method::Ensemble) {
        let teachers = load_teachers(bundle, n)?;
        let actors: Vec<&dyn Actor> = teachers.iter().map(|t| t as &dyn Actor).collect();
        reports.push((
            "eval/teacher.own.report.json".into(),
            evaluate_matched(&actors, "teacher", cfg.master_seed, cfg.task, &cfg.env, &tdoms, "own", 1.0, cfg.eval.teacher_rollouts, &seeds.teacher_panel())?,
        ));
    }
    let mut summary = EvalSummary { reports: BTreeMap::new() };
    for (name, r) in &reports {
        bundle.put_json(name, r)?;
        summary.reports.insert(name.clone(), summarize(r)?);
    }
    bundle.put_json("eval/summary.json", &summary)?;
    bundle.manifest.timings.insert("eval".into(), start.elapsed().as_secs_f64());
    bundle.write_manifest()?;
    Ok(reports)
}

/// Task of a bundle, read from its manifest.
pub fn bundle_task(bundle: &Bundle) -> Result<Task> {
    serde_json::from_value(serde_json::Value::String(bundle.manifest.task.clone()))
        .map_err(|e| Error::config("manifest.task", e.to_string()))
}
