//! Cart-pole and Furuta-pendulum swing-up simulators.
//!
//! Angles of the pendulum are measured from the hanging-down equilibrium,
//! so the upright target sits at `|θ| = π`. Both tasks take a scalar motor
//! voltage as action and are integrated with classical RK4.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{DomainParams, Task};
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Largest cost fed to `exp(-cost)`; keeps the reward strictly positive.
const MAX_COST: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartState {
    /// Pendulum hanging down (swing-up task).
    Hanging,
    /// Pendulum upright (balancing variant).
    Upright,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub dt: f64,
    pub max_steps: usize,
    /// Voltage limit; actions are clamped to `±action_limit`.
    pub action_limit: f64,
    /// Diagonal weights on `(q0, wrapped angle error, q0_dot, angle_dot)`.
    pub q: [f64; 4],
    pub r: f64,
    pub init_noise_std: f64,
    pub start: StartState,
}

impl TaskConfig {
    /// 100 Hz, 6 s episodes.
    pub fn desk(task: Task) -> Self {
        Self {
            dt: 0.01,
            max_steps: 600,
            action_limit: match task {
                Task::Cartpole => 8.0,
                Task::Furuta => 4.0,
            },
            q: [0.2, 0.2, 0.02, 0.02],
            r: 0.003,
            init_noise_std: 0.05,
            start: StartState::Hanging,
        }
    }

    /// 500 Hz, 8000-step episodes.
    pub fn paper(task: Task) -> Self {
        Self {
            dt: 0.002,
            max_steps: 8000,
            ..Self::desk(task)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::config("env.dt", "must be > 0"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("env.max_steps", "must be > 0"));
        }
        if !(self.action_limit.is_finite() && self.action_limit > 0.0) {
            return Err(Error::config("env.action_limit", "must be > 0"));
        }
        if self.q.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("env.q", "weights must be finite and >= 0"));
        }
        if !(self.r.is_finite() && self.r >= 0.0) {
            return Err(Error::config("env.r", "must be finite and >= 0"));
        }
        if !(self.init_noise_std.is_finite() && self.init_noise_std >= 0.0) {
            return Err(Error::config("env.init_noise_std", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Generalized coordinates: cart-pole `(x, θ)`, Furuta `(θ_arm, θ_pend)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub q: [f64; 2],
    pub qd: [f64; 2],
    pub t: usize,
}

impl EnvState {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.q[0], self.q[1], self.qd[0], self.qd[1]]
    }
}

pub type Observation = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    /// The cart left the rail; the episode terminated rather than timed out.
    pub out_of_bounds: bool,
    pub state: EnvState,
}

/// Classical fourth-order Runge–Kutta step.
pub fn rk4_step<const N: usize>(
    f: impl Fn(&[f64; N]) -> [f64; N],
    y: &[f64; N],
    dt: f64,
) -> Result<[f64; N]> {
    let axpy = |a: &[f64; N], s: f64, k: &[f64; N]| -> [f64; N] {
        let mut out = *a;
        for (o, ki) in out.iter_mut().zip(k) {
            *o += s * ki;
        }
        out
    };
    let k1 = f(y);
    let k2 = f(&axpy(y, 0.5 * dt, &k1));
    let k3 = f(&axpy(y, 0.5 * dt, &k2));
    let k4 = f(&axpy(y, dt, &k3));
    let mut out = *y;
    for i in 0..N {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::SimulationDiverged {
            state: out.to_vec(),
            domain: None,
        })
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Linear-servo cart with a pendulum of half-length `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct CartPole {
    g: f64,
    m_p: f64,
    l: f64,
    rail_length: f64,
    pinion_radius: f64,
    gear_ratio: f64,
    motor_torque_const: f64,
    cart_damping: f64,
    pole_damping: f64,
    cart_friction: f64,
    /// Cart, pole and reflected rotor inertia as a translational mass.
    mass_eff: f64,
    /// Normal force on the rail.
    normal_force: f64,
    /// `η_g K_g η_m k_m / (R_m r_mp²)`.
    force_gain: f64,
}

impl CartPole {
    pub fn from_params(p: &DomainParams) -> Result<Self> {
        let g = p.get("gravity")?;
        let m_c = p.get("cart_mass")?;
        let m_p = p.get("pole_mass")?;
        let l = p.get("pole_half_length")?;
        let rail_length = p.get("rail_length")?;
        let r = p.get("pinion_radius")?;
        let k_g = p.get("gear_ratio")?;
        let eta_g = p.get("gear_efficiency")?;
        let eta_m = p.get("motor_efficiency")?;
        let j_m = p.get("motor_inertia")?;
        let k_m = p.get("motor_torque_const")?;
        let r_m = p.get("motor_resistance")?;
        Ok(Self {
            g,
            m_p,
            l,
            rail_length,
            pinion_radius: r,
            gear_ratio: k_g,
            motor_torque_const: k_m,
            cart_damping: p.get("cart_damping")?,
            pole_damping: p.get("pole_damping")?,
            cart_friction: p.get("cart_friction")?,
            mass_eff: m_c + m_p + eta_g * k_g * k_g * j_m / (r * r),
            normal_force: (m_c + m_p) * g,
            force_gain: eta_g * k_g * eta_m * k_m / (r_m * r * r),
        })
    }

    /// Motor force on the cart for voltage `v` at cart speed `xd`.
    pub fn motor_force(&self, v: f64, xd: f64) -> f64 {
        self.force_gain
            * (v * self.pinion_radius - self.gear_ratio * self.motor_torque_const * xd)
    }

    fn accel(&self, q: [f64; 2], qd: [f64; 2], v: f64) -> [f64; 2] {
        let (s, c) = q[1].sin_cos();
        let (xd, thd) = (qd[0], qd[1]);
        let ml = self.m_p * self.l;
        let m11 = self.mass_eff;
        let m12 = ml * c;
        let m22 = 4.0 / 3.0 * ml * self.l;
        let rhs1 = ml * s * thd * thd + self.motor_force(v, xd)
            - self.cart_damping * xd
            - self.cart_friction * sgn(xd) * self.normal_force;
        let rhs2 = -ml * self.g * s - self.pole_damping * thd;
        let det = m11 * m22 - m12 * m12;
        [
            (m22 * rhs1 - m12 * rhs2) / det,
            (m11 * rhs2 - m12 * rhs1) / det,
        ]
    }

    /// Mechanical energy (kinetic incl. reflected rotor inertia, plus potential).
    pub fn energy(&self, q: [f64; 2], qd: [f64; 2]) -> f64 {
        let ml = self.m_p * self.l;
        let c = q[1].cos();
        0.5 * self.mass_eff * qd[0] * qd[0]
            + ml * c * qd[0] * qd[1]
            + 0.5 * (4.0 / 3.0) * ml * self.l * qd[1] * qd[1]
            - ml * self.g * c
    }

    pub fn rail_half_length(&self) -> f64 {
        0.5 * self.rail_length
    }
}

/// Rotary (Furuta) pendulum; the arm rotates about the vertical axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Furuta {
    g: f64,
    m_p: f64,
    l_p: f64,
    l_r: f64,
    j_r: f64,
    j_p: f64,
    d_p: f64,
    d_r: f64,
    r_m: f64,
    k_m: f64,
}

impl Furuta {
    pub fn from_params(p: &DomainParams) -> Result<Self> {
        let m_p = p.get("pend_mass")?;
        let m_r = p.get("arm_mass")?;
        let l_p = p.get("pend_length")?;
        let l_r = p.get("arm_length")?;
        Ok(Self {
            g: p.get("gravity")?,
            m_p,
            l_p,
            l_r,
            j_r: m_r * l_r * l_r / 3.0,
            j_p: m_p * l_p * l_p / 12.0,
            d_p: p.get("pend_damping")?,
            d_r: p.get("arm_damping")?,
            r_m: p.get("motor_resistance")?,
            k_m: p.get("motor_const")?,
        })
    }

    fn mass_matrix(&self, th_p: f64) -> [f64; 3] {
        let (s, c) = th_p.sin_cos();
        let m11 = self.j_r + self.m_p * (self.l_r * self.l_r + 0.25 * self.l_p * self.l_p * s * s);
        let m12 = 0.5 * self.m_p * self.l_r * self.l_p * c;
        let m22 = self.j_p + 0.25 * self.m_p * self.l_p * self.l_p;
        [m11, m12, m22]
    }

    fn accel(&self, q: [f64; 2], qd: [f64; 2], v: f64) -> [f64; 2] {
        let (s, c) = q[1].sin_cos();
        let (thd_r, thd_p) = (qd[0], qd[1]);
        let [m11, m12, m22] = self.mass_matrix(q[1]);
        let mp = self.m_p;
        let torque = self.k_m * (v - self.k_m * thd_r) / self.r_m;
        let rhs1 = torque - self.d_r * thd_r - 0.5 * mp * self.l_p * self.l_p * s * c * thd_r * thd_p
            + 0.5 * mp * self.l_r * self.l_p * s * thd_p * thd_p;
        let rhs2 = -self.d_p * thd_p + 0.25 * mp * self.l_p * self.l_p * s * c * thd_r * thd_r
            - 0.5 * mp * self.g * self.l_p * s;
        let det = m11 * m22 - m12 * m12;
        [
            (m22 * rhs1 - m12 * rhs2) / det,
            (m11 * rhs2 - m12 * rhs1) / det,
        ]
    }

    pub fn energy(&self, q: [f64; 2], qd: [f64; 2]) -> f64 {
        let [m11, m12, m22] = self.mass_matrix(q[1]);
        0.5 * (m11 * qd[0] * qd[0] + 2.0 * m12 * qd[0] * qd[1] + m22 * qd[1] * qd[1])
            - 0.5 * self.m_p * self.g * self.l_p * q[1].cos()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    Cartpole(CartPole),
    Furuta(Furuta),
}

impl Dynamics {
    /// Fails with a configuration error naming the first missing parameter.
    pub fn new(task: Task, params: &DomainParams) -> Result<Self> {
        Ok(match task {
            Task::Cartpole => Dynamics::Cartpole(CartPole::from_params(params)?),
            Task::Furuta => Dynamics::Furuta(Furuta::from_params(params)?),
        })
    }

    pub fn task(&self) -> Task {
        match self {
            Dynamics::Cartpole(_) => Task::Cartpole,
            Dynamics::Furuta(_) => Task::Furuta,
        }
    }

    pub fn accel(&self, q: [f64; 2], qd: [f64; 2], voltage: f64) -> [f64; 2] {
        match self {
            Dynamics::Cartpole(m) => m.accel(q, qd, voltage),
            Dynamics::Furuta(m) => m.accel(q, qd, voltage),
        }
    }

    pub fn energy(&self, q: [f64; 2], qd: [f64; 2]) -> f64 {
        match self {
            Dynamics::Cartpole(m) => m.energy(q, qd),
            Dynamics::Furuta(m) => m.energy(q, qd),
        }
    }

    /// Advances `(q, qd)` by `dt` under constant voltage.
    pub fn integrate(&self, q: [f64; 2], qd: [f64; 2], voltage: f64, dt: f64) -> Result<([f64; 2], [f64; 2])> {
        let y = [q[0], q[1], qd[0], qd[1]];
        let f = |y: &[f64; 4]| {
            let a = self.accel([y[0], y[1]], [y[2], y[3]], voltage);
            [y[2], y[3], a[0], a[1]]
        };
        let y = rk4_step(f, &y, dt)?;
        Ok(([y[0], y[1]], [y[2], y[3]]))
    }

    fn out_of_bounds(&self, state: &EnvState) -> bool {
        match self {
            Dynamics::Cartpole(m) => state.q[0].abs() > m.rail_half_length(),
            Dynamics::Furuta(_) => false,
        }
    }
}

pub fn obs_dim(task: Task) -> usize {
    match task {
        Task::Cartpole => 5,
        Task::Furuta => 6,
    }
}

pub const ACT_DIM: usize = 1;

pub fn observe(task: Task, s: &EnvState) -> Observation {
    match task {
        Task::Cartpole => {
            let (sn, cs) = s.q[1].sin_cos();
            vec![s.q[0], sn, cs, s.qd[0], s.qd[1]]
        }
        Task::Furuta => {
            let (sr, cr) = s.q[0].sin_cos();
            let (sp, cp) = s.q[1].sin_cos();
            vec![sr, cr, sp, cp, s.qd[0], s.qd[1]]
        }
    }
}

/// `exp(-(eᵀQe + R u²))` with `e` the error to the upright target.
pub fn reward(cfg: &TaskConfig, s: &EnvState, u: f64) -> f64 {
    let e = [s.q[0], wrap_angle(s.q[1] - PI), s.qd[0], s.qd[1]];
    let cost: f64 = e.iter().zip(&cfg.q).map(|(ei, w)| w * ei * ei).sum::<f64>() + cfg.r * u * u;
    (-cost.min(MAX_COST)).exp()
}

pub fn reset_state(cfg: &TaskConfig, rng: &mut Rng) -> EnvState {
    let base = match cfg.start {
        StartState::Hanging => 0.0,
        StartState::Upright => PI,
    };
    let mut noise = || -> f64 { cfg.init_noise_std * rng.sample::<f64, _>(StandardNormal) };
    let q = [noise(), base + noise()];
    let qd = [noise(), noise()];
    EnvState { q, qd, t: 0 }
}

pub fn reset_env(
    task: Task,
    cfg: &TaskConfig,
    params: &DomainParams,
    rng: &mut Rng,
) -> Result<(EnvState, Observation)> {
    Dynamics::new(task, params)?;
    let s = reset_state(cfg, rng);
    Ok((s, observe(task, &s)))
}

pub fn step_env(dynamics: &Dynamics, state: &EnvState, action: f64, cfg: &TaskConfig) -> Result<StepResult> {
    if !action.is_finite() {
        return Err(Error::NonFinite(format!("action {action}")));
    }
    let u = action.clamp(-cfg.action_limit, cfg.action_limit);
    let r = reward(cfg, state, u);
    let (q, qd) = dynamics.integrate(state.q, state.qd, u, cfg.dt)?;
    let next = EnvState { q, qd, t: state.t + 1 };
    let out_of_bounds = dynamics.out_of_bounds(&next);
    Ok(StepResult {
        obs: observe(dynamics.task(), &next),
        reward: r,
        done: out_of_bounds || next.t >= cfg.max_steps,
        out_of_bounds,
        state: next,
    })
}

/// A simulator instance owning its state.
#[derive(Debug, Clone)]
pub struct Env {
    dynamics: Dynamics,
    cfg: TaskConfig,
    state: EnvState,
}

impl Env {
    pub fn new(task: Task, cfg: &TaskConfig, params: &DomainParams) -> Result<Self> {
        Ok(Self {
            dynamics: Dynamics::new(task, params)?,
            cfg: cfg.clone(),
            state: EnvState {
                q: [0.0; 2],
                qd: [0.0; 2],
                t: 0,
            },
        })
    }

    pub fn task(&self) -> Task {
        self.dynamics.task()
    }

    pub fn obs_dim(&self) -> usize {
        obs_dim(self.task())
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn reset(&mut self, rng: &mut Rng) -> Observation {
        self.state = reset_state(&self.cfg, rng);
        observe(self.task(), &self.state)
    }

    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
    }

    pub fn step(&mut self, action: f64) -> Result<StepResult> {
        let res = step_env(&self.dynamics, &self.state, action, &self.cfg)?;
        self.state = res.state;
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DomainDistribution;
    use crate::seed::Seeds;

    fn nominal(task: Task) -> DomainParams {
        DomainDistribution::builtin(task).nominal()
    }

    #[test]
    fn rk4_zero_field() {
        let y = [1.0, -2.0, 3.0];
        assert_eq!(rk4_step(|_| [0.0; 3], &y, 0.1).unwrap(), y);
    }

    #[test]
    fn rk4_exponential() {
        // 1 + h + h²/2 + h³/6 + h⁴/24 at h = 0.1
        let y = rk4_step(|y: &[f64; 1]| [y[0]], &[1.0], 0.1).unwrap();
        assert!((y[0] - 1.105_170_833_333_333_3).abs() < 1e-15);
    }

    #[test]
    fn rk4_oscillator_period() {
        let dt = 1e-3;
        let n = (2.0 * PI / dt).round() as usize;
        let dt = 2.0 * PI / n as f64;
        let mut y = [1.0, 0.0];
        for _ in 0..n {
            y = rk4_step(|y: &[f64; 2]| [y[1], -y[0]], &y, dt).unwrap();
        }
        assert!((y[0] - 1.0).abs() < 1e-9 && y[1].abs() < 1e-9, "{y:?}");
    }

    #[test]
    fn rk4_reports_divergence() {
        let err = rk4_step(|_: &[f64; 1]| [f64::INFINITY], &[0.0], 0.1).unwrap_err();
        assert!(matches!(err, Error::SimulationDiverged { .. }));
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!(wrap_angle(0.1).abs() - 0.1 < 1e-15);
    }

    #[test]
    fn hanging_equilibrium_is_fixed_point() {
        for task in [Task::Cartpole, Task::Furuta] {
            let d = Dynamics::new(task, &nominal(task)).unwrap();
            let cfg = TaskConfig::desk(task);
            let s = EnvState { q: [0.0; 2], qd: [0.0; 2], t: 0 };
            let r = step_env(&d, &s, 0.0, &cfg).unwrap();
            for (a, b) in r.state.to_vec().iter().zip(s.to_vec()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upright_reward_is_one() {
        for task in [Task::Cartpole, Task::Furuta] {
            let cfg = TaskConfig::desk(task);
            let s = EnvState { q: [0.0, PI], qd: [0.0; 2], t: 0 };
            assert_eq!(reward(&cfg, &s, 0.0), 1.0);
            let s = EnvState { q: [0.0, -PI], qd: [0.0; 2], t: 0 };
            assert_eq!(reward(&cfg, &s, 0.0), 1.0);
        }
    }

    #[test]
    fn reward_stays_positive() {
        let cfg = TaskConfig::desk(Task::Cartpole);
        let s = EnvState { q: [1e6, 0.0], qd: [1e9, -1e9], t: 0 };
        let r = reward(&cfg, &s, 1e6);
        assert!(r > 0.0 && r <= 1.0);
    }

    #[test]
    fn reset_without_noise_is_exact() {
        let mut cfg = TaskConfig::desk(Task::Cartpole);
        cfg.init_noise_std = 0.0;
        let mut rng = Seeds::new(0).rng("reset", 0);
        let (s, obs) = reset_env(Task::Cartpole, &cfg, &nominal(Task::Cartpole), &mut rng).unwrap();
        assert_eq!(s.q, [0.0, 0.0]);
        assert_eq!(s.qd, [0.0, 0.0]);
        assert_eq!(s.t, 0);
        assert_eq!(obs, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn reset_noise_moments() {
        let cfg = TaskConfig { init_noise_std: 0.1, ..TaskConfig::desk(Task::Furuta) };
        let mut rng = Seeds::new(1).rng("reset", 0);
        let states: Vec<_> = (0..10_000).map(|_| reset_state(&cfg, &mut rng)).collect();
        for k in 0..4 {
            let xs: Vec<f64> = states.iter().map(|s| s.to_vec()[k]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
            assert!((sd - 0.1).abs() < 0.01, "coordinate {k}: std {sd}");
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = TaskConfig::desk(Task::Cartpole);
        let a = reset_state(&cfg, &mut Seeds::new(5).rng("reset", 2));
        let b = reset_state(&cfg, &mut Seeds::new(5).rng("reset", 2));
        assert_eq!(a, b);
    }

    #[test]
    fn missing_parameter_is_named() {
        let mut p = nominal(Task::Cartpole);
        let mut values = p.values().clone();
        values.remove("pinion_radius");
        p = DomainParams::from_map(values);
        let err = Env::new(Task::Cartpole, &TaskConfig::desk(Task::Cartpole), &p).unwrap_err();
        assert!(err.to_string().contains("pinion_radius"), "{err}");
    }

    #[test]
    fn positive_voltage_pushes_cart_forward() {
        let d = Dynamics::new(Task::Cartpole, &nominal(Task::Cartpole)).unwrap();
        let a = d.accel([0.0, 0.0], [0.0, 0.0], 3.0);
        assert!(a[0] > 0.0);
        let (q, qd) = d.integrate([0.0, 0.0], [0.0, 0.0], 3.0, 0.01).unwrap();
        assert!(q[0] > 0.0 && qd[0] > 0.0);
    }

    #[test]
    fn observation_angle_pairs_are_unit() {
        let mut rng = Seeds::new(2).rng("obs", 0);
        for task in [Task::Cartpole, Task::Furuta] {
            let mut env = Env::new(task, &TaskConfig::desk(task), &nominal(task)).unwrap();
            env.reset(&mut rng);
            for i in 0..200 {
                let r = env.step(if i % 40 < 20 { 4.0 } else { -4.0 }).unwrap();
                let o = &r.obs;
                let pairs: &[(usize, usize)] = match task {
                    Task::Cartpole => &[(1, 2)],
                    Task::Furuta => &[(0, 1), (2, 3)],
                };
                for &(s, c) in pairs {
                    assert!((o[s] * o[s] + o[c] * o[c] - 1.0).abs() < 1e-9);
                }
                if r.done {
                    break;
                }
            }
        }
    }

    #[test]
    fn episodes_end_at_max_steps() {
        let mut cfg = TaskConfig::desk(Task::Furuta);
        cfg.max_steps = 7;
        let mut env = Env::new(Task::Furuta, &cfg, &nominal(Task::Furuta)).unwrap();
        env.reset(&mut Seeds::new(0).rng("r", 0));
        for t in 1..=7 {
            let r = env.step(1.0).unwrap();
            assert_eq!(r.done, t == 7);
            assert!(!r.out_of_bounds);
        }
    }

    #[test]
    fn leaving_the_rail_terminates() {
        let cfg = TaskConfig::desk(Task::Cartpole);
        let mut env = Env::new(Task::Cartpole, &cfg, &nominal(Task::Cartpole)).unwrap();
        env.reset(&mut Seeds::new(0).rng("r", 0));
        let mut ended = None;
        for t in 0..cfg.max_steps {
            let r = env.step(8.0).unwrap();
            if r.done {
                ended = Some((t, r.out_of_bounds));
                break;
            }
        }
        let (t, oob) = ended.expect("cart should hit the rail end");
        assert!(oob && t + 1 < cfg.max_steps);
    }

    #[test]
    fn step_is_deterministic() {
        let task = Task::Cartpole;
        let d = Dynamics::new(task, &nominal(task)).unwrap();
        let cfg = TaskConfig::desk(task);
        let s = EnvState { q: [0.1, 1.0], qd: [0.3, -2.0], t: 3 };
        let a = step_env(&d, &s, 2.5, &cfg).unwrap();
        let b = step_env(&d, &s, 2.5, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn actions_are_clamped() {
        let task = Task::Furuta;
        let d = Dynamics::new(task, &nominal(task)).unwrap();
        let cfg = TaskConfig::desk(task);
        let s = EnvState { q: [0.0, 0.5], qd: [0.0; 2], t: 0 };
        assert_eq!(step_env(&d, &s, 100.0, &cfg).unwrap(), step_env(&d, &s, 4.0, &cfg).unwrap());
        assert!(step_env(&d, &s, f64::NAN, &cfg).is_err());
    }
}
