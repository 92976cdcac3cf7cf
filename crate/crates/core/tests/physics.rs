use didor_core::domain::{DomainDistribution, DomainParams, Task};
use didor_core::envs::Dynamics;

fn lossless(task: Task) -> DomainParams {
    let mut p = DomainDistribution::builtin(task).nominal();
    match task {
        Task::Cartpole => {
            for k in ["cart_damping", "pole_damping", "cart_friction", "motor_torque_const"] {
                p.set(k, 0.0);
            }
        }
        Task::Furuta => {
            for k in ["pend_damping", "arm_damping", "motor_const"] {
                p.set(k, 0.0);
            }
        }
    }
    p
}

/// Kinetic plus potential energy, written out from the parameters.
fn energy(task: Task, p: &DomainParams, q: [f64; 2], qd: [f64; 2]) -> f64 {
    let g = |k: &str| p.get(k).unwrap();
    match task {
        Task::Cartpole => {
            let (mc, mp, l, r) = (g("cart_mass"), g("pole_mass"), g("pole_half_length"), g("pinion_radius"));
            let rotor = g("gear_efficiency") * g("gear_ratio").powi(2) * g("motor_inertia") / (r * r);
            // pole center of mass at (x + l sinθ, -l cosθ)
            let vx = qd[0] + l * q[1].cos() * qd[1];
            let vy = l * q[1].sin() * qd[1];
            let pole_inertia = mp * l * l / 3.0;
            0.5 * (mc + rotor) * qd[0].powi(2)
                + 0.5 * mp * (vx * vx + vy * vy)
                + 0.5 * pole_inertia * qd[1].powi(2)
                - mp * g("gravity") * l * q[1].cos()
        }
        Task::Furuta => {
            let (mp, mr, lp, lr) = (g("pend_mass"), g("arm_mass"), g("pend_length"), g("arm_length"));
            let (s, c) = q[1].sin_cos();
            let h = 0.5 * lp;
            // pendulum center of mass relative to the arm tip: h sinθ along the tangent, -h cosθ vertical
            let v_tan = lr * qd[0] + h * c * qd[1];
            let v_rad = h * s * qd[0];
            let v_z = h * s * qd[1];
            let arm = mr * lr * lr / 3.0 * qd[0].powi(2);
            let pend_spin = mp * lp * lp / 12.0 * qd[1].powi(2);
            let com = mp * (v_tan * v_tan + v_rad * v_rad + v_z * v_z);
            0.5 * (arm + pend_spin + com) - mp * g("gravity") * h * c
        }
    }
}

fn integrate(dyn_: &Dynamics, mut q: [f64; 2], mut qd: [f64; 2], dt: f64, steps: usize) -> ([f64; 2], [f64; 2]) {
    for _ in 0..steps {
        (q, qd) = dyn_.integrate(q, qd, 0.0, dt).unwrap();
    }
    (q, qd)
}

fn check_conservation(task: Task) {
    let p = lossless(task);
    let d = Dynamics::new(task, &p).unwrap();
    let (mut q, mut qd) = ([0.0, 2.0], [0.3, 1.0]);
    let e0 = energy(task, &p, q, qd);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        (q, qd) = d.integrate(q, qd, 0.0, 0.002).unwrap();
        worst = worst.max((energy(task, &p, q, qd) - e0).abs() / e0.abs());
    }
    assert!(worst < 1e-6, "{task}: relative energy drift {worst:e}");
}

#[test]
fn cartpole_conserves_energy_without_losses() {
    check_conservation(Task::Cartpole);
}

#[test]
fn furuta_conserves_energy_without_losses() {
    check_conservation(Task::Furuta);
}

/// States at every multiple of `dt` over `steps` coarse steps, integrating with `dt / k`.
fn trajectory(d: &Dynamics, q0: [f64; 2], qd0: [f64; 2], dt: f64, steps: usize, k: usize) -> Vec<[f64; 4]> {
    let (mut q, mut qd) = (q0, qd0);
    (0..steps)
        .map(|_| {
            (q, qd) = integrate(d, q, qd, dt / k as f64, k);
            [q[0], q[1], qd[0], qd[1]]
        })
        .collect()
}

fn check_order(task: Task) {
    let p = lossless(task);
    let d = Dynamics::new(task, &p).unwrap();
    let (q0, qd0) = ([0.0, 2.5], [0.2, -1.5]);
    let dt = 0.002;
    let steps = 500;
    let reference = trajectory(&d, q0, qd0, dt, steps, 16);
    let err = |k: usize| {
        trajectory(&d, q0, qd0, dt, steps, k)
            .iter()
            .zip(&reference)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    };
    let ratio = err(1) / err(2);
    assert!((8.0..=32.0).contains(&ratio), "{task}: halving dt shrank the error by {ratio}");
}

#[test]
fn cartpole_integrator_is_fourth_order() {
    check_order(Task::Cartpole);
}

#[test]
fn furuta_integrator_is_fourth_order() {
    check_order(Task::Furuta);
}

#[test]
fn damping_dissipates_energy() {
    for task in [Task::Cartpole, Task::Furuta] {
        let p = DomainDistribution::builtin(task).nominal();
        let d = Dynamics::new(task, &p).unwrap();
        let (mut q, mut qd) = ([0.0, 2.0], [0.3, 1.0]);
        let mut e = energy(task, &p, q, qd);
        for _ in 0..500 {
            (q, qd) = d.integrate(q, qd, 0.0, 0.002).unwrap();
            let next = energy(task, &p, q, qd);
            assert!(next <= e + 1e-9 * e.abs(), "{task}: energy rose from {e} to {next}");
            e = next;
        }
    }
}

