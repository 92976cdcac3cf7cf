use didor_core::domain::{DomainDistribution, Task};
use didor_core::seed::Seeds;
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Clone, Copy)]
enum Kind {
    Normal(f64, f64),
    Uniform(f64, f64),
}

// Independent copy of the published parameter tables.
fn furuta_table() -> Vec<(&'static str, Kind)> {
    vec![
        ("gravity", Kind::Normal(9.81, 0.981)),
        ("pend_mass", Kind::Normal(0.024, 0.048)),
        ("arm_mass", Kind::Normal(0.095, 0.019)),
        ("pend_length", Kind::Normal(0.129, 0.026)),
        ("arm_length", Kind::Normal(0.085, 0.017)),
        // printed with the bounds in descending order
        ("pend_damping", Kind::Uniform(2.5e-7, 1e-6)),
        ("arm_damping", Kind::Normal(5e-6, 1.25e-6)),
        ("motor_resistance", Kind::Normal(8.4, 1.68)),
        ("motor_const", Kind::Normal(0.042, 8.4e-3)),
    ]
}

fn cartpole_table() -> Vec<(&'static str, Kind)> {
    vec![
        ("gravity", Kind::Normal(9.81, 0.981)),
        ("cart_mass", Kind::Normal(0.38, 0.076)),
        ("pole_mass", Kind::Normal(0.127, 2.54e-2)),
        ("pole_half_length", Kind::Normal(0.16825, 3.365e-2)),
        ("rail_length", Kind::Normal(0.814, 0.163)),
        ("pinion_radius", Kind::Normal(6.35e-3, 1.27e-3)),
        ("gear_ratio", Kind::Normal(3.71, 0.93)),
        ("gear_efficiency", Kind::Uniform(0.675, 1.0)),
        ("motor_efficiency", Kind::Uniform(0.675, 1.0)),
        ("motor_inertia", Kind::Normal(3.9e-7, 9.75e-8)),
        ("motor_torque_const", Kind::Normal(7.67e-3, 1.92e-3)),
        ("motor_resistance", Kind::Normal(2.6, 0.65)),
        ("cart_damping", Kind::Uniform(4.05, 6.75)),
        // upper bound printed as 3.0; 3.0e-3 centers the range on the nominal 2.4e-3
        ("pole_damping", Kind::Uniform(1.8e-3, 3.0e-3)),
        ("cart_friction", Kind::Uniform(0.01, 0.03)),
    ]
}

/// (mean, std, fourth central moment)
fn moments(kind: Kind) -> (f64, f64, f64) {
    match kind {
        Kind::Normal(m, s) => (m, s, 3.0 * s.powi(4)),
        Kind::Uniform(lo, hi) => {
            let s = (hi - lo) / 12f64.sqrt();
            (0.5 * (lo + hi), s, 1.8 * s.powi(4))
        }
    }
}

/// Probability that a draw falls below the sampler's floor.
fn clip_probability(kind: Kind, floor: f64) -> f64 {
    match kind {
        Kind::Normal(m, s) => Normal::new(m, s).unwrap().cdf(floor),
        Kind::Uniform(lo, hi) => ((floor - lo) / (hi - lo)).clamp(0.0, 1.0),
    }
}

fn check(task: Task, table: Vec<(&'static str, Kind)>) {
    const N: usize = 100_000;
    let dist = DomainDistribution::builtin(task);
    let mut rng = Seeds::new(2024).rng("moments", task as u64);
    let draws: Vec<_> = (0..N).map(|_| dist.sample(&mut rng)).collect();
    let mut checked = 0;
    for (name, kind) in table {
        let floor = dist.spec(name).and_then(|s| s.floor).unwrap_or(f64::NEG_INFINITY);
        if clip_probability(kind, floor) >= 1e-3 {
            // floored: the truncated law no longer has the tabulated moments
            continue;
        }
        let xs: Vec<f64> = draws.iter().map(|d| d.get(name).unwrap()).collect();
        let n = N as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let (mu, sigma, mu4) = moments(kind);
        let se_mean = sigma / n.sqrt();
        let se_std = ((mu4 - sigma.powi(4)) / (4.0 * sigma * sigma * n)).sqrt();
        assert!((mean - mu).abs() < 5.0 * se_mean, "{task} {name}: mean {mean} vs {mu}");
        assert!((std - sigma).abs() < 5.0 * se_std, "{task} {name}: std {std} vs {sigma}");
        checked += 1;
    }
    assert!(checked >= 7, "only {checked} parameters checked for {task}");
}

#[test]
fn cartpole_moments_match_table() {
    check(Task::Cartpole, cartpole_table());
}

#[test]
fn furuta_moments_match_table() {
    check(Task::Furuta, furuta_table());
}

#[test]
fn floored_normal_mass_keeps_every_draw_positive() {
    let dist = DomainDistribution::builtin(Task::Furuta);
    let mut rng = Seeds::new(5).rng("floor", 0);
    assert!((0..10_000).all(|_| dist.sample(&mut rng).get("pend_mass").unwrap() > 0.0));
}
