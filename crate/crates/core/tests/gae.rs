use didor_core::ppo::compute_gae;
use proptest::prelude::*;

/// n-step return from `t`; stops at the first terminal step and otherwise
/// bootstraps from `values[t + n]` (or `bootstrap` past the end).
fn n_step(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, t: usize, n: usize) -> f64 {
    let mut g = 0.0;
    let mut discount = 1.0;
    for k in 0..n {
        g += discount * rewards[t + k];
        discount *= gamma;
        if dones[t + k] {
            return g;
        }
    }
    let tail = values.get(t + n).copied().unwrap_or(bootstrap);
    g + discount * tail
}

/// Steps until the episode or the trajectory ends, counting `t` itself.
fn horizon(dones: &[bool], t: usize) -> usize {
    (t..dones.len()).position(|s| dones[s]).map_or(dones.len() - t, |p| p + 1)
}

/// Advantage as the λ-weighted average of n-step returns minus the baseline.
fn lambda_advantage(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lam: f64, t: usize) -> f64 {
    let h = horizon(dones, t);
    let mut g = 0.0;
    for n in 1..h {
        g += (1.0 - lam) * lam.powi(n as i32 - 1) * n_step(rewards, values, dones, bootstrap, gamma, t, n);
    }
    g += lam.powi(h as i32 - 1) * n_step(rewards, values, dones, bootstrap, gamma, t, h);
    g - values[t]
}

fn instance() -> impl Strategy<Value = (Vec<(f64, f64, bool)>, f64, f64, f64)> {
    (
        prop::collection::vec((-2.0..2.0f64, -5.0..5.0f64, prop::bool::weighted(0.2)), 1..=10),
        -5.0..5.0f64,
        0.0..=1.0f64,
        0.0..=1.0f64,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_lambda_return_oracle((steps, bootstrap, gamma, lam) in instance()) {
        let rewards: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let values: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let dones: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, ret) = compute_gae(&rewards, &values, &dones, bootstrap, gamma, lam);
        for t in 0..rewards.len() {
            let want = lambda_advantage(&rewards, &values, &dones, bootstrap, gamma, lam, t);
            prop_assert!((adv[t] - want).abs() <= 1e-10, "t={} got {} want {}", t, adv[t], want);
            prop_assert!((ret[t] - (want + values[t])).abs() <= 1e-10);
        }
    }
}

#[test]
fn lambda_one_gives_discounted_return_minus_value() {
    let r = [1.0, 2.0, 3.0];
    let v = [0.5, -0.5, 1.0];
    let (adv, _) = compute_gae(&r, &v, &[false; 3], 4.0, 0.9, 1.0);
    let g0 = 1.0 + 0.9 * 2.0 + 0.81 * 3.0 + 0.729 * 4.0;
    assert!((adv[0] - (g0 - 0.5)).abs() < 1e-12);
}

#[test]
fn lambda_zero_gives_one_step_td_error() {
    let r = [1.0, 2.0];
    let v = [0.5, -0.5];
    let (adv, _) = compute_gae(&r, &v, &[false, true], 9.0, 0.9, 0.0);
    assert!((adv[0] - (1.0 + 0.9 * -0.5 - 0.5)).abs() < 1e-12);
    // terminal step ignores the bootstrap value
    assert!((adv[1] - (2.0 + 0.5)).abs() < 1e-12);
}
