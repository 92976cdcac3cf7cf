use didor_core::net::{gaussian_kl, kl_and_student_grads, log_prob_with_log_std};
use didor_core::seed::{Rng, Seeds};
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Means in `(-m, m)`, log-stds in `(-s, s)`.
fn pair_within(rng: &mut Rng, dim: usize, m: f64, s: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut v = |r: f64| -> Vec<f64> { (0..dim).map(|_| rng.random_range(-r..r)).collect() };
    (v(m), v(s), v(m), v(s))
}

fn random_pair(rng: &mut Rng, dim: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    pair_within(rng, dim, 2.0, 1.0)
}

fn exp(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.exp()).collect()
}

#[test]
fn closed_form_matches_monte_carlo() {
    const N: usize = 1_000_000;
    let seeds = Seeds::new(31);
    for pair in 0..10 {
        // moderate pairs: the estimator's standard error must sit well below the tolerance
        let (mp, lsp, mq, lsq) = pair_within(&mut seeds.rng("pair", pair), 4, 1.0, 0.5);
        let exact = gaussian_kl((&mp, &exp(&lsp)), (&mq, &exp(&lsq)));
        let mut rng = seeds.rng("samples", pair);
        let (mut sum, mut sum2) = (0.0, 0.0);
        let mut x = vec![0.0; 4];
        for _ in 0..N {
            for i in 0..4 {
                let z: f64 = rng.sample(StandardNormal);
                x[i] = mp[i] + lsp[i].exp() * z;
            }
            let d = log_prob_with_log_std(&mp, &lsp, &x) - log_prob_with_log_std(&mq, &lsq, &x);
            sum += d;
            sum2 += d * d;
        }
        let mean = sum / N as f64;
        let se = ((sum2 / N as f64 - mean * mean) / N as f64).sqrt();
        assert!((mean - exact).abs() < 1e-2, "pair {pair}: closed form {exact}, estimate {mean} ± {se}");
        assert!((mean - exact).abs() < 5.0 * se, "pair {pair}: closed form {exact}, estimate {mean} ± {se}");
    }
}

#[test]
fn divergence_of_a_distribution_from_itself_is_zero() {
    let seeds = Seeds::new(2);
    for k in 0..100 {
        let (m, ls, _, _) = random_pair(&mut seeds.rng("self", k), 4);
        assert_eq!(gaussian_kl((&m, &exp(&ls)), (&m, &exp(&ls))), 0.0);
    }
}

#[test]
fn divergence_is_nonnegative() {
    let seeds = Seeds::new(3);
    for k in 0..10_000 {
        let (mp, lsp, mq, lsq) = random_pair(&mut seeds.rng("nonneg", k), 4);
        let kl = gaussian_kl((&mp, &exp(&lsp)), (&mq, &exp(&lsq)));
        assert!(kl >= 0.0, "pair {k}: {kl}");
    }
}

#[test]
fn per_dimension_terms_sum_to_the_closed_form() {
    let seeds = Seeds::new(4);
    for k in 0..100 {
        let (mp, lsp, mq, lsq) = random_pair(&mut seeds.rng("dims", k), 4);
        let total: f64 = (0..4).map(|i| kl_and_student_grads(mp[i], lsp[i], mq[i], lsq[i]).0).sum();
        let exact = gaussian_kl((&mp, &exp(&lsp)), (&mq, &exp(&lsq)));
        assert!((total - exact).abs() <= 1e-12 * (1.0 + exact), "pair {k}: {total} vs {exact}");
    }
}
