use crowdtemp::nn::{gaussian_nll, gaussian_nll_grad, grad_check, Loss, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent form: `ln(sigma * sqrt(2 pi)) + (y - mu)^2 / (2 sigma^2)`.
fn nll_oracle(mu: f64, sigma: f64, y: f64) -> f64 {
    (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln() + (y - mu).powi(2) / (2.0 * sigma.powi(2))
}

fn triples(n: usize, seed: u64) -> Vec<(f64, f64, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (
                r.random_range(-40.0..60.0),
                r.random_range(0.01..5.0),
                r.random_range(-40.0..60.0),
            )
        })
        .collect()
}

#[test]
fn nll_matches_closed_form_on_ten_thousand_triples() {
    let worst = triples(10_000, 1)
        .into_iter()
        .map(|(m, s, y)| (gaussian_nll(m, s, y).unwrap() - nll_oracle(m, s, y)).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-9, "{worst}");
}

#[test]
fn nll_gradient_matches_central_differences() {
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    let mut worst = 0.0_f64;
    for (m, s, y) in triples(10_000, 2) {
        let (dm, ds) = gaussian_nll_grad(m, s, y).unwrap();
        let h = 1e-6 * s;
        let nm = (nll_oracle(m + h, s, y) - nll_oracle(m - h, s, y)) / (2.0 * h);
        let ns = (nll_oracle(m, s + h, y) - nll_oracle(m, s - h, y)) / (2.0 * h);
        worst = worst.max(rel(dm, nm)).max(rel(ds, ns));
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn nll_examples() {
    // Standard normal at its mean.
    assert!(
        (gaussian_nll(0.0, 1.0, 0.0).unwrap() - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs()
            < 1e-15
    );
    // One sigma out adds exactly one half.
    let d = gaussian_nll(3.0, 2.0, 5.0).unwrap() - gaussian_nll(3.0, 2.0, 3.0).unwrap();
    assert!((d - 0.5).abs() < 1e-15);
    assert_eq!(gaussian_nll_grad(1.0, 1.0, 1.0).unwrap(), (0.0, 1.0));
    assert!(gaussian_nll(0.0, 0.0, 0.0).is_err());
    assert!(gaussian_nll(0.0, f64::NAN, 0.0).is_err());
}

fn worst_grad_error(net: &Network, seeds: std::ops::Range<u64>) -> f64 {
    seeds
        .map(|seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let params = net.init_params(&mut r);
            let x: Vec<f64> = (0..net.input_dim())
                .map(|_| r.random_range(-2.0..2.0))
                .collect();
            let y = r.random_range(-2.0..2.0);
            grad_check(net, &params, &x, y, Loss::GaussianNll, 1e-6).unwrap()
        })
        .fold(0.0, f64::max)
}

#[test]
fn estimator_backprop_matches_finite_differences() {
    let e = worst_grad_error(&Network::estimator(), 0..100);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn aggregator_backprop_matches_finite_differences() {
    let e = worst_grad_error(&Network::aggregator(), 0..100);
    assert!(e < 1e-4, "{e}");
}
