use crowdtemp::truthinf::{mean_infer, mv_infer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sse(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum()
}

/// Brute force over every assignment of values to `k` non-empty clusters,
/// contiguous or not.
fn mv_oracle(xs: &[f64], k: usize) -> f64 {
    let n = xs.len();
    if n < k {
        return xs.iter().sum::<f64>() / n as f64;
    }
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for code in 0..k.pow(n as u32) {
        let mut blocks = vec![Vec::new(); k];
        let mut c = code;
        for &x in xs {
            blocks[c % k].push(x);
            c /= k;
        }
        if blocks.iter().any(Vec::is_empty) {
            continue;
        }
        let cost: f64 = blocks.iter().map(|b| sse(b)).sum();
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, blocks));
        }
    }
    let mut blocks = best.expect("n >= k gives a partition").1;
    for b in &mut blocks {
        b.sort_by(f64::total_cmp);
    }
    // Largest cluster, then the tighter one, then the colder one.
    let key = |b: &Vec<f64>| {
        (
            std::cmp::Reverse(b.len()),
            sse(b) / b.len() as f64,
            b.iter().sum::<f64>() / b.len() as f64,
        )
    };
    let pick = blocks
        .iter()
        .min_by(|a, b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.cmp(&kb.0)
                .then(ka.1.total_cmp(&kb.1))
                .then(ka.2.total_cmp(&kb.2))
        })
        .expect("k >= 1");
    pick.iter().sum::<f64>() / pick.len() as f64
}

fn random_groups(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let size = r.random_range(1..=6);
            (0..size).map(|_| r.random_range(10.0..35.0)).collect()
        })
        .collect()
}

#[test]
fn mv_matches_exhaustive_partition_oracle() {
    for k in [2, 3] {
        for (i, g) in random_groups(1000, k as u64).iter().enumerate() {
            assert_eq!(
                mv_infer(g, k).unwrap(),
                mv_oracle(g, k),
                "group {i} {g:?} k={k}"
            );
        }
    }
}

#[test]
fn mv_falls_back_to_mean_below_k_answers() {
    for g in random_groups(1000, 9).iter().filter(|g| g.len() < 3) {
        assert_eq!(mv_infer(g, 3).unwrap(), mean_infer(g).unwrap());
    }
    assert_eq!(mv_infer(&[20.0, 22.0], 3).unwrap(), 21.0);
}

#[test]
fn mv_with_one_cluster_is_the_mean() {
    for g in random_groups(1000, 10) {
        assert_eq!(mv_infer(&g, 1).unwrap(), mean_infer(&g).unwrap());
    }
}

#[test]
fn mv_picks_the_majority_cluster() {
    // Three agreeing phones and one outlier.
    let v = mv_infer(&[21.0, 21.2, 21.4, 30.0], 2).unwrap();
    assert!((v - 21.2).abs() < 1e-12);
    // Equal sizes: the tighter pair wins.
    let v = mv_infer(&[10.0, 14.0, 20.0, 20.5], 2).unwrap();
    assert!((v - 20.25).abs() < 1e-12);
}

#[test]
fn estimates_stay_within_the_answer_range() {
    for g in random_groups(1000, 11) {
        let (lo, hi) = g
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        for v in [
            mean_infer(&g).unwrap(),
            mv_infer(&g, 2).unwrap(),
            mv_infer(&g, 3).unwrap(),
        ] {
            assert!(
                lo - 1e-12 <= v && v <= hi + 1e-12,
                "{v} outside [{lo}, {hi}]"
            );
        }
    }
}
