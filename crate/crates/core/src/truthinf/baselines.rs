//! Closed-form aggregation baselines: Mean, Weighted Average and clustering
//! majority vote.

use std::collections::BTreeMap;

use super::group::SourcedAnswer;
use crate::error::{Error, Result};

pub fn mean_infer(mus: &[f64]) -> Result<f64> {
    if mus.is_empty() {
        return Err(Error::contract("mean of an empty group"));
    }
    Ok(mus.iter().sum::<f64>() / mus.len() as f64)
}

/// `W_n = (1 / E_n) / sum_i (1 / E_i)` from per-phone training MAEs.
pub fn compute_wa_weights(train_maes: &[f64]) -> Result<Vec<f64>> {
    if train_maes.is_empty() {
        return Err(Error::contract("no phone errors given"));
    }
    if let Some(e) = train_maes.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::contract(format!(
            "phone error must be positive, got {e}"
        )));
    }
    let inv: Vec<f64> = train_maes.iter().map(|e| 1.0 / e).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.iter().map(|v| v / total).collect())
}

/// Weighted mean with the weights renormalized over the phones present.
pub fn weighted_average(answers: &[SourcedAnswer], weights: &BTreeMap<String, f64>) -> Result<f64> {
    if answers.is_empty() {
        return Err(Error::contract("weighted average of an empty group"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for a in answers {
        let w = *weights
            .get(&a.phone_id)
            .ok_or_else(|| Error::contract(format!("no weight for phone `{}`", a.phone_id)))?;
        num += w * a.answer.mu;
        den += w;
    }
    if !(den > 0.0) {
        return Err(Error::contract("weights of the present phones sum to zero"));
    }
    Ok(num / den)
}

/// Within-segment sum of squared deviations, `sum (x - mean)^2`.
pub(crate) fn segment_sse(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum()
}

/// Picks the reported cluster among `segments` of sorted values: the largest,
/// then the smallest spread, then the smallest mean.
pub(crate) fn pick_cluster(segments: &[&[f64]]) -> f64 {
    let stats: Vec<(usize, f64, f64)> = segments
        .iter()
        .map(|s| {
            let m = s.iter().sum::<f64>() / s.len() as f64;
            (s.len(), segment_sse(s) / s.len() as f64, m)
        })
        .collect();
    let best = stats
        .iter()
        .min_by(|a, b| {
            b.0.cmp(&a.0)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.total_cmp(&b.2))
        })
        .expect("at least one segment");
    best.2
}

/// Clustering majority vote: optimal 1-D k-means on the estimates, returning
/// the mean of the largest cluster. With fewer than `k` answers, the mean.
///
/// Clusters of sorted values are contiguous, so the optimum is found by
/// dynamic programming over split points. Costs combine as
/// `sse(first) + (sse(second) + ...)`; among equal-cost partitions the one
/// with the earliest split points wins.
pub fn mv_infer(mus: &[f64], k: usize) -> Result<f64> {
    if mus.is_empty() {
        return Err(Error::contract("majority vote over an empty group"));
    }
    if k == 0 {
        return Err(Error::contract("cluster count must be >= 1"));
    }
    if mus.len() < k || k == 1 {
        return mean_infer(mus);
    }
    let mut x = mus.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len();
    // best[m][i]: minimal cost of splitting x[i..] into m segments.
    let mut best = vec![vec![f64::INFINITY; n + 1]; k + 1];
    best[0][n] = 0.0;
    for m in 1..=k {
        for i in (0..n).rev() {
            // Leave at least m - 1 values for the remaining segments.
            for j in (i + 1)..=(n + 1 - m) {
                let rest = best[m - 1][j];
                if rest.is_finite() {
                    let c = segment_sse(&x[i..j]) + rest;
                    if c < best[m][i] {
                        best[m][i] = c;
                    }
                }
            }
        }
    }
    let mut segments = Vec::with_capacity(k);
    let mut i = 0;
    for m in (1..=k).rev() {
        let target = best[m][i];
        let j = ((i + 1)..=(n + 1 - m))
            .find(|&j| segment_sse(&x[i..j]) + best[m - 1][j] == target)
            .expect("optimum is attained");
        segments.push(&x[i..j]);
        i = j;
    }
    Ok(pick_cluster(&segments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::Answer;

    fn sourced(id: &str, mu: f64) -> SourcedAnswer {
        SourcedAnswer {
            phone_id: id.to_owned(),
            answer: Answer::new(mu, 1.0).unwrap(),
        }
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean_infer(&[20.0, 22.0]).unwrap(), 21.0);
        assert_eq!(mean_infer(&[20.0]).unwrap(), 20.0);
        assert!(mean_infer(&[]).is_err());
    }

    #[test]
    fn wa_weight_examples() {
        assert_eq!(compute_wa_weights(&[1.0; 4]).unwrap(), [0.25; 4]);
        let w = compute_wa_weights(&[1.0, 2.0]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(compute_wa_weights(&[1.0, 0.0]).is_err());
        assert!(compute_wa_weights(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn published_weights_reproduced_from_inverse_errors() {
        let published = [0.144, 0.08, 0.262, 0.141, 0.136, 0.237];
        let errors: Vec<f64> = published.iter().map(|w| 1.0 / w).collect();
        let w = compute_wa_weights(&errors).unwrap();
        let total: f64 = published.iter().sum();
        for (a, b) in w.iter().zip(published) {
            assert!((a - b / total).abs() < 1e-12);
            assert!((a - b).abs() < 5e-4);
        }
    }

    #[test]
    fn weighted_average_examples() {
        let ws: BTreeMap<String, f64> = [
            ("a".to_owned(), 0.75),
            ("b".to_owned(), 0.25),
            ("c".to_owned(), 0.5),
        ]
        .into();
        let g = [sourced("a", 20.0), sourced("b", 22.0)];
        assert_eq!(weighted_average(&g, &ws).unwrap(), 20.5);
        assert_eq!(weighted_average(&g[..1], &ws).unwrap(), 20.0);
        let same = [sourced("a", 18.0), sourced("b", 18.0), sourced("c", 18.0)];
        assert_eq!(weighted_average(&same, &ws).unwrap(), 18.0);
        assert!(weighted_average(&[sourced("z", 1.0)], &ws).is_err());
    }

    #[test]
    fn mv_examples() {
        assert!((mv_infer(&[20.0, 20.1, 25.0], 2).unwrap() - 20.05).abs() < 1e-12);
        assert_eq!(mv_infer(&[20.0, 21.0], 3).unwrap(), 20.5);
        assert_eq!(mv_infer(&[17.3], 2).unwrap(), 17.3);
        assert_eq!(mv_infer(&[17.3], 3).unwrap(), 17.3);
    }
}
