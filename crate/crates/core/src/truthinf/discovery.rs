//! Iterative truth-discovery baselines over many groups at once: PM
//! (reliability-weighted means), D&S (EM over discretized answers) and ZC
//! (EM with a scalar reliability per phone).

use super::group::AnswerMatrix;
use crate::error::Result;

const MAX_ITERS: usize = 100;
const TOLERANCE: f64 = 1e-6;

fn group_means(m: &AnswerMatrix) -> Vec<f64> {
    m.groups
        .iter()
        .map(|g| g.iter().map(|&(_, mu)| mu).sum::<f64>() / g.len() as f64)
        .collect()
}

/// PM: alternate per-phone weights `-ln(dist_n / sum dist)` and weighted means.
pub fn pm_infer(m: &AnswerMatrix) -> Result<Vec<f64>> {
    Ok(pm_infer_with_weights(m)?.0)
}

/// As [`pm_infer`], also returning the final per-phone weights.
pub fn pm_infer_with_weights(m: &AnswerMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    m.check()?;
    let n_phones = m.phones.len();
    let mut truths = group_means(m);
    let mut weights = vec![1.0 / n_phones as f64; n_phones];
    for _ in 0..MAX_ITERS {
        let mut dist = vec![0.0; n_phones];
        let mut present = vec![false; n_phones];
        for (g, t) in m.groups.iter().zip(&truths) {
            for &(p, mu) in g {
                dist[p] += (mu - t).powi(2);
                present[p] = true;
            }
        }
        let total: f64 = dist.iter().sum();
        if total > 0.0 {
            for p in 0..n_phones {
                weights[p] = if present[p] {
                    (-(dist[p] / total).max(f64::MIN_POSITIVE).ln()).max(1e-6)
                } else {
                    0.0
                };
            }
            let s: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= s);
        }
        let mut change = 0.0_f64;
        for (g, t) in m.groups.iter().zip(truths.iter_mut()) {
            let (mut num, mut den) = (0.0, 0.0);
            for &(p, mu) in g {
                num += weights[p] * mu;
                den += weights[p];
            }
            let next = num / den;
            change = change.max((next - *t).abs());
            *t = next;
        }
        if change < TOLERANCE {
            break;
        }
    }
    Ok((truths, weights))
}

/// D&S over `n_bins` equal-width bins spanning all answers; each group gets
/// the centre of its posterior-mode bin. One bin returns the centre of the
/// global range; a zero-width range falls back to group means.
pub fn ds_infer(m: &AnswerMatrix, n_bins: usize) -> Result<Vec<f64>> {
    m.check()?;
    let all = m.groups.iter().flatten().map(|&(_, mu)| mu);
    let lo = all.clone().fold(f64::INFINITY, f64::min);
    let hi = all.fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(group_means(m));
    }
    if n_bins <= 1 {
        return Ok(vec![0.5 * (lo + hi); m.groups.len()]);
    }
    let k = n_bins;
    let width = (hi - lo) / k as f64;
    let bin = |mu: f64| (((mu - lo) / width) as usize).min(k - 1);
    let labels: Vec<Vec<(usize, usize)>> = m
        .groups
        .iter()
        .map(|g| g.iter().map(|&(p, mu)| (p, bin(mu))).collect())
        .collect();
    let n_phones = m.phones.len();

    // Posterior over true bins per group, initialized by vote shares.
    let mut post: Vec<Vec<f64>> = labels
        .iter()
        .map(|g| {
            let mut v = vec![0.0; k];
            for &(_, l) in g {
                v[l] += 1.0 / g.len() as f64;
            }
            v
        })
        .collect();
    let smoothing = 0.01;
    for _ in 0..MAX_ITERS {
        // M-step: class priors and per-phone confusion matrices.
        let mut prior = vec![smoothing; k];
        let mut conf = vec![vec![vec![smoothing; k]; k]; n_phones];
        for (g, pg) in labels.iter().zip(&post) {
            for c in 0..k {
                prior[c] += pg[c];
            }
            for &(p, l) in g {
                for c in 0..k {
                    conf[p][c][l] += pg[c];
                }
            }
        }
        let ps: f64 = prior.iter().sum();
        let log_prior: Vec<f64> = prior.iter().map(|v| (v / ps).ln()).collect();
        let log_conf: Vec<Vec<Vec<f64>>> = conf
            .into_iter()
            .map(|rows| {
                rows.into_iter()
                    .map(|row| {
                        let s: f64 = row.iter().sum();
                        row.into_iter().map(|v| (v / s).ln()).collect()
                    })
                    .collect()
            })
            .collect();
        // E-step.
        let mut change = 0.0_f64;
        for (g, pg) in labels.iter().zip(post.iter_mut()) {
            let mut lp = log_prior.clone();
            for &(p, l) in g {
                for c in 0..k {
                    lp[c] += log_conf[p][c][l];
                }
            }
            let mx = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = lp.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..k {
                let next = (lp[c] - mx).exp() / z;
                change = change.max((next - pg[c]).abs());
                pg[c] = next;
            }
        }
        if change < TOLERANCE {
            break;
        }
    }
    Ok(post
        .iter()
        .map(|pg| {
            let c = (0..k)
                .max_by(|&a, &b| pg[a].total_cmp(&pg[b]).then(b.cmp(&a)))
                .expect("k >= 2");
            lo + (c as f64 + 0.5) * width
        })
        .collect())
}

/// Distance below which an answer supports a candidate truth, °C.
pub const ZC_SUPPORT: f64 = 0.5;

/// ZC: candidates are the group's own answers; a phone of reliability `r`
/// contributes `r` to candidates it supports and `1 - r` otherwise. Returns
/// the posterior-weighted mean of candidates.
pub fn zc_infer(m: &AnswerMatrix) -> Result<Vec<f64>> {
    m.check()?;
    let n_phones = m.phones.len();
    let mut rel = vec![0.8_f64; n_phones];
    let mut truths = group_means(m);
    for _ in 0..MAX_ITERS {
        let mut hits = vec![0.0_f64; n_phones];
        let mut counts = vec![0.0; n_phones];
        let mut change = 0.0_f64;
        for (g, t) in m.groups.iter().zip(truths.iter_mut()) {
            let logp: Vec<f64> = g
                .iter()
                .map(|&(_, cand)| {
                    g.iter()
                        .map(|&(p, mu)| {
                            if (mu - cand).abs() < ZC_SUPPORT {
                                rel[p].ln()
                            } else {
                                (1.0 - rel[p]).ln()
                            }
                        })
                        .sum::<f64>()
                })
                .collect();
            let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logp.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            let next = g.iter().zip(&w).map(|(&(_, c), wi)| c * wi).sum::<f64>() / z;
            change = change.max((next - *t).abs());
            *t = next;
            for &(p, mu) in g {
                let support: f64 = g
                    .iter()
                    .zip(&w)
                    .filter(|(&(_, c), _)| (mu - c).abs() < ZC_SUPPORT)
                    .map(|(_, wi)| wi / z)
                    .sum();
                hits[p] += support;
                counts[p] += 1.0;
            }
        }
        let mut rel_change = 0.0_f64;
        for p in 0..n_phones {
            if counts[p] > 0.0 {
                let next = (hits[p] / counts[p]).clamp(1e-3, 1.0 - 1e-3);
                rel_change = rel_change.max((next - rel[p]).abs());
                rel[p] = next;
            }
        }
        if change < TOLERANCE && rel_change < TOLERANCE {
            break;
        }
    }
    Ok(truths)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng::rng;

    fn matrix(groups: Vec<Vec<(usize, f64)>>, n_phones: usize) -> AnswerMatrix {
        AnswerMatrix {
            phones: (0..n_phones).map(|i| format!("p{i}")).collect(),
            groups,
        }
    }

    #[test]
    fn pm_unanimous_is_fixed_point() {
        let m = matrix(
            vec![
                vec![(0, 20.0), (1, 20.0)],
                vec![(0, 25.5), (1, 25.5), (2, 25.5)],
            ],
            3,
        );
        assert_eq!(pm_infer(&m).unwrap(), [20.0, 25.5]);
    }

    #[test]
    fn pm_single_group_within_range() {
        let m = matrix(vec![vec![(0, 20.0), (1, 23.0)]], 2);
        let t = pm_infer(&m).unwrap()[0];
        assert!((20.0..=23.0).contains(&t));
    }

    #[test]
    fn pm_downweights_offset_phone() {
        let mut r = rng(3);
        let groups = (0..300)
            .map(|_| {
                let truth: f64 = r.random_range(12.0..35.0);
                (0..5)
                    .map(|p| {
                        let noise = r.random_range(-0.3..0.3);
                        (p, truth + noise + if p == 4 { 5.0 } else { 0.0 })
                    })
                    .collect()
            })
            .collect();
        let (_, w) = pm_infer_with_weights(&matrix(groups, 5)).unwrap();
        assert!(w[..4].iter().all(|&wi| w[4] < wi), "{w:?}");
    }

    #[test]
    fn ds_unanimous_and_degenerate() {
        let m = matrix(
            vec![vec![(0, 20.0), (1, 20.0)], vec![(0, 30.0), (1, 30.0)]],
            2,
        );
        let t = ds_infer(&m, 10).unwrap();
        assert!(
            (t[0] - 20.0).abs() <= 0.5 && (t[1] - 30.0).abs() <= 0.5,
            "{t:?}"
        );
        assert_eq!(ds_infer(&m, 1).unwrap(), [25.0, 25.0]);
        let flat = matrix(vec![vec![(0, 21.0), (1, 21.0)]], 2);
        assert_eq!(ds_infer(&flat, 8).unwrap(), [21.0]);
    }

    #[test]
    fn zc_unanimous() {
        let m = matrix(
            vec![
                vec![(0, 20.0), (1, 20.0)],
                vec![(0, 30.0), (1, 30.0), (2, 30.0)],
            ],
            3,
        );
        let t = zc_infer(&m).unwrap();
        assert!((t[0] - 20.0).abs() < 1e-12 && (t[1] - 30.0).abs() < 1e-12);
    }
}
