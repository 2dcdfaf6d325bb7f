//! The learned tree-structured aggregator. A small network merges two answers
//! into one; a group is reduced by folding it in ascending `(sigma, mu)` order.
//!
//! The pair network sees `(mu_a - c, sigma_a, mu_b - c, sigma_b)` with `c` the
//! midpoint of the two estimates and its mu output is added back to `c`. This
//! keeps the inputs small and makes the untrained model behave like a pairwise
//! mean rather than a constant.

use std::cmp::Ordering;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::group::AnswerGroup;
use crate::error::{Error, Result};
use crate::estimator::Answer;
use crate::nn::{
    gaussian_nll, gaussian_nll_grad, sigmoid, GradientVector, Network, OptimizerKind,
    OptimizerState, ParamVector, Tape, SIGMA_MIN,
};
use crate::rng::{derive, rng};

pub fn aggregator_network() -> &'static Network {
    static NET: OnceLock<Network> = OnceLock::new();
    NET.get_or_init(Network::aggregator)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorModel {
    pub params: ParamVector,
}

const MODEL_FORMAT: &str = "crowdtemp-aggregator/1";

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    format: String,
    sigma_min: f64,
    params: ParamVector,
}

impl AggregatorModel {
    pub fn new(params: ParamVector) -> Result<Self> {
        params.check_layout(aggregator_network().layout())?;
        Ok(Self { params })
    }

    pub fn zeros() -> Self {
        Self {
            params: ParamVector::zeros(aggregator_network().layout().clone()),
        }
    }

    pub fn init(seed: u64) -> Self {
        Self {
            params: aggregator_network().init_params(&mut rng(seed)),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelRecord {
            format: MODEL_FORMAT.to_owned(),
            sigma_min: SIGMA_MIN,
            params: self.params.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: ModelRecord = serde_json::from_str(text)?;
        if rec.format != MODEL_FORMAT || rec.sigma_min != SIGMA_MIN {
            return Err(Error::contract(format!(
                "unsupported aggregator record `{}` (sigma floor {})",
                rec.format, rec.sigma_min
            )));
        }
        Self::new(rec.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn pair_input(a: &Answer, b: &Answer) -> ([f64; 4], f64) {
    let c = 0.5 * (a.mu + b.mu);
    ([a.mu - c, a.sigma, b.mu - c, b.sigma], c)
}

fn check_answer(a: &Answer) -> Result<()> {
    if a.mu.is_finite() && a.sigma.is_finite() && a.sigma >= SIGMA_MIN {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "invalid answer ({}, {})",
            a.mu, a.sigma
        )))
    }
}

pub fn agg_pair(model: &AggregatorModel, a: &Answer, b: &Answer) -> Result<Answer> {
    check_answer(a)?;
    check_answer(b)?;
    let (x, c) = pair_input(a, b);
    let out = aggregator_network().forward(&model.params, &x)?;
    Answer::from_output(&[c + out[0], out[1]], "embed2")
}

/// Anything that merges two answers into one. Lets tests count invocations.
pub trait PairAggregator {
    fn merge(&self, a: &Answer, b: &Answer) -> Result<Answer>;
}

impl PairAggregator for AggregatorModel {
    fn merge(&self, a: &Answer, b: &Answer) -> Result<Answer> {
        agg_pair(self, a, b)
    }
}

fn fold_order(a: &Answer, b: &Answer) -> Ordering {
    a.sigma.total_cmp(&b.sigma).then(a.mu.total_cmp(&b.mu))
}

pub fn sorted_for_fold(answers: &[Answer]) -> Vec<Answer> {
    let mut v = answers.to_vec();
    v.sort_by(fold_order);
    v
}

/// Left fold over the answers in ascending `(sigma, mu)` order.
pub fn cbts_fold_with<A: PairAggregator + ?Sized>(agg: &A, answers: &[Answer]) -> Result<Answer> {
    let sorted = sorted_for_fold(answers);
    let mut it = sorted.iter();
    let mut acc = *it
        .next()
        .ok_or_else(|| Error::contract("cannot fold an empty group"))?;
    for a in it {
        acc = agg.merge(&acc, a)?;
    }
    Ok(acc)
}

pub fn cbts_fold(model: &AggregatorModel, group: &AnswerGroup) -> Result<Answer> {
    cbts_fold_with(model, &group.plain())
}

/// NLL of the folded answer against `target` and its parameter gradient,
/// back-propagated through every pair merge.
pub fn fold_nll_grad(
    params: &ParamVector,
    answers: &[Answer],
    target: f64,
    grads: &mut [f64],
) -> Result<f64> {
    let net = aggregator_network();
    let sorted = sorted_for_fold(answers);
    if sorted.len() < 2 {
        let a = sorted
            .first()
            .ok_or_else(|| Error::contract("cannot fold an empty group"))?;
        return gaussian_nll(a.mu, a.sigma, target);
    }
    let mut tapes: Vec<Tape> = Vec::with_capacity(sorted.len() - 1);
    let mut acc = sorted[0];
    for b in &sorted[1..] {
        let (x, c) = pair_input(&acc, b);
        let tape = net.forward_tape(params, &x)?;
        let out = tape.output();
        acc = Answer::from_output(&[c + out[0], out[1]], "embed2")?;
        tapes.push(tape);
    }
    let loss = gaussian_nll(acc.mu, acc.sigma, target)?;
    let (mut d_mu, mut d_sigma) = gaussian_nll_grad(acc.mu, acc.sigma, target)?;
    for tape in tapes.iter().rev() {
        let raw_sigma = tape.output()[1];
        let d_out = [d_mu, d_sigma * sigmoid(raw_sigma)];
        let d_in = net.backward_tape(params, tape, &d_out, grads)?;
        // The left operand of this merge is the previous accumulator.
        // mu_out = c + o0, c = (mu_a + mu_b) / 2, x0 = (mu_a - mu_b) / 2 = -x2.
        d_mu = 0.5 * d_mu + 0.5 * (d_in[0] - d_in[2]);
        d_sigma = d_in[1];
    }
    Ok(loss)
}

fn mean_fold_nll(params: &ParamVector, groups: &[(Vec<Answer>, f64)]) -> Result<f64> {
    let model = AggregatorModel {
        params: params.clone(),
    };
    let mut total = 0.0;
    for (answers, t) in groups {
        let a = cbts_fold_with(&model, answers)?;
        total += gaussian_nll(a.mu, a.sigma, *t)?;
    }
    Ok(total / groups.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbtsConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for CbtsConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            patience: 20,
            max_epochs: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbtsEpoch {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CbtsTrace {
    pub records: Vec<CbtsEpoch>,
    pub best_epoch: usize,
}

fn labelled(groups: &[AnswerGroup], what: &str) -> Result<Vec<(Vec<Answer>, f64)>> {
    if groups.is_empty() {
        return Err(Error::contract(format!("no {what} groups")));
    }
    groups
        .iter()
        .map(|g| {
            g.truth
                .map(|t| (g.plain(), t))
                .ok_or_else(|| Error::contract(format!("{what} group without a true label")))
        })
        .collect()
}

/// Adam on the NLL of each group's folded answer, with early stopping on the
/// validation groups.
pub fn cbts_train(
    train_groups: &[AnswerGroup],
    val_groups: &[AnswerGroup],
    config: &CbtsConfig,
) -> Result<(AggregatorModel, CbtsTrace)> {
    let train = labelled(train_groups, "training")?;
    let val = labelled(val_groups, "validation")?;
    if config.batch_size == 0 {
        return Err(Error::contract("batch size must be >= 1"));
    }
    let net = aggregator_network();
    let mut params = AggregatorModel::init(derive(config.seed, 0)).params;
    let mut opt = OptimizerState::new(OptimizerKind::Adam, config.lr, params.len());
    let mut best = params.clone();
    let mut best_val = mean_fold_nll(&params, &val)?;
    let mut trace = CbtsTrace {
        records: vec![CbtsEpoch {
            epoch: 0,
            train_nll: mean_fold_nll(&params, &train)?,
            val_nll: best_val,
        }],
        best_epoch: 0,
    };
    let mut shuffle_rng = rng(derive(config.seed, 1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0;
    let mut epoch = 0;
    while epoch < config.max_epochs && since_best < config.patience {
        epoch += 1;
        order.shuffle(&mut shuffle_rng);
        let mut train_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut g = vec![0.0; net.param_count()];
            for &i in batch {
                train_total += fold_nll_grad(&params, &train[i].0, train[i].1, &mut g)?;
            }
            let inv = 1.0 / batch.len() as f64;
            g.iter_mut().for_each(|v| *v *= inv);
            opt.step(&mut params, &GradientVector::new(net.layout().clone(), g)?)?;
        }
        let train_nll = train_total / train.len() as f64;
        let val_nll = mean_fold_nll(&params, &val)?;
        if !(train_nll <= 1e6) || !(val_nll <= 1e6) {
            return Err(Error::Training(format!(
                "aggregator epoch {epoch}: NLL train {train_nll}, validation {val_nll}"
            )));
        }
        trace.records.push(CbtsEpoch {
            epoch,
            train_nll,
            val_nll,
        });
        if val_nll < best_val {
            best_val = val_nll;
            best = params.clone();
            trace.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
    }
    Ok((AggregatorModel { params: best }, trace))
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use rand::Rng;

    use super::*;

    struct Counting<'a> {
        inner: &'a AggregatorModel,
        calls: Cell<usize>,
    }

    impl PairAggregator for Counting<'_> {
        fn merge(&self, a: &Answer, b: &Answer) -> Result<Answer> {
            self.calls.set(self.calls.get() + 1);
            self.inner.merge(a, b)
        }
    }

    fn random_answers(r: &mut crate::rng::Rng, k: usize) -> Vec<Answer> {
        (0..k)
            .map(|_| Answer::new(r.random_range(15.0..30.0), r.random_range(0.05..2.0)).unwrap())
            .collect()
    }

    #[test]
    fn zero_model_pair_output() {
        let m = AggregatorModel::zeros();
        let a = Answer::new(0.0, 1.0).unwrap();
        let out = agg_pair(&m, &a, &Answer::new(0.0, 0.3).unwrap()).unwrap();
        assert_eq!(out.mu, 0.0);
        assert!((out.sigma - 0.694_147).abs() < 1e-6);
        // The midpoint frame makes an untrained model average.
        let out = agg_pair(
            &m,
            &Answer::new(20.0, 1.0).unwrap(),
            &Answer::new(22.0, 1.0).unwrap(),
        )
        .unwrap();
        assert_eq!(out.mu, 21.0);
    }

    #[test]
    fn fold_counts_and_identity() {
        let m = AggregatorModel::init(3);
        let mut r = rng(1);
        for k in 1..=6 {
            let answers = random_answers(&mut r, k);
            let c = Counting {
                inner: &m,
                calls: Cell::new(0),
            };
            let out = cbts_fold_with(&c, &answers).unwrap();
            assert_eq!(c.calls.get(), k - 1);
            if k == 1 {
                assert_eq!(out, answers[0]);
            }
        }
        assert!(cbts_fold_with(&m, &[]).is_err());
    }

    #[test]
    fn fold_is_permutation_invariant() {
        let m = AggregatorModel::init(4);
        let mut r = rng(2);
        for _ in 0..50 {
            let mut answers = random_answers(&mut r, 5);
            let a = cbts_fold_with(&m, &answers).unwrap();
            answers.shuffle(&mut r);
            assert_eq!(a, cbts_fold_with(&m, &answers).unwrap());
        }
    }

    #[test]
    fn fold_gradient_matches_finite_differences() {
        let mut r = rng(7);
        for seed in 0..20 {
            let params = AggregatorModel::init(seed).params;
            let answers = random_answers(&mut r, 2 + (seed as usize % 5));
            let target = r.random_range(15.0..30.0);
            let mut g = vec![0.0; params.len()];
            fold_nll_grad(&params, &answers, target, &mut g).unwrap();
            let h = 1e-6;
            let mut probe = params.clone();
            for (i, &gi) in g.iter().enumerate() {
                let orig = probe.values()[i];
                probe.values_mut()[i] = orig + h;
                let up = mean_fold_nll(&probe, &[(answers.clone(), target)]).unwrap();
                probe.values_mut()[i] = orig - h;
                let down = mean_fold_nll(&probe, &[(answers.clone(), target)]).unwrap();
                probe.values_mut()[i] = orig;
                let num = (up - down) / (2.0 * h);
                let denom = gi.abs().max(num.abs()).max(1e-8);
                assert!((gi - num).abs() / denom < 1e-4, "param {i}: {gi} vs {num}");
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let m = AggregatorModel::init(11);
        assert_eq!(
            AggregatorModel::from_json(&m.to_json().unwrap()).unwrap(),
            m
        );
    }
}
