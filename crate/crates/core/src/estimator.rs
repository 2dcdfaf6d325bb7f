//! Per-phone ambient temperature estimator: 9 features to a Gaussian
//! `(mu, sigma)` answer, trained by minimizing the Gaussian NLL.

use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{normalize, NormStats, PhoneDataset, Sample, N_FEATURES};
use crate::error::{Error, Result};
use crate::nn::{
    sigma_from_raw, GradientVector, Loss, Network, OptimizerKind, OptimizerState, ParamVector,
    SIGMA_MIN,
};
use crate::rng::{derive, rng};
use crate::stats;

/// One device's estimate and its uncertainty, both in °C.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub mu: f64,
    pub sigma: f64,
}

impl Answer {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma < SIGMA_MIN {
            return Err(Error::contract(format!(
                "answer ({mu}, {sigma}) must be finite with sigma >= {SIGMA_MIN}"
            )));
        }
        Ok(Self { mu, sigma })
    }

    pub(crate) fn from_output(out: &[f64], layer: &str) -> Result<Self> {
        let (mu, sigma) = (out[0], sigma_from_raw(out[1]));
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::numerical(
                layer,
                format!("non-finite answer ({mu}, {sigma})"),
            ));
        }
        Ok(Self { mu, sigma })
    }
}

pub fn estimator_network() -> &'static Network {
    static NET: OnceLock<Network> = OnceLock::new();
    NET.get_or_init(Network::estimator)
}

/// Normalized inputs and raw °C targets, ready for repeated passes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSet {
    pub inputs: Vec<[f64; N_FEATURES]>,
    pub targets: Vec<f64>,
}

impl EncodedSet {
    pub fn new(samples: &[Sample], norm: &NormStats) -> Self {
        Self {
            inputs: samples.iter().map(|s| normalize(s, norm)).collect(),
            targets: samples.iter().map(|s| s.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i]).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

pub fn predict_encoded(params: &ParamVector, input: &[f64; N_FEATURES]) -> Result<Answer> {
    let out = estimator_network().forward(params, input)?;
    Answer::from_output(&out, "sigma_head")
}

/// Mean NLL over `set`.
pub fn mean_nll(params: &ParamVector, set: &EncodedSet) -> Result<f64> {
    let net = estimator_network();
    let mut total = 0.0;
    for (x, t) in set.inputs.iter().zip(&set.targets) {
        total += net.loss(params, x, *t, Loss::GaussianNll)?;
    }
    Ok(total / set.len() as f64)
}

/// Mean NLL and its gradient over the rows `idx` of `set` (all rows if `None`).
pub fn mean_nll_grad(
    params: &ParamVector,
    set: &EncodedSet,
    idx: Option<&[usize]>,
) -> Result<(f64, GradientVector)> {
    let net = estimator_network();
    let mut g = vec![0.0; net.param_count()];
    let mut total = 0.0;
    let mut step = |i: usize| -> Result<()> {
        let tape = net.forward_tape(params, &set.inputs[i])?;
        total += Loss::GaussianNll.value(tape.output(), set.targets[i])?;
        let d = Loss::GaussianNll.output_grad(tape.output(), set.targets[i])?;
        net.backward_tape(params, &tape, &d, &mut g)?;
        Ok(())
    };
    let n = match idx {
        Some(rows) => {
            rows.iter().try_for_each(|&i| step(i))?;
            rows.len()
        }
        None => {
            (0..set.len()).try_for_each(&mut step)?;
            set.len()
        }
    };
    if n == 0 {
        return Err(Error::contract("gradient over an empty batch"));
    }
    let inv = 1.0 / n as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("estimator", "non-finite batch gradient"));
    }
    Ok((total * inv, GradientVector::new(net.layout().clone(), g)?))
}

pub fn mae_encoded(params: &ParamVector, set: &EncodedSet) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in set.inputs.iter().zip(&set.targets) {
        total += (predict_encoded(params, x)?.mu - t).abs();
    }
    Ok(total / set.len() as f64)
}

/// Seeded initialization with the output biases placed at the label scale:
/// the mu head starts at the mean label and sigma at the label spread.
pub fn init_params(targets: &[f64], seed: u64) -> ParamVector {
    let mut p = estimator_network().init_params(&mut rng(seed));
    if !targets.is_empty() {
        let spread = stats::std_dev(targets).max(0.1);
        p.tensor_mut("mu_head.bias").expect("mu head")[0] = stats::mean(targets);
        // inverse softplus
        p.tensor_mut("sigma_head.bias").expect("sigma head")[0] =
            (spread - SIGMA_MIN).exp_m1().ln();
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorModel {
    pub phone_id: String,
    pub params: ParamVector,
    pub norm: NormStats,
}

const MODEL_FORMAT: &str = "crowdtemp-estimator/1";

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    format: String,
    sigma_min: f64,
    #[serde(flatten)]
    model: EstimatorModel,
}

impl EstimatorModel {
    pub fn new(phone_id: impl Into<String>, params: ParamVector, norm: NormStats) -> Result<Self> {
        params.check_layout(estimator_network().layout())?;
        Ok(Self {
            phone_id: phone_id.into(),
            params,
            norm,
        })
    }

    pub fn zeros(phone_id: impl Into<String>, norm: NormStats) -> Self {
        Self {
            phone_id: phone_id.into(),
            params: ParamVector::zeros(estimator_network().layout().clone()),
            norm,
        }
    }

    pub fn predict(&self, sample: &Sample) -> Result<Answer> {
        predict_encoded(&self.params, &normalize(sample, &self.norm))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelRecord {
            format: MODEL_FORMAT.to_owned(),
            sigma_min: SIGMA_MIN,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: ModelRecord = serde_json::from_str(text)?;
        if rec.format != MODEL_FORMAT {
            return Err(Error::contract(format!(
                "unknown model format `{}`",
                rec.format
            )));
        }
        if rec.sigma_min != SIGMA_MIN {
            return Err(Error::contract(format!(
                "model uses sigma floor {}, this build uses {SIGMA_MIN}",
                rec.sigma_min
            )));
        }
        let m = rec.model;
        EstimatorModel::new(m.phone_id, m.params, m.norm)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn predict(model: &EstimatorModel, sample: &Sample) -> Result<Answer> {
    model.predict(sample)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 64,
            patience: 20,
            holdout_fraction: 0.2,
            max_epochs: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub holdout_nll: f64,
}

/// Per-epoch losses; epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

const DIVERGENCE_NLL: f64 = 1e6;

/// Trains a fresh estimator on `train_set`, holding out a fraction for early
/// stopping.
pub fn train(
    train_set: &PhoneDataset,
    norm: &NormStats,
    config: &TrainConfig,
) -> Result<(EstimatorModel, TrainTrace)> {
    if train_set.len() < 50 {
        return Err(Error::contract(format!(
            "phone `{}` has {} training samples, at least 50 are needed",
            train_set.phone_id,
            train_set.len()
        )));
    }
    let (params, trace) = train_samples(&train_set.samples, norm, None, config)?;
    Ok((
        EstimatorModel::new(&train_set.phone_id, params, norm.clone())?,
        trace,
    ))
}

/// Mini-batch Adam on the Gaussian NLL from `init` (or a fresh label-scaled
/// initialization), keeping the parameters with the best holdout NLL.
pub fn train_samples(
    samples: &[Sample],
    norm: &NormStats,
    init: Option<ParamVector>,
    config: &TrainConfig,
) -> Result<(ParamVector, TrainTrace)> {
    if !(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0) {
        return Err(Error::contract(format!(
            "holdout fraction must be in (0, 1), got {}",
            config.holdout_fraction
        )));
    }
    if samples.len() < 2 || config.batch_size == 0 {
        return Err(Error::contract(
            "training needs at least 2 samples and a batch size >= 1",
        ));
    }
    let all = EncodedSet::new(samples, norm);
    let n = all.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(derive(config.seed, 0)));
    let n_hold = ((config.holdout_fraction * n as f64 + 0.5).floor() as usize).clamp(1, n - 1);
    let (hold_idx, fit_idx) = order.split_at(n_hold);
    let holdout = all.subset(hold_idx);
    let fit = all.subset(fit_idx);

    let mut params = match init {
        Some(p) => {
            p.check_layout(estimator_network().layout())?;
            p
        }
        None => init_params(&fit.targets, derive(config.seed, 1)),
    };
    let mut opt = OptimizerState::new(OptimizerKind::Adam, config.lr, params.len());
    let mut best = params.clone();
    let mut best_hold = mean_nll(&params, &holdout)?;
    let mut trace = TrainTrace {
        records: vec![EpochRecord {
            epoch: 0,
            train_nll: mean_nll(&params, &fit)?,
            holdout_nll: best_hold,
        }],
        best_epoch: 0,
    };
    let mut shuffle_rng = rng(derive(config.seed, 2));
    let mut rows: Vec<usize> = (0..fit.len()).collect();
    let mut since_best = 0;
    let mut epoch = 0;
    while epoch < config.max_epochs && since_best < config.patience {
        epoch += 1;
        rows.shuffle(&mut shuffle_rng);
        for batch in rows.chunks(config.batch_size) {
            let (_, g) = mean_nll_grad(&params, &fit, Some(batch))?;
            opt.step(&mut params, &g)?;
        }
        let train_nll = mean_nll(&params, &fit)?;
        let holdout_nll = mean_nll(&params, &holdout)?;
        if !(train_nll <= DIVERGENCE_NLL) || !(holdout_nll <= DIVERGENCE_NLL) {
            return Err(Error::Training(format!(
                "epoch {epoch}: NLL train {train_nll}, holdout {holdout_nll}"
            )));
        }
        trace.records.push(EpochRecord {
            epoch,
            train_nll,
            holdout_nll,
        });
        if holdout_nll < best_hold {
            best_hold = holdout_nll;
            best = params.clone();
            trace.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
    }
    Ok((best, trace))
}

/// Mean `|mu - label|` over the dataset.
pub fn evaluate_mae(model: &EstimatorModel, dataset: &PhoneDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::contract("MAE over an empty dataset"));
    }
    mae_encoded(
        &model.params,
        &EncodedSet::new(&dataset.samples, &model.norm),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    /// Set when either side had constant ranks and `rho` was forced to 0.
    pub degenerate: bool,
}

/// Spearman correlation between predicted sigma and absolute error.
pub fn uncertainty_bias_correlation(
    model: &EstimatorModel,
    dataset: &PhoneDataset,
) -> Result<Correlation> {
    if dataset.len() < 30 {
        return Err(Error::contract(format!(
            "correlation needs at least 30 samples, got {}",
            dataset.len()
        )));
    }
    let mut sigma = Vec::with_capacity(dataset.len());
    let mut err = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let a = model.predict(s)?;
        sigma.push(a.sigma);
        err.push((a.mu - s.label).abs());
    }
    Ok(correlation(&sigma, &err))
}

pub fn correlation(sigma: &[f64], abs_err: &[f64]) -> Correlation {
    match stats::spearman(sigma, abs_err) {
        Some(rho) => Correlation {
            rho,
            degenerate: false,
        },
        None => Correlation {
            rho: 0.0,
            degenerate: true,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{fit_normalizer, Role};

    fn sample(x: f64, label: f64) -> Sample {
        Sample::from_features([0.0, 3.9, x, 10.0, 0.0, 0.0, 10.0, x, x], label)
    }

    #[test]
    fn zero_model_predicts_floor_sigma() {
        let m = EstimatorModel::zeros("p", NormStats::identity());
        let a = m.predict(&sample(25.0, 20.0)).unwrap();
        assert_eq!(a.mu, 0.0);
        assert!((a.sigma - 0.694_147).abs() < 1e-6);
        assert_eq!(a, m.predict(&sample(25.0, 20.0)).unwrap());
    }

    #[test]
    fn answer_validation() {
        assert!(Answer::new(1.0, 0.0).is_err());
        assert!(Answer::new(f64::NAN, 1.0).is_err());
        assert!(Answer::new(1.0, SIGMA_MIN).is_ok());
    }

    #[test]
    fn mae_of_shifted_predictor() {
        // mu = x exactly: route f3 straight through with unit ReLU paths.
        let mut m = EstimatorModel::zeros("p", NormStats::identity());
        m.params.tensor_mut("embed1.weight").unwrap()[2] = 1.0;
        m.params.tensor_mut("embed2.weight").unwrap()[0] = 1.0;
        m.params.tensor_mut("mu_head.weight").unwrap()[0] = 1.0;
        let perfect: Vec<_> = (0..5)
            .map(|i| sample(20.0 + i as f64, 20.0 + i as f64))
            .collect();
        let ds = PhoneDataset::new("p", Role::Contributor, perfect.clone()).unwrap();
        assert_eq!(evaluate_mae(&m, &ds).unwrap(), 0.0);
        let shifted: Vec<_> = perfect
            .iter()
            .map(|s| s.with_label(s.label - 1.0))
            .collect();
        let ds = PhoneDataset::new("p", Role::Contributor, shifted).unwrap();
        assert!((evaluate_mae(&m, &ds).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_flags_constant_sigma() {
        let c = correlation(&[1.0; 40], &(0..40).map(|i| i as f64).collect::<Vec<_>>());
        assert!(c.degenerate);
        assert_eq!(c.rho, 0.0);
        let e: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let c = correlation(&e, &e);
        assert!(!c.degenerate);
        assert!((c.rho - 1.0).abs() < 1e-12);
    }

    fn toy_dataset(n: usize, seed: u64) -> PhoneDataset {
        use rand::Rng;
        let mut r = rng(seed);
        let samples = (0..n)
            .map(|_| {
                let t: f64 = r.random_range(15.0..30.0);
                let noisy = r.random_bool(0.3);
                let x = t
                    + 2.0
                    + if noisy {
                        r.random_range(-1.5..1.5)
                    } else {
                        0.0
                    };
                let mut s = sample(x, t);
                s.screen_on = if noisy { 1.0 } else { 0.0 };
                s
            })
            .collect();
        PhoneDataset::new("toy", Role::Contributor, samples).unwrap()
    }

    #[test]
    fn training_beats_constant_predictor_and_is_deterministic() {
        let ds = toy_dataset(400, 1);
        let norm = fit_normalizer([&ds]).unwrap();
        let cfg = TrainConfig {
            max_epochs: 60,
            ..TrainConfig::default()
        };
        let (m1, trace) = train(&ds, &norm, &cfg).unwrap();
        let (m2, _) = train(&ds, &norm, &cfg).unwrap();
        assert_eq!(m1.params.checksum(), m2.params.checksum());

        // Best constant Gaussian: mean and population std of the targets.
        let labels: Vec<f64> = ds.labels().collect();
        let (mu, sd) = (stats::mean(&labels), stats::std_dev(&labels));
        let const_nll = 0.5 * (2.0 * std::f64::consts::PI).ln() + sd.ln() + 0.5;
        let best = trace.records[trace.best_epoch].holdout_nll;
        assert!(best < const_nll, "{best} vs {const_nll} (mu {mu})");
        let last = trace.records.last().unwrap().holdout_nll;
        assert!(best <= last);
    }

    #[test]
    fn zero_patience_returns_initial_model() {
        let ds = toy_dataset(100, 2);
        let norm = fit_normalizer([&ds]).unwrap();
        let cfg = TrainConfig {
            patience: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let (m, trace) = train(&ds, &norm, &cfg).unwrap();
        assert_eq!(trace.records.len(), 1);
        let enc = EncodedSet::new(&ds.samples, &norm);
        let mut order: Vec<usize> = (0..enc.len()).collect();
        order.shuffle(&mut rng(derive(5, 0)));
        let fit_targets: Vec<f64> = order[20..].iter().map(|&i| enc.targets[i]).collect();
        assert_eq!(m.params, init_params(&fit_targets, derive(5, 1)));
    }

    #[test]
    fn too_small_training_set_rejected() {
        let ds = toy_dataset(49, 3);
        assert!(train(&ds, &NormStats::identity(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let ds = toy_dataset(60, 4);
        let norm = fit_normalizer([&ds]).unwrap();
        let m = EstimatorModel::new("C1", init_params(&[20.0, 21.0], 9), norm).unwrap();
        let back = EstimatorModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        assert_eq!(m.params.checksum(), back.params.checksum());
    }
}
