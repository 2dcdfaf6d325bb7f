use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::{PhoneDataset, Sample, N_FEATURES};
use crate::error::{Error, Result};

/// Seeded uniform split. The train side gets `round_half_up(fraction * n)`
/// samples, clamped so both sides are non-empty. Both sides keep the original
/// sample order.
pub fn split(
    dataset: &PhoneDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(PhoneDataset, PhoneDataset)> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "phone `{}` needs at least 2 samples to split, has {n}",
            dataset.phone_id
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::contract(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = ((train_fraction * n as f64 + 0.5).floor() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &idx[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (s, t) in dataset.samples.iter().zip(&in_train) {
        if *t {
            train.push(*s);
        } else {
            val.push(*s);
        }
    }
    Ok((
        PhoneDataset::new(dataset.phone_id.clone(), dataset.role, train)?,
        PhoneDataset::new(dataset.phone_id.clone(), dataset.role, val)?,
    ))
}

/// Per-feature standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

pub const STD_FLOOR: f64 = 1e-6;

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
        }
    }
}

/// Population mean and standard deviation over every sample of `datasets`.
pub fn fit_normalizer<'a, I>(datasets: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a PhoneDataset>,
{
    let samples: Vec<&Sample> = datasets
        .into_iter()
        .flat_map(|d| d.samples.iter())
        .collect();
    if samples.len() < 2 {
        return Err(Error::contract("normalizer needs at least 2 samples"));
    }
    let n = samples.len() as f64;
    let mut mean = [0.0; N_FEATURES];
    for s in &samples {
        for (m, v) in mean.iter_mut().zip(s.features()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = [0.0; N_FEATURES];
    for s in &samples {
        for ((acc, v), m) in var.iter_mut().zip(s.features()).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let mut std = [0.0; N_FEATURES];
    for (sd, v) in std.iter_mut().zip(var) {
        *sd = (v / n).sqrt().max(STD_FLOOR);
    }
    Ok(NormStats { mean, std })
}

pub fn normalize(sample: &Sample, stats: &NormStats) -> [f64; N_FEATURES] {
    let mut out = sample.features();
    for ((v, m), s) in out.iter_mut().zip(&stats.mean).zip(&stats.std) {
        *v = (*v - m) / s;
    }
    out
}
