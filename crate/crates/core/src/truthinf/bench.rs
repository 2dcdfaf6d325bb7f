use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::baselines::{mean_infer, mv_infer, weighted_average};
use super::cbts::{cbts_fold, AggregatorModel};
use super::discovery::{ds_infer, pm_infer, zc_infer};
use super::group::{AnswerGroup, AnswerMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Cbts,
    Ds,
    Pm,
    Zc,
    Mv2,
    Mv3,
    Mean,
    Wa,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Cbts,
        Method::Ds,
        Method::Pm,
        Method::Zc,
        Method::Mv2,
        Method::Mv3,
        Method::Mean,
        Method::Wa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cbts => "CBTS",
            Method::Ds => "D&S",
            Method::Pm => "PM",
            Method::Zc => "ZC",
            Method::Mv2 => "MV-2",
            Method::Mv3 => "MV-3",
            Method::Mean => "Mean",
            Method::Wa => "WA",
        }
    }
}

/// Every method's estimate for every group, in group order.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub sizes: Vec<usize>,
    pub truths: Vec<f64>,
    pub estimates: BTreeMap<Method, Vec<f64>>,
}

impl BenchResult {
    /// MAE of `method` over groups of `size`, or over all groups for `None`.
    /// `None` is returned when no group has that size.
    pub fn mae(&self, method: Method, size: Option<usize>) -> Option<f64> {
        let est = self.estimates.get(&method)?;
        let mut total = 0.0;
        let mut n = 0usize;
        for ((e, t), s) in est.iter().zip(&self.truths).zip(&self.sizes) {
            if size.is_none_or(|k| k == *s) {
                total += (e - t).abs();
                n += 1;
            }
        }
        (n > 0).then(|| total / n as f64)
    }
}

/// Runs all eight aggregation methods over labelled groups.
pub fn benchmark(
    groups: &[AnswerGroup],
    cbts: &AggregatorModel,
    wa_weights: &BTreeMap<String, f64>,
    ds_bins: usize,
) -> Result<BenchResult> {
    let truths = groups
        .iter()
        .map(|g| {
            g.truth
                .ok_or_else(|| Error::contract("benchmark group without a true label"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut estimates = BTreeMap::new();
    let per_group = |f: &dyn Fn(&AnswerGroup) -> Result<f64>| -> Result<Vec<f64>> {
        groups.iter().map(f).collect()
    };
    estimates.insert(Method::Cbts, per_group(&|g| Ok(cbts_fold(cbts, g)?.mu))?);
    estimates.insert(Method::Mv2, per_group(&|g| mv_infer(&g.mus(), 2))?);
    estimates.insert(Method::Mv3, per_group(&|g| mv_infer(&g.mus(), 3))?);
    estimates.insert(Method::Mean, per_group(&|g| mean_infer(&g.mus()))?);
    estimates.insert(
        Method::Wa,
        per_group(&|g| weighted_average(&g.answers, wa_weights))?,
    );
    let matrix = AnswerMatrix::from_groups(groups);
    estimates.insert(Method::Pm, pm_infer(&matrix)?);
    estimates.insert(Method::Ds, ds_infer(&matrix, ds_bins)?);
    estimates.insert(Method::Zc, zc_infer(&matrix)?);
    Ok(BenchResult {
        sizes: groups.iter().map(|g| g.len()).collect(),
        truths,
        estimates,
    })
}
