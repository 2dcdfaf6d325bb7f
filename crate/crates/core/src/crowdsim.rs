//! Crowdsourcing groups built from co-labelled samples of distinct phones, and
//! crowd-inferred labels for a new participant's data.
//!
//! Two samples "share a label" when their labels fall on the same point of a
//! 0.1 °C grid; raw labels are kept for training and metrics.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{PhoneDataset, Sample};
use crate::error::{Error, Result};
use crate::estimator::{Answer, EstimatorModel};
use crate::rng::rng;
use crate::truthinf::{cbts_fold_with, AggregatorModel, AnswerGroup, SourcedAnswer};

pub const LABEL_GRID: f64 = 0.1;
pub const MIN_GROUP: usize = 2;
pub const MAX_GROUP: usize = 6;
pub const GROUP_RETRIES: usize = 100;

pub fn label_key(label: f64) -> i64 {
    (label / LABEL_GRID).round() as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdGroup {
    pub members: Vec<(String, Sample)>,
    pub common_label: f64,
}

/// Per-phone index from label key to sample positions.
struct LabelIndex<'a> {
    phones: Vec<&'a PhoneDataset>,
    by_key: Vec<BTreeMap<i64, Vec<usize>>>,
}

impl<'a> LabelIndex<'a> {
    fn new(phones: &'a [PhoneDataset]) -> Self {
        let by_key = phones
            .iter()
            .map(|d| {
                let mut m: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
                for (i, s) in d.samples.iter().enumerate() {
                    m.entry(label_key(s.label)).or_default().push(i);
                }
                m
            })
            .collect();
        Self {
            phones: phones.iter().collect(),
            by_key,
        }
    }
}

/// Random groups of 2 to 6 contributors sharing one label, one sample each.
pub fn build_group_set(
    contributors: &[PhoneDataset],
    n_groups: usize,
    seed: u64,
) -> Result<Vec<CrowdGroup>> {
    if contributors.len() < MIN_GROUP {
        return Err(Error::Grouping(format!(
            "need at least {MIN_GROUP} contributors, have {}",
            contributors.len()
        )));
    }
    let index = LabelIndex::new(contributors);
    let mut r = rng(seed);
    let all: Vec<usize> = (0..contributors.len()).collect();
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let k = r
            .random_range(MIN_GROUP..=MAX_GROUP)
            .min(contributors.len());
        let mut last = Vec::new();
        let mut made = None;
        for _ in 0..GROUP_RETRIES {
            let mut chosen: Vec<usize> = all.choose_multiple(&mut r, k).copied().collect();
            chosen.sort_unstable();
            let common: Vec<i64> = chosen
                .iter()
                .map(|&p| index.by_key[p].keys().copied().collect::<BTreeSet<_>>())
                .reduce(|a, b| a.intersection(&b).copied().collect())
                .expect("k >= 2")
                .into_iter()
                .collect();
            if let Some(&key) = common.choose(&mut r) {
                let members: Vec<(String, Sample)> = chosen
                    .iter()
                    .map(|&p| {
                        let rows = &index.by_key[p][&key];
                        let row = *rows.choose(&mut r).expect("key present");
                        (
                            index.phones[p].phone_id.clone(),
                            index.phones[p].samples[row],
                        )
                    })
                    .collect();
                let common_label = members[0].1.label;
                made = Some(CrowdGroup {
                    members,
                    common_label,
                });
                break;
            }
            last = chosen;
        }
        match made {
            Some(g) => groups.push(g),
            None => {
                let ids: Vec<&str> = last
                    .iter()
                    .map(|&p| contributors[p].phone_id.as_str())
                    .collect();
                return Err(Error::Grouping(format!(
                    "no common label after {GROUP_RETRIES} draws of {k} phones (last: {})",
                    ids.join(", ")
                )));
            }
        }
    }
    Ok(groups)
}

pub fn answers_for_group(
    group: &CrowdGroup,
    registry: &BTreeMap<String, EstimatorModel>,
) -> Result<AnswerGroup> {
    let answers = group
        .members
        .iter()
        .map(|(id, s)| {
            let m = registry
                .get(id)
                .ok_or_else(|| Error::contract(format!("no estimator for phone `{id}`")))?;
            Ok(SourcedAnswer {
                phone_id: id.clone(),
                answer: m.predict(s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    AnswerGroup::new(answers, Some(group.common_label))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSize {
    Fixed(usize),
    /// Uniform over 2..=6 per sample.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledByCrowd {
    pub sample_index: usize,
    pub sample: Sample,
    pub inferred_label: f64,
    pub inferred_sigma: f64,
    pub contributor_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelInference {
    pub labeled: Vec<LabeledByCrowd>,
    /// Samples for which fewer than two contributors had a matching label.
    pub skipped: usize,
}

impl LabelInference {
    /// The participant samples with their inferred labels in place of the
    /// true ones.
    pub fn relabeled(&self) -> Vec<Sample> {
        self.labeled
            .iter()
            .map(|l| l.sample.with_label(l.inferred_label))
            .collect()
    }
}

/// Labels each participant sample with the aggregated answer of `k` randomly
/// chosen contributor samples that carry the same label. The participant's
/// own label is used only to find co-labelled contributor samples.
pub fn infer_labels_for_participant(
    participant: &PhoneDataset,
    contributors: &[PhoneDataset],
    registry: &BTreeMap<String, EstimatorModel>,
    cbts: &AggregatorModel,
    k: GroupSize,
    seed: u64,
) -> Result<LabelInference> {
    if let GroupSize::Fixed(n) = k {
        if n < MIN_GROUP {
            return Err(Error::contract(format!(
                "group size must be >= {MIN_GROUP}, got {n}"
            )));
        }
    }
    let index = LabelIndex::new(contributors);
    let models = contributors
        .iter()
        .map(|d| {
            registry
                .get(&d.phone_id)
                .ok_or_else(|| Error::contract(format!("no estimator for phone `{}`", d.phone_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut r = rng(seed);
    let mut out = LabelInference::default();
    for (i, s) in participant.samples.iter().enumerate() {
        let want = match k {
            GroupSize::Fixed(n) => n,
            GroupSize::Uniform => r.random_range(MIN_GROUP..=MAX_GROUP),
        };
        let key = label_key(s.label);
        let mut avail: Vec<usize> = (0..contributors.len())
            .filter(|&p| index.by_key[p].contains_key(&key))
            .collect();
        if avail.len() < MIN_GROUP {
            out.skipped += 1;
            continue;
        }
        avail.shuffle(&mut r);
        avail.truncate(want);
        avail.sort_unstable();
        let answers = avail
            .iter()
            .map(|&p| {
                let row = *index.by_key[p][&key].choose(&mut r).expect("key present");
                models[p].predict(&contributors[p].samples[row])
            })
            .collect::<Result<Vec<Answer>>>()?;
        let agg = cbts_fold_with(cbts, &answers)?;
        out.labeled.push(LabeledByCrowd {
            sample_index: i,
            sample: *s,
            inferred_label: agg.mu,
            inferred_sigma: agg.sigma,
            contributor_count: answers.len(),
        });
    }
    Ok(out)
}

/// Mean `|inferred - truth|`, with `truths` aligned to `labeled`.
pub fn label_quality(labeled: &[LabeledByCrowd], truths: &[f64]) -> Result<f64> {
    if labeled.is_empty() || labeled.len() != truths.len() {
        return Err(Error::contract(format!(
            "label quality needs equal non-empty inputs, got {} and {}",
            labeled.len(),
            truths.len()
        )));
    }
    Ok(labeled
        .iter()
        .zip(truths)
        .map(|(l, t)| (l.inferred_label - t).abs())
        .sum::<f64>()
        / labeled.len() as f64)
}
