use std::collections::BTreeMap;

use crowdtemp::crowdsim::{
    answers_for_group, build_group_set, infer_labels_for_participant, label_quality,
};
use crowdtemp::data::PhoneDataset;
use crowdtemp::estimator::{evaluate_mae, EstimatorModel};
use crowdtemp::rng::derive;
use crowdtemp::truthinf::{
    benchmark, cbts_train, compute_wa_weights, AnswerGroup, BenchResult, CbtsConfig, Method,
};

use super::{
    contributors, ensure_dir, load_cbts, load_corpus, load_registry, participants, Context,
    SplitPhone, CBTS_MODEL, CBTS_TABLE, LABEL_TABLE, TRUTHINF_TABLE,
};
use crate::error::{AtStage, Result, Stage};
use crate::svg::{Chart, Series};
use crate::table::{num, Table};

fn groups_from(
    stage: Stage,
    phones: &[PhoneDataset],
    n: usize,
    seed: u64,
    registry: &BTreeMap<String, EstimatorModel>,
) -> Result<Vec<AnswerGroup>> {
    build_group_set(phones, n, seed)
        .at(stage)?
        .iter()
        .map(|g| answers_for_group(g, registry).at(stage))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbtsSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_nll: f64,
}

/// Trains the aggregator on groups from contributor training data, with early
/// stopping on groups from contributor validation data.
pub fn run_train_cbts(ctx: &Context) -> Result<CbtsSummary> {
    let stage = Stage::TrainCbts;
    let phones = load_corpus(ctx, stage)?;
    let contribs = contributors(&phones);
    let registry = load_registry(ctx, stage, &contribs)?;
    let seed = ctx.seed(stage);
    let c = &ctx.config.cbts;
    let trains: Vec<PhoneDataset> = contribs.iter().map(|p| p.train.clone()).collect();
    let vals: Vec<PhoneDataset> = contribs.iter().map(|p| p.val.clone()).collect();
    let train_groups = groups_from(stage, &trains, c.train_groups, derive(seed, 0), &registry)?;
    let val_groups = groups_from(stage, &vals, c.val_groups, derive(seed, 1), &registry)?;
    let cfg = CbtsConfig {
        seed: derive(seed, 2),
        ..c.training
    };
    let (model, trace) = cbts_train(&train_groups, &val_groups, &cfg).at(stage)?;
    ensure_dir(stage, &ctx.path("models"))?;
    model.save(ctx.path(CBTS_MODEL)).at(stage)?;

    let mut table = Table::new(&["epoch", "train_nll", "val_nll"]);
    for e in &trace.records {
        table.push(vec![e.epoch.to_string(), num(e.train_nll), num(e.val_nll)]);
    }
    ctx.write_table(stage, CBTS_TABLE, &table)?;
    let curve = |f: fn(&crowdtemp::truthinf::CbtsEpoch) -> f64| {
        trace
            .records
            .iter()
            .skip(1)
            .map(|e| (e.epoch as f64, f(e)))
            .collect()
    };
    ctx.write_plot(
        stage,
        "plots/cbts_training.svg",
        &Chart {
            title: "Aggregator training".into(),
            x_label: "epoch".into(),
            y_label: "NLL".into(),
            series: vec![
                Series::line("train", curve(|e| e.train_nll)),
                Series::line("validation", curve(|e| e.val_nll)),
            ],
        },
    )?;
    Ok(CbtsSummary {
        epochs: trace.records.len() - 1,
        best_epoch: trace.best_epoch,
        best_val_nll: trace.records[trace.best_epoch].val_nll,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSummary {
    pub result: BenchResult,
}

impl BenchSummary {
    pub fn mae(&self, method: Method, size: Option<usize>) -> f64 {
        self.result.mae(method, size).unwrap_or(f64::NAN)
    }
}

/// Compares all aggregation methods on fresh groups from contributor
/// validation data, by group size and overall.
pub fn run_truthinf_bench(ctx: &Context) -> Result<BenchSummary> {
    let stage = Stage::TruthinfBench;
    let phones = load_corpus(ctx, stage)?;
    let contribs = contributors(&phones);
    let registry = load_registry(ctx, stage, &contribs)?;
    let cbts = load_cbts(ctx, stage)?;
    let seed = ctx.seed(stage);
    let c = &ctx.config.cbts;
    let vals: Vec<PhoneDataset> = contribs.iter().map(|p| p.val.clone()).collect();
    let groups = groups_from(stage, &vals, c.test_groups, derive(seed, 0), &registry)?;

    let train_maes = contribs
        .iter()
        .map(|p| evaluate_mae(&registry[p.id()], &p.train))
        .collect::<crowdtemp::Result<Vec<_>>>()
        .at(stage)?;
    let weights: BTreeMap<String, f64> = contribs
        .iter()
        .map(|p| p.id().to_owned())
        .zip(compute_wa_weights(&train_maes).at(stage)?)
        .collect();
    let result = benchmark(&groups, &cbts, &weights, c.ds_bins).at(stage)?;

    let mut columns = vec!["group_size", "groups"];
    columns.extend(Method::ALL.iter().map(|m| m.name()));
    let mut table = Table::new(&columns);
    let sizes: Vec<Option<usize>> = (2..=6).map(Some).chain([None]).collect();
    for size in &sizes {
        let count = result
            .sizes
            .iter()
            .filter(|&&s| size.is_none_or(|k| k == s))
            .count();
        let mut row = vec![
            size.map_or("all".into(), |k| k.to_string()),
            count.to_string(),
        ];
        row.extend(
            Method::ALL
                .iter()
                .map(|&m| result.mae(m, *size).map(num).unwrap_or_default()),
        );
        table.push(row);
    }
    ctx.write_table(stage, TRUTHINF_TABLE, &table)?;
    let series = Method::ALL
        .iter()
        .map(|&m| {
            let pts = (2..=6)
                .filter_map(|k| result.mae(m, Some(k)).map(|v| (k as f64, v)))
                .collect();
            Series::line(m.name(), pts)
        })
        .collect();
    ctx.write_plot(
        stage,
        "plots/truthinf.svg",
        &Chart {
            title: "Truth inference MAE by group size".into(),
            x_label: "phones per group".into(),
            y_label: "MAE (°C)".into(),
            series,
        },
    )?;
    Ok(BenchSummary { result })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub phone: String,
    pub samples: usize,
    pub labeled: usize,
    pub skipped: usize,
    pub label_mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSummary {
    pub rows: Vec<LabelRow>,
    /// MAE over every labelled participant sample.
    pub overall_mae: f64,
}

pub(crate) fn label_file(id: &str) -> String {
    format!("labels/{id}.csv")
}

/// Crowd-labels each participant's training split with the aggregator over
/// co-labelled contributor samples.
pub fn run_gen_labels(ctx: &Context) -> Result<LabelSummary> {
    let stage = Stage::GenLabels;
    let phones = load_corpus(ctx, stage)?;
    let contribs = contributors(&phones);
    let registry = load_registry(ctx, stage, &contribs)?;
    let cbts = load_cbts(ctx, stage)?;
    let seed = ctx.seed(stage);
    let full: Vec<PhoneDataset> = contribs.iter().map(|p| p.full.clone()).collect();
    let mut rows = Vec::new();
    let (mut total, mut count) = (0.0, 0usize);
    let mut table = Table::new(&["phone", "samples", "labeled", "skipped", "label_mae"]);
    for (i, p) in participants(&phones).into_iter().enumerate() {
        let inf = infer_labels_for_participant(
            &p.train,
            &full,
            &registry,
            &cbts,
            ctx.config.labels.group_size,
            derive(seed, i as u64),
        )
        .at(stage)?;
        let truths: Vec<f64> = inf.labeled.iter().map(|l| l.sample.label).collect();
        let mae = if inf.labeled.is_empty() {
            f64::NAN
        } else {
            label_quality(&inf.labeled, &truths).at(stage)?
        };
        total += inf
            .labeled
            .iter()
            .map(|l| (l.inferred_label - l.sample.label).abs())
            .sum::<f64>();
        count += inf.labeled.len();

        let mut detail = Table::new(&[
            "sample_index",
            "true_label",
            "inferred_label",
            "inferred_sigma",
            "contributors",
        ]);
        for l in &inf.labeled {
            detail.push(vec![
                l.sample_index.to_string(),
                num(l.sample.label),
                num(l.inferred_label),
                num(l.inferred_sigma),
                l.contributor_count.to_string(),
            ]);
        }
        ctx.write_table(stage, &label_file(p.id()), &detail)?;
        let pts: Vec<(f64, f64)> = inf
            .labeled
            .iter()
            .map(|l| (l.sample.label, l.inferred_label))
            .collect();
        ctx.write_plot(
            stage,
            &format!("plots/labels_{}.svg", p.id()),
            &Chart {
                title: format!("Inferred vs true labels, {}", p.id()),
                x_label: "true label (°C)".into(),
                y_label: "inferred label (°C)".into(),
                series: vec![Series::dots("samples", pts)],
            },
        )?;
        let row = LabelRow {
            phone: p.id().to_owned(),
            samples: p.train.len(),
            labeled: inf.labeled.len(),
            skipped: inf.skipped,
            label_mae: mae,
        };
        table.push(vec![
            row.phone.clone(),
            row.samples.to_string(),
            row.labeled.to_string(),
            row.skipped.to_string(),
            num(row.label_mae),
        ]);
        rows.push(row);
    }
    let overall_mae = if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    };
    let sum = |f: fn(&LabelRow) -> usize| rows.iter().map(f).sum::<usize>().to_string();
    table.push(vec![
        "all".into(),
        sum(|r| r.samples),
        sum(|r| r.labeled),
        sum(|r| r.skipped),
        num(overall_mae),
    ]);
    ctx.write_table(stage, LABEL_TABLE, &table)?;
    Ok(LabelSummary { rows, overall_mae })
}

/// Inferred labels for `phone`'s training split, by sample index.
pub(crate) fn load_inferred_labels(
    ctx: &Context,
    stage: Stage,
    phone: &SplitPhone,
) -> Result<BTreeMap<usize, f64>> {
    let t = ctx.read_table(stage, &label_file(phone.id()), Stage::GenLabels)?;
    let bad = |r: &Vec<String>| {
        crate::error::invalid(stage, format!("bad label row {r:?} for `{}`", phone.id()))
    };
    t.rows
        .iter()
        .map(|r| {
            let i: usize = r[0].parse().map_err(|_| bad(r))?;
            let v: f64 = r[2].parse().map_err(|_| bad(r))?;
            if i >= phone.train.len() {
                return Err(bad(r));
            }
            Ok((i, v))
        })
        .collect()
}
