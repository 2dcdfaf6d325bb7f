use std::collections::BTreeSet;

use crowdtemp::data::{
    fit_normalizer, load_csv, save_csv, synth_corpus, PhoneDataset, Role, SynthPhoneParams,
};
use crowdtemp::estimator::{evaluate_mae, train, uncertainty_bias_correlation, TrainConfig};
use crowdtemp::rng::derive;

use super::{
    contributors, corpus_file, ensure_dir, load_corpus, map_items, model_file, Context,
    CORPUS_TABLE, ESTIMATOR_TABLE,
};
use crate::config::CorpusSource;
use crate::error::{invalid, AtStage, Result, Stage};
use crate::svg::{Chart, Series};
use crate::table::{num, Table};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub phones: Vec<(String, Role, usize)>,
}

fn role_name(r: Role) -> &'static str {
    match r {
        Role::Contributor => "contributor",
        Role::Participant => "participant",
    }
}

/// Writes one corpus file per phone plus the role table.
pub fn run_synth(ctx: &Context) -> Result<SynthSummary> {
    let stage = Stage::Synth;
    let phones: Vec<(PhoneDataset, Option<SynthPhoneParams>)> = match &ctx.config.corpus {
        CorpusSource::Synthetic(spec) => synth_corpus(spec, ctx.seed(stage))
            .at(stage)?
            .into_iter()
            .map(|p| (p.dataset, Some(p.params)))
            .collect(),
        CorpusSource::Csv {
            path,
            contributors,
            participants,
        } => {
            let mut loaded = load_csv(path).at(stage)?;
            let present: BTreeSet<&str> = loaded.iter().map(|d| d.phone_id.as_str()).collect();
            if let Some(id) = contributors
                .iter()
                .chain(participants)
                .find(|id| !present.contains(id.as_str()))
            {
                return Err(invalid(
                    stage,
                    format!(
                        "role list names phone `{id}` absent from {}",
                        path.display()
                    ),
                ));
            }
            for d in &mut loaded {
                d.role = if contributors.contains(&d.phone_id) {
                    Role::Contributor
                } else if participants.contains(&d.phone_id) {
                    Role::Participant
                } else {
                    return Err(invalid(
                        stage,
                        format!("phone `{}` has no role", d.phone_id),
                    ));
                };
            }
            loaded.into_iter().map(|d| (d, None)).collect()
        }
    };
    ensure_dir(stage, &ctx.path("corpus"))?;
    let mut table = Table::new(&[
        "phone",
        "role",
        "samples",
        "tau_s",
        "screen_heating_offset",
        "voltage_heating_coef",
        "sensor_bias",
        "noise_std",
    ]);
    for (d, params) in &phones {
        save_csv(ctx.path(&corpus_file(&d.phone_id)), std::slice::from_ref(d)).at(stage)?;
        let p = |f: fn(&SynthPhoneParams) -> f64| {
            params.as_ref().map(|x| num(f(x))).unwrap_or_default()
        };
        table.push(vec![
            d.phone_id.clone(),
            role_name(d.role).into(),
            d.len().to_string(),
            p(|x| x.tau_s),
            p(|x| x.screen_heating_offset),
            p(|x| x.voltage_heating_coef),
            p(|x| x.sensor_bias),
            p(|x| x.noise_std),
        ]);
    }
    ctx.write_table(stage, CORPUS_TABLE, &table)?;
    Ok(SynthSummary {
        phones: phones
            .iter()
            .map(|(d, _)| (d.phone_id.clone(), d.role, d.len()))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRow {
    pub phone: String,
    pub n_train: usize,
    pub n_val: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    /// Spearman correlation of predicted sigma with absolute validation error.
    pub sigma_bias_rho: f64,
    pub best_epoch: usize,
}

/// Trains one estimator per contributor on its training split.
pub fn run_train_estimators(ctx: &Context) -> Result<Vec<EstimatorRow>> {
    let stage = Stage::TrainEstimators;
    let phones = load_corpus(ctx, stage)?;
    let contribs = contributors(&phones);
    let seed = ctx.seed(stage);
    ensure_dir(stage, &ctx.path("models"))?;
    let results = map_items(&contribs, ctx.deterministic, |i, p| {
        let norm = fit_normalizer([&p.train])?;
        let cfg = TrainConfig {
            seed: derive(seed, i as u64),
            ..ctx.config.estimator
        };
        let (model, trace) = train(&p.train, &norm, &cfg)?;
        let row = EstimatorRow {
            phone: p.id().to_owned(),
            n_train: p.train.len(),
            n_val: p.val.len(),
            train_mae: evaluate_mae(&model, &p.train)?,
            val_mae: evaluate_mae(&model, &p.val)?,
            sigma_bias_rho: uncertainty_bias_correlation(&model, &p.val)?.rho,
            best_epoch: trace.best_epoch,
        };
        Ok::<_, crowdtemp::Error>((model, row, trace))
    });
    let mut table = Table::new(&[
        "phone",
        "n_train",
        "n_val",
        "train_mae",
        "val_mae",
        "sigma_bias_spearman",
        "best_epoch",
    ]);
    let mut rows = Vec::new();
    let mut chart = Chart {
        title: "Estimator holdout NLL".into(),
        x_label: "epoch".into(),
        y_label: "holdout NLL".into(),
        series: Vec::new(),
    };
    for r in results {
        let (model, row, trace) = r.at(stage)?;
        model.save(ctx.path(&model_file(&row.phone))).at(stage)?;
        table.push(vec![
            row.phone.clone(),
            row.n_train.to_string(),
            row.n_val.to_string(),
            num(row.train_mae),
            num(row.val_mae),
            num(row.sigma_bias_rho),
            row.best_epoch.to_string(),
        ]);
        chart.series.push(Series::line(
            &row.phone,
            trace
                .records
                .iter()
                .map(|e| (e.epoch as f64, e.holdout_nll))
                .collect(),
        ));
        rows.push(row);
    }
    ctx.write_table(stage, ESTIMATOR_TABLE, &table)?;
    ctx.write_plot(stage, "plots/estimators.svg", &chart)?;
    Ok(rows)
}
