use crowdtemp::data::{fit_normalizer, NormStats, PhoneDataset, Sample};
use crowdtemp::estimator::{init_params, mae_encoded, EncodedSet, EstimatorModel, TrainConfig};
use crowdtemp::meta::{
    adapt, build_task_set, direct_train_baseline, encode_tasks, maml_train, pretrain_baseline,
    Adaptation, DirectConfig, MetaConfig,
};
use crowdtemp::nn::ParamVector;
use crowdtemp::rng::{derive, rng};
use rand::seq::IndexedRandom;

use super::truthinf::load_inferred_labels;
use super::{
    contributors, ensure_dir, load_corpus, map_items, participants, Context, SplitPhone,
    FEWSHOT_CURVE_TABLE, FEWSHOT_TABLE, MAML_TABLE,
};
use crate::error::{invalid, AtStage, Result, Stage};
use crate::svg::{Chart, Series};
use crate::table::{num, Table};

/// Column order of the few-shot table: strategy by label source.
pub const STRATEGIES: [&str; 6] = ["DT-TL", "DT-IL", "PT-TL", "PT-IL", "MAML-TL", "MAML-IL"];

pub const SOURCE_MODEL: &str = "models/source_maml.json";
pub const PRETRAINED_MODEL: &str = "models/pretrained.json";

#[derive(Debug, Clone, PartialEq)]
pub struct FewshotRow {
    pub participant: String,
    pub n_eval: usize,
    /// Mean evaluation MAE per strategy, in `STRATEGIES` order.
    pub mae: [f64; 6],
    /// Mean MAE after each fine-tuning step for PT-TL and MAML-TL.
    pub curve: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewshotSummary {
    /// One row per participant, then the pooled `all` row.
    pub rows: Vec<FewshotRow>,
    pub maml_best_epoch: usize,
    pub maml_epochs: usize,
}

impl FewshotSummary {
    pub fn get(&self, participant: &str, strategy: &str) -> Option<f64> {
        let c = STRATEGIES.iter().position(|s| *s == strategy)?;
        self.rows
            .iter()
            .find(|r| r.participant == participant)
            .map(|r| r.mae[c])
    }
}

struct Sources<'a> {
    norm: &'a NormStats,
    pretrained: &'a ParamVector,
    meta_trained: &'a ParamVector,
    step: Adaptation,
}

fn participant_row(
    ctx: &Context,
    stage: Stage,
    p: &SplitPhone,
    j: usize,
    src: &Sources<'_>,
) -> Result<FewshotRow> {
    let f = &ctx.config.fewshot;
    let seed = ctx.seed(stage);
    let labels = load_inferred_labels(ctx, stage, p)?;
    let candidates: Vec<usize> = labels.keys().copied().collect();
    if candidates.len() < f.shots {
        return Err(invalid(
            stage,
            format!(
                "participant `{}` has {} crowd-labelled samples, {} needed",
                p.id(),
                candidates.len(),
                f.shots
            ),
        ));
    }
    let eval = EncodedSet::new(&p.val.samples, src.norm);
    let mae = |params: &ParamVector| mae_encoded(params, &eval).at(stage);
    let mut r = rng(derive(seed, 100 + j as u64));
    let mut sums = [0.0; 6];
    let mut curve = vec![[0.0; 2]; f.steps + 1];
    for rep in 0..f.repetitions {
        let pick: Vec<usize> = candidates
            .choose_multiple(&mut r, f.shots)
            .copied()
            .collect();
        let tl: Vec<Sample> = pick.iter().map(|&i| p.train.samples[i]).collect();
        let il: Vec<Sample> = pick
            .iter()
            .map(|&i| p.train.samples[i].with_label(labels[&i]))
            .collect();
        let direct = DirectConfig {
            seed: derive(derive(seed, 200 + j as u64), rep as u64),
            ..f.direct
        };
        for (k, set) in [&tl, &il].into_iter().enumerate() {
            sums[k] += mae(&direct_train_baseline(set, src.norm, &direct).at(stage)?)?;
        }
        for (m, start) in [src.pretrained, src.meta_trained].into_iter().enumerate() {
            for (k, set) in [&tl, &il].into_iter().enumerate() {
                let support = EncodedSet::new(set, src.norm);
                let mut params = start.clone();
                let track = k == 0;
                let mut last = None;
                if track {
                    let v = mae(&params)?;
                    curve[0][m] += v;
                    last = Some(v);
                }
                for point in curve.iter_mut().skip(1) {
                    params = adapt(&params, &support, &src.step).at(stage)?;
                    if track {
                        let v = mae(&params)?;
                        point[m] += v;
                        last = Some(v);
                    }
                }
                sums[2 + 2 * m + k] += match last {
                    Some(v) => v,
                    None => mae(&params)?,
                };
            }
        }
    }
    let reps = f.repetitions as f64;
    Ok(FewshotRow {
        participant: p.id().to_owned(),
        n_eval: p.val.len(),
        mae: sums.map(|s| s / reps),
        curve: curve.into_iter().map(|c| c.map(|v| v / reps)).collect(),
    })
}

/// Meta-trains the source model and compares few-shot strategies on every
/// participant with true and crowd-inferred labels.
pub fn run_fewshot(ctx: &Context) -> Result<FewshotSummary> {
    let stage = Stage::Fewshot;
    let phones = load_corpus(ctx, stage)?;
    let contribs = contributors(&phones);
    let parts = participants(&phones);
    if parts.is_empty() {
        return Err(invalid(stage, "the corpus has no participants"));
    }
    let f = &ctx.config.fewshot;
    let seed = ctx.seed(stage);
    let trains: Vec<PhoneDataset> = contribs.iter().map(|p| p.train.clone()).collect();
    let vals: Vec<PhoneDataset> = contribs.iter().map(|p| p.val.clone()).collect();
    let norm = fit_normalizer(&trains).at(stage)?;
    let meta = MetaConfig {
        seed: derive(seed, 4),
        ..f.meta
    };

    let pretrained = pretrain_baseline(
        &trains,
        &norm,
        &TrainConfig {
            seed: derive(seed, 0),
            ..f.pretrain
        },
    )
    .at(stage)?;
    let tasks = encode_tasks(
        &build_task_set(
            &trains,
            meta.k_spt,
            meta.k_qry,
            f.train_tasks,
            derive(seed, 1),
        )
        .at(stage)?,
        &norm,
    );
    let val_tasks = encode_tasks(
        &build_task_set(&vals, meta.k_spt, meta.k_qry, f.val_tasks, derive(seed, 2)).at(stage)?,
        &norm,
    );
    let pooled: Vec<f64> = trains
        .iter()
        .flat_map(|d| d.samples.iter().map(|s| s.label))
        .collect();
    let init = init_params(&pooled, derive(seed, 3));
    let (theta, trace) = maml_train(&tasks, &init, &meta, Some(&val_tasks)).at(stage)?;

    ensure_dir(stage, &ctx.path("models"))?;
    EstimatorModel::new("source", theta.clone(), norm.clone())
        .at(stage)?
        .save(ctx.path(SOURCE_MODEL))
        .at(stage)?;
    EstimatorModel::new("pretrained", pretrained.clone(), norm.clone())
        .at(stage)?
        .save(ctx.path(PRETRAINED_MODEL))
        .at(stage)?;
    let mut mt = Table::new(&["epoch", "val_mae"]);
    for e in &trace.records {
        mt.push(vec![e.epoch.to_string(), num(e.val_mae)]);
    }
    ctx.write_table(stage, MAML_TABLE, &mt)?;

    let src = Sources {
        norm: &norm,
        pretrained: &pretrained,
        meta_trained: &theta,
        step: Adaptation {
            steps: 1,
            ..meta.fine_tune()
        },
    };
    let mut rows = map_items(&parts, ctx.deterministic, |j, p| {
        participant_row(ctx, stage, p, j, &src)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    rows.push(pooled_row(&rows));

    let mut columns = vec!["participant", "n_eval"];
    columns.extend(STRATEGIES);
    let mut table = Table::new(&columns);
    let mut curves = Table::new(&["participant", "step", "PT-TL", "MAML-TL"]);
    for r in &rows {
        let mut row = vec![r.participant.clone(), r.n_eval.to_string()];
        row.extend(r.mae.iter().map(|&v| num(v)));
        table.push(row);
        for (s, c) in r.curve.iter().enumerate() {
            curves.push(vec![
                r.participant.clone(),
                s.to_string(),
                num(c[0]),
                num(c[1]),
            ]);
        }
        let line = |m: usize| {
            r.curve
                .iter()
                .enumerate()
                .map(|(s, c)| (s as f64, c[m]))
                .collect()
        };
        let dt = vec![(0.0, r.mae[0]), (f.steps as f64, r.mae[0])];
        ctx.write_plot(
            stage,
            &format!("plots/fewshot_{}.svg", r.participant),
            &Chart {
                title: format!(
                    "Fine-tuning with {} labelled samples, {}",
                    f.shots, r.participant
                ),
                x_label: "fine-tuning step".into(),
                y_label: "evaluation MAE (°C)".into(),
                series: vec![
                    Series::line("PT-TL", line(0)),
                    Series::line("MAML-TL", line(1)),
                    Series::line("DT-TL (final)", dt),
                ],
            },
        )?;
    }
    ctx.write_table(stage, FEWSHOT_TABLE, &table)?;
    ctx.write_table(stage, FEWSHOT_CURVE_TABLE, &curves)?;
    Ok(FewshotSummary {
        rows,
        maml_best_epoch: trace.best_epoch,
        maml_epochs: trace.records.len() - 1,
    })
}

/// Evaluation-sample-weighted mean over participants, i.e. the MAE over all
/// evaluation samples pooled.
fn pooled_row(rows: &[FewshotRow]) -> FewshotRow {
    let n: usize = rows.iter().map(|r| r.n_eval).sum();
    let w = |r: &FewshotRow| r.n_eval as f64 / n as f64;
    let mut mae = [0.0; 6];
    let mut curve = vec![[0.0; 2]; rows[0].curve.len()];
    for r in rows {
        for (a, b) in mae.iter_mut().zip(&r.mae) {
            *a += w(r) * b;
        }
        for (a, b) in curve.iter_mut().zip(&r.curve) {
            a[0] += w(r) * b[0];
            a[1] += w(r) * b[1];
        }
    }
    FewshotRow {
        participant: "all".into(),
        n_eval: n,
        mae,
        curve,
    }
}
