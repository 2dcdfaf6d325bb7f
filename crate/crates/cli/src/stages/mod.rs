//! Pipeline stages. Each stage reads what earlier stages wrote under the
//! output directory and writes its own models, tables and plots there.

mod fed;
mod fewshot;
mod report;
mod synth;
mod truthinf;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::thread;

use crowdtemp::data::{load_csv, split, PhoneDataset, Role};
use crowdtemp::estimator::EstimatorModel;
use crowdtemp::rng::derive;
use crowdtemp::truthinf::AggregatorModel;

pub use fed::{run_fed, FedRound, FedSummary};
pub use fewshot::{run_fewshot, FewshotRow, FewshotSummary, STRATEGIES};
pub use report::run_report;
pub use synth::{run_synth, run_train_estimators, EstimatorRow, SynthSummary};
pub use truthinf::{
    run_gen_labels, run_train_cbts, run_truthinf_bench, BenchSummary, CbtsSummary, LabelRow,
    LabelSummary,
};

use crate::config::ExperimentConfig;
use crate::error::{invalid, AtStage, CliError, Result, Stage};
use crate::svg::Chart;
use crate::table::{read_table, write_file, Table, TableMeta};

pub const CORPUS_TABLE: &str = "tables/corpus.csv";
pub const ESTIMATOR_TABLE: &str = "tables/estimators.csv";
pub const CBTS_TABLE: &str = "tables/cbts_training.csv";
pub const TRUTHINF_TABLE: &str = "tables/truthinf.csv";
pub const LABEL_TABLE: &str = "tables/labels.csv";
pub const FEWSHOT_TABLE: &str = "tables/fewshot.csv";
pub const FEWSHOT_CURVE_TABLE: &str = "tables/fewshot_curves.csv";
pub const MAML_TABLE: &str = "tables/maml_training.csv";
pub const FED_TABLE: &str = "tables/fed.csv";
pub const REPORT: &str = "report.md";

/// A resolved configuration plus run-wide switches.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    /// Forces single-threaded execution.
    pub deterministic: bool,
    checksum: String,
}

impl Context {
    pub fn new(config: ExperimentConfig, deterministic: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            out: config.output_dir.clone(),
            checksum: config.checksum(),
            config,
            deterministic,
        })
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn seed(&self, stage: Stage) -> u64 {
        self.config.stage_seed(stage.name())
    }

    pub(crate) fn write_table(&self, stage: Stage, rel: &str, table: &Table) -> Result<()> {
        let meta = TableMeta {
            stage,
            config_checksum: self.checksum.clone(),
            seed: self.seed(stage),
        };
        write_file(stage, &self.path(rel), &table.to_csv(&meta))
    }

    pub(crate) fn write_plot(&self, stage: Stage, rel: &str, chart: &Chart) -> Result<()> {
        write_file(stage, &self.path(rel), &chart.to_svg())
    }

    pub(crate) fn read_table(&self, stage: Stage, rel: &str, producer: Stage) -> Result<Table> {
        read_table(stage, &self.path(rel), producer)
    }
}

/// One phone with its fixed train/validation split.
#[derive(Debug, Clone)]
pub struct SplitPhone {
    pub full: PhoneDataset,
    pub train: PhoneDataset,
    pub val: PhoneDataset,
}

impl SplitPhone {
    pub fn id(&self) -> &str {
        &self.full.phone_id
    }

    pub fn role(&self) -> Role {
        self.full.role
    }
}

pub(crate) fn corpus_file(id: &str) -> String {
    format!("corpus/{id}.csv")
}

/// Loads the corpus written by `synth` and splits every phone with the shared
/// split seed, so all stages see the same partitions.
pub fn load_corpus(ctx: &Context, stage: Stage) -> Result<Vec<SplitPhone>> {
    let roles = ctx.read_table(stage, CORPUS_TABLE, Stage::Synth)?;
    let split_seed = ctx.config.stage_seed(crate::config::SPLIT_SEED);
    let mut phones = Vec::with_capacity(roles.rows.len());
    for (i, row) in roles.rows.iter().enumerate() {
        let (id, role) = (&row[0], &row[1]);
        let role = match role.as_str() {
            "contributor" => Role::Contributor,
            "participant" => Role::Participant,
            other => {
                return Err(invalid(
                    stage,
                    format!("phone `{id}` has unknown role `{other}`"),
                ))
            }
        };
        let path = ctx.path(&corpus_file(id));
        if !path.exists() {
            return Err(CliError::MissingInput {
                stage,
                path,
                needs: Stage::Synth,
            });
        }
        let mut loaded = load_csv(&path).at(stage)?;
        if loaded.len() != 1 || loaded[0].phone_id != *id {
            return Err(invalid(
                stage,
                format!("{} must hold exactly phone `{id}`", path.display()),
            ));
        }
        let mut full = loaded.remove(0);
        full.role = role;
        let (train, val) = split(
            &full,
            ctx.config.train_fraction,
            derive(split_seed, i as u64),
        )
        .at(stage)?;
        phones.push(SplitPhone { full, train, val });
    }
    if phones
        .iter()
        .filter(|p| p.role() == Role::Contributor)
        .count()
        < 2
    {
        return Err(invalid(stage, "the corpus needs at least 2 contributors"));
    }
    Ok(phones)
}

pub(crate) fn contributors(phones: &[SplitPhone]) -> Vec<&SplitPhone> {
    phones
        .iter()
        .filter(|p| p.role() == Role::Contributor)
        .collect()
}

pub(crate) fn participants(phones: &[SplitPhone]) -> Vec<&SplitPhone> {
    phones
        .iter()
        .filter(|p| p.role() == Role::Participant)
        .collect()
}

pub(crate) fn model_file(id: &str) -> String {
    format!("models/{id}.json")
}

pub const CBTS_MODEL: &str = "models/cbts.json";

pub(crate) fn load_registry(
    ctx: &Context,
    stage: Stage,
    phones: &[&SplitPhone],
) -> Result<BTreeMap<String, EstimatorModel>> {
    phones
        .iter()
        .map(|p| {
            let path = ctx.path(&model_file(p.id()));
            if !path.exists() {
                return Err(CliError::MissingInput {
                    stage,
                    path,
                    needs: Stage::TrainEstimators,
                });
            }
            Ok((p.id().to_owned(), EstimatorModel::load(&path).at(stage)?))
        })
        .collect()
}

pub(crate) fn load_cbts(ctx: &Context, stage: Stage) -> Result<AggregatorModel> {
    let path = ctx.path(CBTS_MODEL);
    if !path.exists() {
        return Err(CliError::MissingInput {
            stage,
            path,
            needs: Stage::TrainCbts,
        });
    }
    AggregatorModel::load(&path).at(stage)
}

/// Applies `f` to every item, on one thread per item unless `sequential`.
/// Results keep the input order either way.
pub(crate) fn map_items<T, R, F>(items: &[T], sequential: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    if sequential || items.len() < 2 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    thread::scope(|s| {
        let handles: Vec<_> = items
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let f = &f;
                s.spawn(move || f(i, t))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Runs one stage by name.
pub fn run_stage(ctx: &Context, stage: Stage) -> Result<()> {
    match stage {
        Stage::Synth => run_synth(ctx).map(drop),
        Stage::TrainEstimators => run_train_estimators(ctx).map(drop),
        Stage::TrainCbts => run_train_cbts(ctx).map(drop),
        Stage::TruthinfBench => run_truthinf_bench(ctx).map(drop),
        Stage::GenLabels => run_gen_labels(ctx).map(drop),
        Stage::Fewshot => run_fewshot(ctx).map(drop),
        Stage::Fed => run_fed(ctx).map(drop),
        Stage::Report => run_report(ctx).map(drop),
    }
}

pub(crate) fn ensure_dir(stage: Stage, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        stage,
        path: dir.to_path_buf(),
        source,
    })
}
