//! Experiment configuration, read from TOML. Every field has a default, so an
//! empty file (or no file) describes the full-scale synthetic experiment.
//!
//! Stage seeds are derived from the global `seed` and the stage name; the
//! `seed` fields inside the nested training configs are ignored and replaced
//! by those derived seeds. `[seeds]` pins individual stages explicitly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crowdtemp::crowdsim::GroupSize;
use crowdtemp::data::SynthCorpusSpec;
use crowdtemp::estimator::TrainConfig;
use crowdtemp::fedagg::{DEFAULT_FRAC_BITS, SUPPORTED_KEY_BITS};
use crowdtemp::meta::{DirectConfig, MetaConfig};
use crowdtemp::nn::OptimizerKind;
use crowdtemp::rng::derive_named;
use crowdtemp::truthinf::CbtsConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result, Stage};
use crate::table::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic(SynthCorpusSpec),
    /// A corpus file in the `phone_id,f1..f9,label` layout with explicit roles.
    Csv {
        path: PathBuf,
        contributors: Vec<String>,
        participants: Vec<String>,
    },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic(SynthCorpusSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbtsStage {
    pub train_groups: usize,
    pub val_groups: usize,
    pub test_groups: usize,
    /// Answer bins for the Dawid-Skene baseline.
    pub ds_bins: usize,
    pub training: CbtsConfig,
}

impl Default for CbtsStage {
    fn default() -> Self {
        Self {
            train_groups: 6000,
            val_groups: 1500,
            test_groups: 6000,
            ds_bins: 10,
            training: CbtsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelStage {
    pub group_size: GroupSize,
}

impl Default for LabelStage {
    fn default() -> Self {
        Self {
            group_size: GroupSize::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotStage {
    pub repetitions: usize,
    /// Labelled participant samples per repetition.
    pub shots: usize,
    /// Fine-tuning steps for the pre-trained and meta-trained models.
    pub steps: usize,
    pub train_tasks: usize,
    pub val_tasks: usize,
    pub meta: MetaConfig,
    pub pretrain: TrainConfig,
    pub direct: DirectConfig,
}

impl Default for FewshotStage {
    fn default() -> Self {
        Self {
            repetitions: 100,
            shots: 5,
            steps: 20,
            train_tasks: 2000,
            val_tasks: 200,
            meta: MetaConfig::default(),
            pretrain: TrainConfig::default(),
            direct: DirectConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedStage {
    pub key_bits: u32,
    pub frac_bits: u32,
    pub rounds: usize,
    pub tasks_per_client: usize,
    pub meta_optimizer: OptimizerKind,
    pub beta: f64,
    /// Meta-validation tasks scored after every round.
    pub val_tasks: usize,
}

impl Default for FedStage {
    fn default() -> Self {
        Self {
            key_bits: 1024,
            frac_bits: DEFAULT_FRAC_BITS,
            rounds: 3,
            tasks_per_client: 20,
            meta_optimizer: OptimizerKind::Sgd,
            beta: 1e-4,
            val_tasks: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub train_fraction: f64,
    pub corpus: CorpusSource,
    pub estimator: TrainConfig,
    pub cbts: CbtsStage,
    pub labels: LabelStage,
    pub fewshot: FewshotStage,
    pub fed: FedStage,
    /// Explicit per-stage seeds, keyed by stage name.
    pub seeds: BTreeMap<String, u64>,
}

/// `[seeds]` key for the train/validation split shared by all stages.
pub const SPLIT_SEED: &str = "split";

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("out"),
            train_fraction: 0.7,
            corpus: CorpusSource::default(),
            estimator: TrainConfig::default(),
            cbts: CbtsStage::default(),
            labels: LabelStage::default(),
            fewshot: FewshotStage::default(),
            fed: FedStage::default(),
            seeds: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if let Some(k) = self
            .seeds
            .keys()
            .find(|k| *k != SPLIT_SEED && Stage::from_name(k).is_none())
        {
            return bad(format!("[seeds] names unknown stage `{k}`"));
        }
        if let CorpusSource::Csv {
            contributors,
            participants,
            ..
        } = &self.corpus
        {
            if contributors.len() < 2 {
                return bad("a csv corpus needs at least 2 contributors".into());
            }
            if let Some(id) = contributors.iter().find(|c| participants.contains(c)) {
                return bad(format!("phone `{id}` is both contributor and participant"));
            }
        }
        let c = &self.cbts;
        if c.train_groups == 0 || c.val_groups == 0 || c.test_groups == 0 || c.ds_bins < 2 {
            return bad("group counts must be >= 1 and ds_bins >= 2".into());
        }
        let f = &self.fewshot;
        if f.repetitions == 0 || f.shots == 0 || f.train_tasks == 0 || f.val_tasks == 0 {
            return bad("fewshot repetitions, shots and task counts must be >= 1".into());
        }
        f.meta
            .validate()
            .map_err(|e| CliError::Config(format!("fewshot.meta: {e}")))?;
        let fed = &self.fed;
        if !SUPPORTED_KEY_BITS.contains(&fed.key_bits) {
            return bad(format!(
                "fed.key_bits must be one of {SUPPORTED_KEY_BITS:?}"
            ));
        }
        if fed.rounds == 0 || fed.val_tasks == 0 || !(fed.beta > 0.0) {
            return bad("fed rounds and val_tasks must be >= 1 and beta > 0".into());
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form. The output
    /// directory is left out: it decides where results go, not what they are.
    pub fn checksum(&self) -> String {
        let canonical = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        sha256_hex(json.as_bytes())[..16].to_owned()
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        self.seeds
            .get(stage)
            .copied()
            .unwrap_or_else(|| derive_named(self.seed, stage))
    }
}
