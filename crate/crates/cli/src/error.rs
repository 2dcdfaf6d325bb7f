use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stages, in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    TrainEstimators,
    TrainCbts,
    TruthinfBench,
    GenLabels,
    Fewshot,
    Fed,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::TrainEstimators,
        Stage::TrainCbts,
        Stage::TruthinfBench,
        Stage::GenLabels,
        Stage::Fewshot,
        Stage::Fed,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::TrainEstimators => "train-estimators",
            Stage::TrainCbts => "train-cbts",
            Stage::TruthinfBench => "truthinf-bench",
            Stage::GenLabels => "gen-labels",
            Stage::Fewshot => "fewshot",
            Stage::Fed => "fed",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}`: missing {} (run `{needs}` first)", path.display())]
    MissingInput {
        stage: Stage,
        path: PathBuf,
        needs: Stage,
    },

    #[error("stage `{stage}`: {source}")]
    Core {
        stage: Stage,
        #[source]
        source: crowdtemp::Error,
    },

    #[error("stage `{stage}`: {}: {source}", path.display())]
    Io {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}`: {detail}")]
    Invalid { stage: Stage, detail: String },
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Tags library errors with the stage that hit them.
pub(crate) trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T> AtStage<T> for crowdtemp::Result<T> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|source| CliError::Core { stage, source })
    }
}

pub(crate) fn invalid(stage: Stage, detail: impl Into<String>) -> CliError {
    CliError::Invalid {
        stage,
        detail: detail.into(),
    }
}
