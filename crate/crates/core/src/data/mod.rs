//! Feature schema, corpus I/O, splitting, normalization and the synthetic
//! phone generator.

mod io;
mod sample;
mod split;
mod synth;

pub use io::{load_csv, save_csv};
pub use sample::{check_unique_ids, PhoneDataset, Role, Sample, FEATURE_NAMES, N_FEATURES};
pub use split::{fit_normalizer, normalize, split, NormStats, STD_FLOOR};
pub use synth::{
    ambient_schedule, synth_corpus, synth_generate, synth_generate_sessions, PhonePopulation,
    ScreenProcess, SessionSpec, SynthCorpusSpec, SynthOptions, SynthPhone, SynthPhoneParams,
    REFERENCE_VOLTAGE,
};
