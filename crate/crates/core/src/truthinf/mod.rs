//! Truth inference over groups of answers: the learned fold aggregator and the
//! classical baselines it is benchmarked against.

mod baselines;
mod bench;
mod cbts;
mod discovery;
mod group;

pub use baselines::{compute_wa_weights, mean_infer, mv_infer, weighted_average};
pub use bench::{benchmark, BenchResult, Method};
pub use cbts::{
    agg_pair, aggregator_network, cbts_fold, cbts_fold_with, cbts_train, fold_nll_grad,
    sorted_for_fold, AggregatorModel, CbtsConfig, CbtsEpoch, CbtsTrace, PairAggregator,
};
pub use discovery::{ds_infer, pm_infer, pm_infer_with_weights, zc_infer, ZC_SUPPORT};
pub use group::{AnswerGroup, AnswerMatrix, SourcedAnswer};
