//! Scoring encodings and measuring how well scores order architectures.

mod metrics;
mod ranker;

pub use metrics::{
    kendall_tau, kendall_tau_b, mid_ranks, spearman, spearman_rho, ScoredEntry, ScoredSet,
};
pub use ranker::{
    featurize, hinge_loss, predict, tokenize, train_ranker, LrSchedule, Optimizer, RankerModel,
    SparseVec, TrainConfig, TrainLog, DEFAULT_FEATURE_DIM, DEFAULT_NGRAM_ORDERS,
    MODEL_FORMAT_VERSION,
};
