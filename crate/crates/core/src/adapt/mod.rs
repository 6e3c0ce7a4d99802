//! Training and finetuning: learning-rate schedule, the training loop with
//! periodic evaluation, finetuning over nested line clusters, k-fold curves,
//! stopping-iteration estimators and the iteration-count fit.

mod curves;
mod estimate;
pub mod experiment;
mod fit;
mod protocol;
mod schedule;
mod train;

pub use curves::{CurveMeta, CurvePoint, FinetuneCurves, EVAL_EVERY};
pub use estimate::{
    argmin, estimate_stop, grid_len, iteration_of, smooth, snap_to_grid, static_ratio_table, EstimatorSpec,
    RatioTable, StopEstimate, Strategy, StopInputs, SMOOTHING_WINDOW,
};
pub use fit::{fit_iterations, writer_dependent_budget, IterationFit, DEFAULT_FIT_DEGREE};
pub use protocol::{
    finetune_cluster, finetune_run, fold_split, kfold_curves, run_clusters, split_target_lines, ClusterProtocol,
    FinetuneSettings, TargetSplit, MIN_CV_LINES,
};
pub use schedule::{LrSchedule, WarmupSchedule, WarmupSegment, PAPER_TRAINING_ITERATIONS};
pub use train::{evaluate, train, Evaluation, TrainOptions, TrainOutcome};

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::eval::EvalError;
use crate::recognizer::{CheckpointError, RecognizerError};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("estimator: {0}")]
    Estimator(String),

    #[error("curve file: {0}")]
    Curves(String),

    #[error("no feasible evaluation samples among {0}")]
    NothingToEvaluate(usize),

    #[error(transparent)]
    Recognizer(#[from] RecognizerError),

    #[error(transparent)]
    Dataset(#[from] DatasetError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AdaptError> = std::result::Result<T, E>;

/// Mixes `tags` into `seed` (splitmix64 finalizer) to give independent
/// streams to runs, clusters and folds.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ t))
}
