//! Training, evaluation and analysis of tracing models over learner
//! sessions.

pub mod analysis;
pub mod metrics;
pub mod split;
pub mod train;

pub use analysis::{
    correctness_stats, export_states, probability_trace, probe_set, CorrectnessStats, PhaseStats,
    ProbabilityTrace,
};
pub use metrics::{
    ap_report, average_precision, evaluate_model, gt_label_baseline, reshuffle_protocol, APReport,
    ApScores, ReshuffleReport, Spread, SpreadScores,
};
pub use split::{split_learners, Split, SplitAssignment, DEFAULT_FRACTIONS};
pub use train::{
    fit_split, sequences, train, train_with, EpochRecord, Hyperparams, SplitRun, StopReason,
    TrainReport,
};
