//! Dense-forecasting evaluation: segmentation probe, rollouts, best/mean
//! scoring, model-free bounds, mode coverage and the K sweep.

pub mod head;
pub mod metrics;
pub mod modes;
pub mod protocol;
pub mod rollout;
pub mod score;
pub mod sweep;

pub use head::{train_task_head, HeadConfig, TaskHead};
pub use metrics::{compute_miou, patch_labels, Confusion};
pub use modes::{mode_recovery, ModeRecovery};
pub use protocol::{build_case, case_seed, evaluate, run_case, score_case, summarize, EvalCase, EvalConfig, Horizon, MetricsRow, Summary};
pub use rollout::{rollout, rollout_ids, QuerySource, RolloutSet, Trajectory, WorldModel};
pub use score::{
    copy_last, coverage_separation, feature_loss, feature_rms, head_miou, mean_grid, mode_coverage, predicted_centroid, present,
    score_best, score_mean, Score,
};
pub use sweep::{eval_k_curve, sweep_k, SweepCell};
