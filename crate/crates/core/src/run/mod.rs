//! Training runs, checkpoint evaluation, cost analysis and the gradient
//! suite behind the command-line front end.

mod analyze;
mod config;
mod eval;
mod gradcheck;
mod train;

pub use analyze::{analyze_text, cost_pair};
pub use config::RunConfig;
pub use eval::{eval_checkpoint, EvalReport};
pub use gradcheck::{gradcheck_suite, pipeline_case, GradCase, CASES};
pub use train::{
    is_new_best, train, EpochLog, RunLock, TrainSummary, BEST_CHECKPOINT, CONFIG_FILE, FINAL_CHECKPOINT, LOCK_FILE, METRICS_FILE,
};

/// Evaluation worker count from `AGLN_THREADS`, defaulting to one.
pub fn env_threads() -> usize {
    std::env::var("AGLN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
