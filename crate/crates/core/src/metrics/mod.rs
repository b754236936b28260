//! Segmentation metrics, multi-scale evaluation and the cost model.

mod confusion;
mod cost;
mod eval;

pub use confusion::ConfusionAccumulator;
pub use cost::{
    conv_flops, conv_params, count_flops, count_params, descriptor_memory_mb, lrm_flops, sab_flops, sdm_flops,
    CostReport, Group, GroupCounts,
};
pub use eval::{argmax_classes, evaluate, multi_scale_eval, padded_logits, predict_mask, EvalOptions, MULTI_SCALES};

/// `metric=<name> value=<number>` record.
pub fn metric_line(name: &str, value: impl std::fmt::Display) -> String {
    format!("metric={name} value={value}")
}
