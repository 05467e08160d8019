//! Recall metrics, reconstruction probes and few-shot reports.

mod probe;
mod recall;
mod report;

pub use probe::{
    mask_ratio_sweep, masked_top1_probe, sweep_chart, sweep_reference, ProbeConfig, ProbeResult, SweepReport,
    DEFAULT_SWEEP_RATIOS, REFERENCE_SWEEP,
};
pub use recall::{kept_triplets, recall_at, scene_hits, Averaging, ConstraintMode, PairPrediction, RecallConfig};
pub use report::{
    evaluate_few_shot, few_shot_reference, mean_std, FewShotEvalConfig, FewShotReport, Models, ReportCell,
};
