//! Metrics, patient-wise repeated k-fold splits and the cross-validation
//! driver.
//!
//! Every score is lesion level: a lesion's prediction is either its first
//! view (`tta = false`) or the mean over all of its rotated views
//! (`tta = true`). Thresholded metrics call a lesion positive when its score
//! is strictly above the threshold.

mod cv;
mod metrics;
mod report;
mod splits;

pub use cv::{
    cross_validate, group_lesions, partition, summarize, CnnLearner, ConstantLearner, CvOptions, CvReport, Learner,
    LesionViews, OracleLearner, PredictionRow, Scorer, SplitRow, SummaryRow, TtaMode,
};
pub use metrics::{compute_metrics, roc_auc, roc_curve, ConfusionCounts, Metrics};
pub use report::{
    read_csv, read_report, render_summary_table, roc_svg, write_csv, write_report, PREDICTIONS_CSV, SPLITS_CSV,
    SUMMARY_CSV,
};
pub use splits::{make_splits, Split, SplitPlan};
