//! Metrics and cross-validation protocols.

pub mod cv;
pub mod metrics;

pub use cv::{check_partition, loso_splits, run_protocol, run_split, stratified_kfold, ExperimentConfig, FoldOutcome, LeakageAudit, Split, SplitRecord};
pub use metrics::{average_precision, decision_curve, roc_auc, ConfusionCounts, CvResult, MetricValues, SplitMetrics};
