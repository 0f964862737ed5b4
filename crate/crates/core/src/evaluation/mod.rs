//! Target-domain scoring, error metrics, seed aggregation and significance
//! testing.

pub mod infer;
pub mod metrics;
pub mod report;
pub mod stats;

pub use infer::{infer_scores, score_image, Inference, Scorer};
pub use metrics::{
    compute_auc, compute_hter, compute_tpr_at_fpr, eer, error_rates, roc_curve, ErrorRates, RocPoint, ScoreEntry,
    ScoreSet, ThresholdPolicy, TprAtFpr,
};
pub use report::{aggregate_seeds, evaluate, histogram_svg, render_table, roc_svg, write_roc_csv, AggregateReport, MetricReport, RunMeta};
pub use stats::{mean_std, paired_ttest, student_t_cdf, MeanStd, TTest};
