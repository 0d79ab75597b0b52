//! Detection and link-prediction metrics, per-variant and per-subset
//! evaluation tables, multi-run aggregation and plot data.

mod linkpred;
mod metrics;
mod run;

pub use linkpred::{evaluate_link_prediction, link_instances, LinkInstance, LinkPredReport, LinkScores, RANDOM_DRAWS};
pub use metrics::{
    aucpr, auroc, f1_at_alpha, hit_rate_at_k, jaccard_at_alpha, mean_std, mrr, pr_curve, roc_curve,
    select_alpha_best, RankedCandidates, ALPHA_GRID,
};
pub use run::{
    aggregate, align, evaluate_run, plot_data, AggregateRow, Level, MetricRow, MetricsTable, PlotPoint,
    HISTOGRAM_BINS, MIXED,
};
