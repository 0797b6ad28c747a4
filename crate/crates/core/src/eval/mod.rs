//! Reconstruction quality, cross-validated classification and significance testing.

pub mod fixtures;
mod metrics;
mod pipeline;
mod wilcoxon;

pub use metrics::{
    class_metrics, ClassMetrics, ConfusionMatrix, MacroAverage, Metric, MetricKind, OneVsRest, PerClassMetrics,
    CLASS_COUNT,
};
pub use pipeline::{
    classify, classify_baseline, confusion_matrices, cross_validated_confusion, cross_validated_records,
    error_reduction, evaluate, evaluate_fold, fit_observer_model, fit_transcoder, reconstruction_quality,
    significance_tests, validation_pairs, ConditionSummary, EvalReport, FoldSummary, GroundTruth, ImageRecord,
    PipelineConfig, ReconstructionReport, SignificanceTest, TranscoderPath,
};
pub use wilcoxon::{average_ranks, wilcoxon_signed_rank, WilcoxonMethod, WilcoxonResult, EXACT_MAX_N};
