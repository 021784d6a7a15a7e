//! Discrimination, paired tests, calibration, clinical-utility curves and
//! subgroup tables over out-of-fold predictions.

mod metrics;
mod prediction;
mod report;
mod stats;
mod subgroup;

pub use metrics::{
    calibration, confusion_metrics, decision_curve, default_thresholds, roc_auc, roc_curve, sens_at_spec,
    spec_threshold, Binning, Calibration, CalibrationBin, Confusion, DecisionCurve, DecisionPoint, SensAtSpec,
};
pub use prediction::{check_paired, Prediction, PredictionSet};
pub use report::{
    compare_models, evaluate, evaluate_model, mean_std, EvalConfig, FoldMetrics, FoldTest, MeanStd, MetricsReport,
    ModelPredictions, ModelReport, PairwiseTest, SensAtSpecReport, Summary,
};
pub use stats::{
    binomial_two_sided, delong_test, mcnemar_test, normal_two_sided, DeLong, McNemar, MCNEMAR_EXACT_BELOW,
};
pub use subgroup::{age_band, subgroup_eval, SubgroupRow, SubgroupTable, DEFAULT_AGE_CUTS};
