use serde::{Deserialize, Serialize};

use super::metrics::{
    calibration, confusion_metrics, decision_curve, default_thresholds, roc_auc, sens_at_spec, Binning, Calibration,
    Confusion, DecisionCurve, SensAtSpec,
};
use super::prediction::{check_paired, PredictionSet};
use super::stats::{delong_test, mcnemar_test, DeLong, McNemar};
use super::subgroup::{subgroup_eval, SubgroupTable, DEFAULT_AGE_CUTS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub calibration_bins: usize,
    pub binning: Binning,
    pub target_specificity: f64,
    pub age_cuts: Vec<f64>,
    pub dca_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            calibration_bins: 10,
            binning: Binning::EqualWidth,
            target_specificity: 0.9,
            age_cuts: DEFAULT_AGE_CUTS.to_vec(),
            dca_thresholds: default_thresholds(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) || !(0.0..=1.0).contains(&self.target_specificity) {
            return Err(Error::Config("threshold and target_specificity must lie in [0, 1]".into()));
        }
        if self.calibration_bins == 0 {
            return Err(Error::Config("calibration_bins must be at least 1".into()));
        }
        if self.age_cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("age_cuts must be strictly increasing".into()));
        }
        if self.dca_thresholds.iter().any(|t| !(0.0..1.0).contains(t)) {
            return Err(Error::Config("dca_thresholds must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Mean and sample standard deviation (`n − 1`); the deviation is 0 for a
/// single value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n: usize,
    pub auc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub auc: MeanStd,
    pub accuracy: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensAtSpecReport {
    /// Threshold chosen on each fold's validation split, applied to that
    /// fold's test split.
    pub per_fold: Vec<SensAtSpec>,
    pub pooled_sensitivity: f64,
    pub pooled_specificity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub folds: Vec<FoldMetrics>,
    pub summary: Summary,
    pub pooled_auc: f64,
    pub pooled: Confusion,
    pub calibration: Calibration,
    pub decision_curve: DecisionCurve,
    pub sens_at_spec: Option<SensAtSpecReport>,
    pub subgroups: SubgroupTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldTest {
    pub fold: usize,
    pub delong: Option<DeLong>,
    pub mcnemar: McNemar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub model_a: String,
    pub model_b: String,
    /// On pooled out-of-fold predictions.
    pub delong: Option<DeLong>,
    pub mcnemar: McNemar,
    pub per_fold: Vec<FoldTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: EvalConfig,
    pub models: Vec<ModelReport>,
    pub pairwise: Vec<PairwiseTest>,
}

/// Out-of-fold test predictions of one model, and optionally the
/// predictions on each fold's inner validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPredictions {
    pub test: PredictionSet,
    pub validation: Option<PredictionSet>,
}

fn fold_metrics(set: &PredictionSet, fold: usize, threshold: f64) -> Result<FoldMetrics> {
    let y = set.positives();
    let s = set.scores();
    let c = confusion_metrics(&y, &s, threshold)?;
    let need = |v: Option<f64>, what: &str| {
        v.ok_or_else(|| Error::Metric(format!("{} fold {fold} has no {what}", set.model)))
    };
    Ok(FoldMetrics {
        fold,
        n: set.len(),
        auc: roc_auc(&y, &s)?,
        accuracy: c.accuracy,
        sensitivity: need(c.sensitivity, "positives")?,
        specificity: need(c.specificity, "negatives")?,
    })
}

fn sens_at_spec_report(test: &PredictionSet, val: &PredictionSet, target: f64) -> Result<SensAtSpecReport> {
    let mut per_fold = Vec::new();
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for f in test.folds() {
        let (t, v) = (test.fold(f), val.fold(f));
        let r = sens_at_spec(&v.positives(), &v.scores(), &t.positives(), &t.scores(), target)?;
        let c = confusion_metrics(&t.positives(), &t.scores(), r.threshold)?;
        tp += c.tp;
        pos += c.tp + c.fn_;
        tn += c.tn;
        neg += c.tn + c.fp;
        per_fold.push(r);
    }
    Ok(SensAtSpecReport {
        per_fold,
        pooled_sensitivity: tp as f64 / pos.max(1) as f64,
        pooled_specificity: tn as f64 / neg.max(1) as f64,
    })
}

pub fn evaluate_model(preds: &ModelPredictions, config: &EvalConfig) -> Result<ModelReport> {
    let test = &preds.test;
    test.validate()?;
    let folds = test
        .folds()
        .into_iter()
        .map(|f| fold_metrics(&test.fold(f), f, config.threshold))
        .collect::<Result<Vec<_>>>()?;
    let col = |g: fn(&FoldMetrics) -> f64| mean_std(&folds.iter().map(g).collect::<Vec<_>>());
    let summary = Summary {
        auc: col(|f| f.auc),
        accuracy: col(|f| f.accuracy),
        sensitivity: col(|f| f.sensitivity),
        specificity: col(|f| f.specificity),
    };
    let y = test.positives();
    let s = test.scores();
    Ok(ModelReport {
        model: test.model.clone(),
        summary,
        folds,
        pooled_auc: roc_auc(&y, &s)?,
        pooled: confusion_metrics(&y, &s, config.threshold)?,
        calibration: calibration(&y, &s, config.calibration_bins, config.binning)?,
        decision_curve: decision_curve(&y, &s, &config.dca_thresholds)?,
        sens_at_spec: preds
            .validation
            .as_ref()
            .map(|v| sens_at_spec_report(test, v, config.target_specificity))
            .transpose()?,
        subgroups: subgroup_eval(test, &config.age_cuts, config.threshold)?,
    })
}

fn correct(set: &PredictionSet, threshold: f64) -> Vec<bool> {
    set.predictions
        .iter()
        .map(|p| (p.prob_ad >= threshold) == p.label.is_positive())
        .collect()
}

pub fn compare_models(a: &PredictionSet, b: &PredictionSet, threshold: f64) -> Result<PairwiseTest> {
    let (a, b) = (a.sorted_by_id(), b.sorted_by_id());
    check_paired(&a, &b)?;
    let y = a.positives();
    let per_fold = a
        .folds()
        .into_iter()
        .map(|f| {
            let (fa, fb) = (a.fold(f), b.fold(f));
            check_paired(&fa, &fb)?;
            Ok(FoldTest {
                fold: f,
                delong: delong_test(&fa.positives(), &fa.scores(), &fb.scores()).ok(),
                mcnemar: mcnemar_test(&correct(&fa, threshold), &correct(&fb, threshold))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairwiseTest {
        model_a: a.model.clone(),
        model_b: b.model.clone(),
        delong: delong_test(&y, &a.scores(), &b.scores()).ok(),
        mcnemar: mcnemar_test(&correct(&a, threshold), &correct(&b, threshold))?,
        per_fold,
    })
}

/// Every metric for every model plus all pairwise tests, in input order.
pub fn evaluate(models: &[ModelPredictions], config: &EvalConfig) -> Result<MetricsReport> {
    config.validate()?;
    let reports = models
        .iter()
        .map(|m| evaluate_model(m, config))
        .collect::<Result<Vec<_>>>()?;
    let mut pairwise = Vec::new();
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            pairwise.push(compare_models(&models[i].test, &models[j].test, config.threshold)?);
        }
    }
    Ok(MetricsReport {
        config: config.clone(),
        models: reports,
        pairwise,
    })
}
