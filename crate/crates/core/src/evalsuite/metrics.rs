use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(op: &str, y: &[bool], s: &[f64]) -> Result<()> {
    if y.len() != s.len() {
        return Err(Error::Metric(format!("{op}: {} labels but {} scores", y.len(), s.len())));
    }
    if let Some(x) = s.iter().find(|x| x.is_nan()) {
        return Err(Error::Metric(format!("{op}: score {x} is not a number")));
    }
    Ok(())
}

/// Midranks (1-based) of `s`; tied values share the mean of their ranks.
pub(crate) fn midranks(s: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
    let mut ranks = vec![0.0; s.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && s[order[j]] == s[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        i = j;
    }
    ranks
}

/// Area under the ROC curve, `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`, via the
/// Mann–Whitney rank sum.
pub fn roc_auc(positive: &[bool], scores: &[f64]) -> Result<f64> {
    check_lengths("roc_auc", positive, scores)?;
    let n1 = positive.iter().filter(|&&p| p).count();
    let n0 = positive.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::Metric(format!(
            "roc_auc needs both classes ({n1} positive, {n0} negative)"
        )));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let (n1, n0) = (n1 as f64, n0 as f64);
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    /// `None` when the set has no positives.
    pub sensitivity: Option<f64>,
    /// `None` when the set has no negatives.
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Counts at `threshold`; a subject is called positive iff its score is
/// at least the threshold.
pub fn confusion_metrics(positive: &[bool], scores: &[f64], threshold: f64) -> Result<Confusion> {
    check_lengths("confusion_metrics", positive, scores)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&y, &s) in positive.iter().zip(scores) {
        match (y, s >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let sensitivity = ratio(tp, tp + fn_);
    let specificity = ratio(tn, tn + fp);
    Ok(Confusion {
        threshold,
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, positive.len()).unwrap_or(f64::NAN),
        sensitivity,
        specificity,
        balanced_accuracy: sensitivity.zip(specificity).map(|(a, b)| (a + b) / 2.0),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    #[default]
    EqualWidth,
    EqualMass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub mean_predicted: f64,
    pub observed_rate: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub binning: Binning,
    /// Non-empty bins only.
    pub bins: Vec<CalibrationBin>,
    pub brier: f64,
    pub ece: f64,
}

/// Reliability curve, Brier score and expected calibration error.
pub fn calibration(positive: &[bool], probs: &[f64], n_bins: usize, binning: Binning) -> Result<Calibration> {
    check_lengths("calibration", positive, probs)?;
    if n_bins == 0 {
        return Err(Error::Metric("calibration needs at least one bin".into()));
    }
    let n = probs.len();
    if n == 0 {
        return Err(Error::Metric("calibration of an empty set".into()));
    }
    let y = |i: usize| if positive[i] { 1.0 } else { 0.0 };
    let brier = (0..n).map(|i| (probs[i] - y(i)).powi(2)).sum::<f64>() / n as f64;

    let groups: Vec<(f64, f64, Vec<usize>)> = match binning {
        Binning::EqualWidth => {
            let mut members = vec![Vec::new(); n_bins];
            for (i, &p) in probs.iter().enumerate() {
                let b = ((p * n_bins as f64).floor() as usize).min(n_bins - 1);
                members[b].push(i);
            }
            members
                .into_iter()
                .enumerate()
                .map(|(b, m)| (b as f64 / n_bins as f64, (b + 1) as f64 / n_bins as f64, m))
                .collect()
        }
        Binning::EqualMass => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
            (0..n_bins)
                .map(|b| {
                    let m = order[b * n / n_bins..(b + 1) * n / n_bins].to_vec();
                    let lo = m.first().map_or(f64::NAN, |&i| probs[i]);
                    let hi = m.last().map_or(f64::NAN, |&i| probs[i]);
                    (lo, hi, m)
                })
                .collect()
        }
    };

    let mut bins = Vec::new();
    let mut ece = 0.0;
    for (lower, upper, m) in groups {
        if m.is_empty() {
            continue;
        }
        let count = m.len();
        let mean_predicted = m.iter().map(|&i| probs[i]).sum::<f64>() / count as f64;
        let observed_rate = m.iter().map(|&i| y(i)).sum::<f64>() / count as f64;
        ece += count as f64 / n as f64 * (mean_predicted - observed_rate).abs();
        bins.push(CalibrationBin {
            lower,
            upper,
            mean_predicted,
            observed_rate,
            count,
        });
    }
    Ok(Calibration {
        binning,
        bins,
        brier,
        ece,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensAtSpec {
    pub target_specificity: f64,
    pub threshold: f64,
    pub sensitivity: Option<f64>,
    pub achieved_specificity: Option<f64>,
    /// False when no threshold in `[0, 1]` reaches the target on the
    /// validation negatives.
    pub reachable: bool,
}

/// Smallest threshold whose validation specificity reaches `target`.
pub fn spec_threshold(positive: &[bool], scores: &[f64], target: f64) -> Result<f64> {
    check_lengths("sens_at_spec", positive, scores)?;
    let mut neg: Vec<f64> = positive
        .iter()
        .zip(scores)
        .filter(|(&p, _)| !p)
        .map(|(_, &s)| s)
        .collect();
    if neg.is_empty() {
        return Err(Error::Metric("sens_at_spec needs validation negatives".into()));
    }
    if target <= 0.0 {
        return Ok(0.0);
    }
    neg.sort_by(f64::total_cmp);
    // Specificity at t counts negatives scored strictly below t, so t must
    // clear the r-th smallest negative score.
    let r = ((target * neg.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(neg[r.min(neg.len()) - 1].next_up())
}

/// Picks the threshold on validation predictions and applies it unchanged
/// to the test predictions.
pub fn sens_at_spec(
    val_positive: &[bool],
    val_scores: &[f64],
    test_positive: &[bool],
    test_scores: &[f64],
    target: f64,
) -> Result<SensAtSpec> {
    let threshold = spec_threshold(val_positive, val_scores, target)?;
    let c = confusion_metrics(test_positive, test_scores, threshold)?;
    Ok(SensAtSpec {
        target_specificity: target,
        threshold,
        sensitivity: c.sensitivity,
        achieved_specificity: c.specificity,
        reachable: threshold <= 1.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub threshold: f64,
    pub model: f64,
    pub treat_all: f64,
    pub treat_none: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionCurve {
    pub prevalence: f64,
    pub points: Vec<DecisionPoint>,
}

/// `0.00, 0.01, …, 0.99`.
pub fn default_thresholds() -> Vec<f64> {
    (0..100).map(|i| i as f64 / 100.0).collect()
}

/// Net benefit of the model against treat-all and treat-none.
pub fn decision_curve(positive: &[bool], probs: &[f64], thresholds: &[f64]) -> Result<DecisionCurve> {
    check_lengths("decision_curve", positive, probs)?;
    if let Some(t) = thresholds.iter().find(|t| !(0.0..1.0).contains(*t)) {
        return Err(Error::Metric(format!("decision threshold {t} outside [0, 1)")));
    }
    let n = positive.len();
    if n == 0 {
        return Err(Error::Metric("decision curve of an empty set".into()));
    }
    let nf = n as f64;
    let prevalence = positive.iter().filter(|&&p| p).count() as f64 / nf;
    let points = thresholds
        .iter()
        .map(|&pt| {
            let odds = pt / (1.0 - pt);
            let (mut tp, mut fp) = (0usize, 0usize);
            for (&y, &p) in positive.iter().zip(probs) {
                if p >= pt {
                    if y {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            DecisionPoint {
                threshold: pt,
                model: tp as f64 / nf - fp as f64 / nf * odds,
                treat_all: prevalence - (1.0 - prevalence) * odds,
                treat_none: 0.0,
            }
        })
        .collect();
    Ok(DecisionCurve { prevalence, points })
}

/// ROC curve points `(fpr, tpr)` from the highest threshold down, one per
/// distinct score, starting at `(0, 0)`.
pub fn roc_curve(positive: &[bool], scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_lengths("roc_curve", positive, scores)?;
    let n1 = positive.iter().filter(|&&p| p).count();
    let n0 = positive.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::Metric("roc_curve needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &o) in order.iter().enumerate() {
        if positive[o] {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == order.len() || scores[order[i + 1]] != scores[o] {
            points.push((fp as f64 / n0 as f64, tp as f64 / n1 as f64));
        }
    }
    Ok(points)
}
