use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Two-sided p-value of a standard normal statistic.
pub fn normal_two_sided(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeLong {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p: f64,
}

fn psi(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

/// Structural components `(V10 over positives, V01 over negatives)`.
fn components(positive: &[bool], scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = positive.iter().zip(scores).filter(|(&p, _)| p).map(|(_, &s)| s).collect();
    let neg: Vec<f64> = positive.iter().zip(scores).filter(|(&p, _)| !p).map(|(_, &s)| s).collect();
    let v10 = pos
        .iter()
        .map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64)
        .collect();
    let v01 = neg
        .iter()
        .map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64)
        .collect();
    (v10, v01)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

/// Paired DeLong test for the difference of two correlated AUCs.
pub fn delong_test(positive: &[bool], scores_a: &[f64], scores_b: &[f64]) -> Result<DeLong> {
    if scores_a.len() != positive.len() || scores_b.len() != positive.len() {
        return Err(Error::Metric("delong_test needs paired scores for every subject".into()));
    }
    let m = positive.iter().filter(|&&p| p).count();
    let n = positive.len() - m;
    if m < 2 || n < 2 {
        return Err(Error::Metric(format!(
            "delong_test needs at least two subjects per class ({m} positive, {n} negative)"
        )));
    }
    let (a10, a01) = components(positive, scores_a);
    let (b10, b01) = components(positive, scores_b);
    let auc_a = mean(&a10);
    let auc_b = mean(&b10);
    let var = (cov(&a10, &a10) + cov(&b10, &b10) - 2.0 * cov(&a10, &b10)) / m as f64
        + (cov(&a01, &a01) + cov(&b01, &b01) - 2.0 * cov(&a01, &b01)) / n as f64;
    let diff = auc_a - auc_b;
    if var <= 1e-300 || !var.is_finite() {
        if diff.abs() < 1e-15 {
            return Ok(DeLong {
                auc_a,
                auc_b,
                z: 0.0,
                p: 1.0,
            });
        }
        return Err(Error::Metric(format!(
            "delong_test: degenerate variance with unequal AUCs ({auc_a} vs {auc_b})"
        )));
    }
    let z = diff / var.sqrt();
    Ok(DeLong {
        auc_a,
        auc_b,
        z,
        p: normal_two_sided(z),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// Subjects only A classifies correctly.
    pub b: usize,
    /// Subjects only B classifies correctly.
    pub c: usize,
    /// Continuity-corrected chi-square, `max(|b−c|−1, 0)²/(b+c)`.
    pub statistic: f64,
    pub p: f64,
    /// Whether `p` comes from the exact binomial branch.
    pub exact: bool,
}

/// Below this many discordant pairs the exact binomial test is used.
pub const MCNEMAR_EXACT_BELOW: usize = 25;

/// Two-sided exact binomial p-value for `k` successes in `n` fair trials.
pub fn binomial_two_sided(k: usize, n: usize) -> f64 {
    let k = k.min(n - k);
    let mut coef = 1.0;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            coef = coef * (n - i + 1) as f64 / i as f64;
        }
        tail += coef;
    }
    (2.0 * tail * 0.5f64.powi(n as i32)).min(1.0)
}

pub fn mcnemar_test(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemar> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::Metric("mcnemar_test needs the same subjects for both models".into()));
    }
    let b = correct_a.iter().zip(correct_b).filter(|(&a, &b)| a && !b).count();
    let c = correct_a.iter().zip(correct_b).filter(|(&a, &b)| !a && b).count();
    let n = b + c;
    if n == 0 {
        return Ok(McNemar {
            b,
            c,
            statistic: 0.0,
            p: 1.0,
            exact: true,
        });
    }
    let statistic = ((b as f64 - c as f64).abs() - 1.0).max(0.0).powi(2) / n as f64;
    let (p, exact) = if n < MCNEMAR_EXACT_BELOW {
        (binomial_two_sided(b, n), true)
    } else {
        // Chi-square with one degree of freedom.
        (erfc((statistic / 2.0).sqrt()), false)
    };
    Ok(McNemar {
        b,
        c,
        statistic,
        p,
        exact,
    })
}
