use crate::error::{Error, Result};
use crate::graphdata::Cohort;

/// Number of missing UDS entries in `cohort`.
pub fn missing_count(cohort: &Cohort) -> usize {
    cohort
        .subjects
        .iter()
        .map(|s| s.uds.features.iter().filter(|x| x.is_nan()).count())
        .sum()
}

/// Euclidean distance over coordinates observed in both rows, rescaled by
/// `d / n_observed`. Rows sharing no observed coordinate are infinitely far.
fn partial_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut seen = 0usize;
    for (x, y) in a.iter().zip(b) {
        if !x.is_nan() && !y.is_nan() {
            sum += (x - y) * (x - y);
            seen += 1;
        }
    }
    if seen == 0 {
        f64::INFINITY
    } else {
        (sum * a.len() as f64 / seen as f64).sqrt()
    }
}

/// Fills each missing UDS entry with the mean of that feature over the `k`
/// nearest other subjects of `cohort` having it observed.
pub fn knn_impute(cohort: &Cohort, k: usize) -> Result<Cohort> {
    impute(cohort, cohort, k, true)
}

/// Like [`knn_impute`] but draws neighbours from `donors` only, so held-out
/// subjects never contribute to each other's values.
pub fn knn_impute_from(target: &Cohort, donors: &Cohort, k: usize) -> Result<Cohort> {
    impute(target, donors, k, false)
}

fn impute(target: &Cohort, donors: &Cohort, k: usize, same: bool) -> Result<Cohort> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut out = target.clone();
    if missing_count(target) == 0 {
        return Ok(out);
    }
    let dim = target.subjects.first().map_or(0, |s| s.uds.features.len());
    for j in 0..dim {
        if donors.subjects.iter().all(|s| s.uds.features[j].is_nan()) {
            let any_missing = target.subjects.iter().any(|s| s.uds.features[j].is_nan());
            if any_missing {
                return Err(Error::Imputation { feature: j });
            }
        }
    }
    for (i, subject) in target.subjects.iter().enumerate() {
        let row = &subject.uds.features;
        if !row.iter().any(|x| x.is_nan()) {
            continue;
        }
        let mut order: Vec<(f64, usize)> = donors
            .subjects
            .iter()
            .enumerate()
            .filter(|&(d, _)| !(same && d == i))
            .map(|(d, s)| (partial_distance(row, &s.uds.features), d))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for j in 0..dim {
            if !row[j].is_nan() {
                continue;
            }
            let mut total = 0.0;
            let mut used = 0usize;
            for &(_, d) in &order {
                let v = donors.subjects[d].uds.features[j];
                if !v.is_nan() {
                    total += v;
                    used += 1;
                    if used == k {
                        break;
                    }
                }
            }
            if used == 0 {
                return Err(Error::Imputation { feature: j });
            }
            out.subjects[i].uds.features[j] = total / used as f64;
        }
    }
    Ok(out)
}
