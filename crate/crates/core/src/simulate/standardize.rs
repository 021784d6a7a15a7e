use crate::error::{Error, Result};
use crate::graphdata::{Cohort, Standardization};

const MIN_STD: f64 = 1e-12;

fn require_complete(cohort: &Cohort) -> Result<()> {
    match cohort.subjects.iter().find(|s| !s.is_finite()) {
        Some(s) => Err(Error::contract(format!(
            "subject {} still has missing values; impute before standardising",
            s.id
        ))),
        None => Ok(()),
    }
}

/// UDS column means and population standard deviations of `train`.
pub fn fit_standardization(train: &Cohort) -> Result<Standardization> {
    require_complete(train)?;
    if train.is_empty() {
        return Err(Error::contract("cannot fit standardisation on an empty cohort"));
    }
    let dim = train.subjects[0].uds.features.len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in &train.subjects {
        for (m, x) in mean.iter_mut().zip(&s.uds.features) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for s in &train.subjects {
        for ((v, x), m) in var.iter_mut().zip(&s.uds.features).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok(Standardization {
        uds_mean: mean,
        uds_std: std,
        mri_per_subject: true,
        fitted_on: train.subjects.iter().map(|s| s.id.clone()).collect(),
    })
}

/// Scales each MRI column of one subject to zero mean and unit standard
/// deviation. Columns with no spread become zero.
pub fn normalize_mri(features: &mut [f64], cols: usize) {
    let rows = features.len() / cols;
    for c in 0..cols {
        let mean = (0..rows).map(|r| features[r * cols + c]).sum::<f64>() / rows as f64;
        let var = (0..rows)
            .map(|r| (features[r * cols + c] - mean).powi(2))
            .sum::<f64>()
            / rows as f64;
        let std = var.sqrt();
        for r in 0..rows {
            let x = &mut features[r * cols + c];
            *x = if std < MIN_STD { 0.0 } else { (*x - mean) / std };
        }
    }
}

/// Applies fitted statistics to `cohort`.
pub fn apply_standardization(stats: &Standardization, cohort: &Cohort) -> Result<Cohort> {
    require_complete(cohort)?;
    let mut out = cohort.clone();
    for s in &mut out.subjects {
        if s.uds.features.len() != stats.uds_mean.len() {
            return Err(Error::shape(
                "standardize",
                &[stats.uds_mean.len()],
                &[s.uds.features.len()],
            ));
        }
        for ((x, m), sd) in s.uds.features.iter_mut().zip(&stats.uds_mean).zip(&stats.uds_std) {
            *x = if *sd < MIN_STD { 0.0 } else { (*x - m) / sd };
        }
        if stats.mri_per_subject {
            let cols = s.mri.modality.feature_dim();
            normalize_mri(&mut s.mri.features, cols);
        }
    }
    out.standardization = Some(stats.clone());
    Ok(out)
}

/// Standardises `apply_to` with statistics of `train`.
pub fn standardize(train: &Cohort, apply_to: &Cohort) -> Result<Cohort> {
    apply_standardization(&fit_standardization(train)?, apply_to)
}
