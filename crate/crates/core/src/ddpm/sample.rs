use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::denoiser::NoisePredictor;
use super::schedule::{NoiseSchedule, ReverseVariance};
use crate::error::{Error, Result};
use crate::graphdata::{unflatten, Cohort, Covariates, Label, Provenance, Subject, FLAT_DIM};
use crate::rng;

/// Rows generated per independent random stream.
pub const SAMPLE_CHUNK: usize = 128;

/// Ancestral sampling of `n` vectors with label `label`.
///
/// Chunks use independent streams derived from `seed` and are concatenated
/// in chunk order, so the result does not depend on scheduling.
pub fn sample_vectors(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    label: usize,
    n: usize,
    seed: u64,
    variance: ReverseVariance,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::contract("sample size must be positive"));
    }
    if label > 1 {
        return Err(Error::contract(format!("label {label} is not 0 or 1")));
    }
    let dim = predictor.data_dim();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(SAMPLE_CHUNK)
        .enumerate()
        .map(|(c, start)| (c, (n - start).min(SAMPLE_CHUNK)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(c, rows)| {
            let mut rng = rng::stream(seed, if label == 1 { "ddpm-sample-1" } else { "ddpm-sample-0" }, c as u64);
            sample_chunk(predictor, schedule, label, rows, dim, variance, &mut rng)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(parts.concat())
}

fn sample_chunk<R: Rng + ?Sized>(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    label: usize,
    rows: usize,
    dim: usize,
    variance: ReverseVariance,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut x: Vec<f64> = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    let y = vec![label; rows];
    for t in (1..=schedule.timesteps).rev() {
        let eps = predictor.predict(&x, &vec![t; rows], &y)?;
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
        let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let sigma = if t > 1 { schedule.sigma(t, variance) } else { 0.0 };
        for (xi, ei) in x.iter_mut().zip(&eps) {
            let mean = inv_sqrt_alpha * (*xi - coef * ei);
            *xi = if t > 1 {
                mean + sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                mean
            };
        }
    }
    Ok(x)
}

/// Generates a synthetic cohort with `counts[label]` subjects per class.
/// Covariates and site are copied from a random training subject of the
/// same class.
pub fn sample_cohort(
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    counts: [usize; 2],
    seed: u64,
    variance: ReverseVariance,
    covariate_pool: &Cohort,
) -> Result<Cohort> {
    if predictor.data_dim() != FLAT_DIM {
        return Err(Error::shape("sample_cohort", &[predictor.data_dim()], &[FLAT_DIM]));
    }
    let mut subjects = Vec::with_capacity(counts[0] + counts[1]);
    let mut cov_rng = rng::stream(seed, "ddpm-covariates", 0);
    for (label_idx, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let label = Label::from_index(label_idx)?;
        let pool: Vec<(Covariates, u32)> = covariate_pool
            .subjects
            .iter()
            .filter(|s| s.label == label)
            .map(|s| (s.covariates, s.site_id))
            .collect();
        if pool.is_empty() {
            return Err(Error::contract(format!("no class-{label_idx} subjects to draw covariates from")));
        }
        let data = sample_vectors(predictor, schedule, label_idx, n, seed, variance)?;
        for row in data.chunks(FLAT_DIM) {
            let (mri, uds) = unflatten(row)?;
            let (covariates, site_id) = pool[cov_rng.random_range(0..pool.len())];
            subjects.push(Subject {
                id: format!("syn{}", subjects.len()),
                label,
                covariates,
                site_id,
                mri,
                uds,
            });
        }
    }
    if subjects.is_empty() {
        return Err(Error::contract("sample size must be positive"));
    }
    Ok(Cohort::new(subjects, Provenance::DdpmSynthetic, Arc::clone(&covariate_pool.layout)))
}

/// `n` subjects split evenly between the classes (AD gets the odd one).
pub fn balanced_counts(n: usize) -> [usize; 2] {
    [n / 2, n - n / 2]
}
