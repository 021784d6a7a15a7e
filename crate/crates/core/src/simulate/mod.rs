//! Latent-factor cohort simulator and the preprocessing applied to it.

mod impute;
mod standardize;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub use impute::{knn_impute, knn_impute_from, missing_count};
pub use standardize::{apply_standardization, fit_standardization, normalize_mri, standardize};

use crate::error::{Error, Result};
use crate::graphdata::{
    Cohort, Covariates, GraphLayout, Label, Modality, ModalityGraph, Provenance, Subject, MRI_NODES,
    UDS_NODES,
};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub n_ad: usize,
    pub n_hc: usize,
    /// Distance between the two class means in latent space.
    pub effect_size: f64,
    pub n_latent: usize,
    pub site_count: usize,
    pub site_sigma: f64,
    /// Probability that a UDS entry is missing.
    pub missing_rate: f64,
    /// Extra latent shift for AD subjects carrying APOE4, as a multiple of
    /// `effect_size`.
    pub apoe4_effect_gain: f64,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            n_ad: 390,
            n_hc: 847,
            effect_size: 2.0,
            n_latent: 8,
            site_count: 4,
            site_sigma: 0.3,
            missing_rate: 0.05,
            apoe4_effect_gain: 0.0,
            seed: 0,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_ad == 0 || self.n_hc == 0 {
            return Err(Error::Config("n_ad and n_hc must be positive".into()));
        }
        if self.n_latent == 0 || self.site_count == 0 {
            return Err(Error::Config("n_latent and site_count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!(
                "missing_rate must lie in [0, 1), got {}",
                self.missing_rate
            )));
        }
        for (name, v) in [
            ("effect_size", self.effect_size),
            ("site_sigma", self.site_sigma),
            ("apoe4_effect_gain", self.apoe4_effect_gain),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_ad + self.n_hc
    }
}

/// Fixed maps from latent factors to node features, shared by every
/// subject simulated from one seed.
#[derive(Clone, Debug)]
pub struct Loadings {
    /// `124 × n_latent`, row-major, one row per MRI feature.
    pub mri: Vec<f64>,
    /// `170 × n_latent`.
    pub uds: Vec<f64>,
    /// Unit direction separating the class means.
    pub direction: Vec<f64>,
    pub n_latent: usize,
}

impl Loadings {
    /// Factor 0 carries the disease: it loads negatively on a narrow focus
    /// of MRI regions in both columns and on most UDS items, and the class
    /// means differ along it alone. The other factors are nuisance: wide
    /// MRI bumps with a random sign per column, and one factor per UDS
    /// domain. A disease signal that is local and sign-consistent survives
    /// per-subject MRI normalization and can be read without knowing which
    /// region is which.
    pub fn generate(spec: &SimSpec, layout: &GraphLayout) -> Self {
        let l = spec.n_latent;
        let mut rng = rng::stream(spec.seed, "sim-loadings", 0);
        let grid = layout.mri_grid;
        let mut mri = vec![0.0; MRI_NODES * 2 * l];
        for f in 0..l {
            let cr = rng.random_range(0.0..grid.rows as f64);
            let cc = rng.random_range(0.0..grid.cols as f64);
            let (width, amplitude, signs) = if f == 0 {
                (rng.random_range(1.0..1.5), 2.0, [-1.0, -0.8])
            } else {
                let width = rng.random_range(2.5..4.0);
                let signs = [0, 1].map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
                (width, 1.0, signs)
            };
            for u in 0..MRI_NODES {
                let (r, c) = grid.position(u);
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                let bump = (-d2 / (2.0 * width * width)).exp();
                for (col, sign) in signs.iter().enumerate() {
                    let jitter: f64 = 0.15 * rng.sample::<f64, _>(StandardNormal);
                    mri[(u * 2 + col) * l + f] = amplitude * sign * bump + jitter;
                }
            }
        }
        let mut uds = vec![0.0; UDS_NODES * l];
        for u in 0..UDS_NODES {
            let domain = layout.uds_domains.domain_of(u).unwrap_or(0);
            let nuisance = if l > 1 { 1 + domain % (l - 1) } else { 0 };
            let magnitude = rng.random_range(0.4..1.0);
            let sign = if rng.random_bool(0.8) { 1.0 } else { -1.0 };
            uds[u * l] = sign * magnitude;
            let magnitude = rng.random_range(0.4..1.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            uds[u * l + nuisance] += sign * magnitude;
            for f in 0..l {
                uds[u * l + f] += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut direction = vec![0.0; l];
        direction[0] = 1.0;
        Loadings {
            mri,
            uds,
            direction,
            n_latent: l,
        }
    }

    fn project(map: &[f64], l: usize, z: &[f64], out: &mut [f64]) {
        for (row, o) in map.chunks(l).zip(out.iter_mut()) {
            *o = row.iter().zip(z).map(|(a, b)| a * b).sum();
        }
    }
}

/// Per-site additive offsets for every feature.
fn site_offsets(spec: &SimSpec) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = rng::stream(spec.seed, "sim-sites", 0);
    let normal = Normal::new(0.0, spec.site_sigma).expect("non-negative sigma");
    (0..spec.site_count)
        .map(|_| {
            let mri = (0..Modality::Mri.flat_len()).map(|_| normal.sample(&mut rng)).collect();
            let uds = (0..Modality::Uds.flat_len()).map(|_| normal.sample(&mut rng)).collect();
            (mri, uds)
        })
        .collect()
}

/// Simulates a labelled cohort with the standard layout.
pub fn simulate_cohort(spec: &SimSpec) -> Result<Cohort> {
    simulate_with_layout(spec, Arc::new(GraphLayout::standard()))
}

pub fn simulate_with_layout(spec: &SimSpec, layout: Arc<GraphLayout>) -> Result<Cohort> {
    spec.validate()?;
    let loadings = Loadings::generate(spec, &layout);
    let sites = site_offsets(spec);
    let l = spec.n_latent;

    let mut labels: Vec<Label> = std::iter::repeat_n(Label::Ad, spec.n_ad)
        .chain(std::iter::repeat_n(Label::Hc, spec.n_hc))
        .collect();
    labels.shuffle(&mut rng::stream(spec.seed, "sim-order", 0));

    let width = spec.total().to_string().len().max(4);
    let subjects = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = rng::stream(spec.seed, "sim-subject", i as u64);
            let ad = label == Label::Ad;
            let age = rng.sample::<f64, _>(StandardNormal) * 7.0 + if ad { 76.0 } else { 72.0 };
            let sex = u8::from(rng.random_bool(0.5));
            let apoe4 = rng.random_bool(if ad { 0.55 } else { 0.25 });
            let site = rng.random_range(0..spec.site_count);

            let shift = if ad {
                spec.effect_size * (1.0 + if apoe4 { spec.apoe4_effect_gain } else { 0.0 })
            } else {
                0.0
            };
            let z: Vec<f64> = (0..l)
                .map(|f| shift * loadings.direction[f] + rng.sample::<f64, _>(StandardNormal))
                .collect();

            let mut mri = vec![0.0; Modality::Mri.flat_len()];
            Loadings::project(&loadings.mri, l, &z, &mut mri);
            for (x, off) in mri.iter_mut().zip(&sites[site].0) {
                *x += off + rng.sample::<f64, _>(StandardNormal);
            }
            let mut uds = vec![0.0; Modality::Uds.flat_len()];
            Loadings::project(&loadings.uds, l, &z, &mut uds);
            for (x, off) in uds.iter_mut().zip(&sites[site].1) {
                *x += off + rng.sample::<f64, _>(StandardNormal);
            }
            if spec.missing_rate > 0.0 {
                for x in uds.iter_mut() {
                    if rng.random_bool(spec.missing_rate) {
                        *x = f64::NAN;
                    }
                }
            }
            Subject {
                id: format!("sim{i:0width$}"),
                label,
                covariates: Covariates { age, sex, apoe4 },
                site_id: site as u32,
                mri: ModalityGraph {
                    modality: Modality::Mri,
                    features: mri,
                },
                uds: ModalityGraph {
                    modality: Modality::Uds,
                    features: uds,
                },
            }
        })
        .collect();
    Ok(Cohort::new(subjects, Provenance::SimulatedReal, layout))
}

#[cfg(test)]
mod tests;
