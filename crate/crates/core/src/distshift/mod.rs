//! Two-sample distances between real and synthetic cohorts, in raw feature
//! space and in the fused embedding space of frozen encoders.

mod distances;
mod report;

pub use distances::{
    energy_distance, frechet_distance, frechet_from_moments, kolmogorov_sf, ks_per_feature, ks_two_sample,
    mmd_rbf, EnergyDistance, KsFeature, Mmd, FRECHET_EIGEN_TOLERANCE,
};
pub use report::{shift_report, ClassTag, ShiftReport, ShiftRow, Space};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n × d` observations, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMatrix {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::shape("sample_matrix", &[n, d], &[data.len()]));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Metric(format!(
                "sample matrix entry ({}, {}) is not finite",
                i / d.max(1),
                i % d.max(1)
            )));
        }
        Ok(SampleMatrix { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::contract("rows of a sample matrix must share one length"));
        }
        SampleMatrix::new(rows.len(), d, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.data[i * self.d + j]).collect()
    }

    pub fn select(&self, rows: &[usize]) -> SampleMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.d);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        SampleMatrix {
            n: rows.len(),
            d: self.d,
            data,
        }
    }
}

#[cfg(test)]
mod tests;
