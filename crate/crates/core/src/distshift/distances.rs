use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SampleMatrix;
use crate::error::{Error, Result};

/// Eigenvalues of the matrices under a square root may dip this far below
/// zero from rounding before they count as an error.
pub const FRECHET_EIGEN_TOLERANCE: f64 = 1e-8;

fn same_width(op: &'static str, x: &SampleMatrix, y: &SampleMatrix) -> Result<()> {
    if x.d != y.d {
        return Err(Error::shape(op, &[x.n, x.d], &[y.n, y.d]));
    }
    if x.n == 0 || y.n == 0 {
        return Err(Error::Metric(format!("{op} needs two non-empty samples")));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of `f(‖a_i − b_j‖²)` over all pairs, with the diagonal left out
/// when `skip_diagonal` (for `a` and `b` the same sample). Rows are summed
/// in parallel and then reduced in row order.
fn pair_sum(a: &SampleMatrix, b: &SampleMatrix, skip_diagonal: bool, f: impl Fn(f64) -> f64 + Sync) -> f64 {
    let rows: Vec<f64> = (0..a.n)
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            (0..b.n)
                .filter(|&j| !(skip_diagonal && i == j))
                .map(|j| f(sq_dist(ai, b.row(j))))
                .sum()
        })
        .collect();
    rows.iter().sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    }
}

/// Median distance over distinct pairs of the pooled sample, or `None`
/// when there are no pairs.
fn median_distance(x: &SampleMatrix, y: &SampleMatrix) -> Option<f64> {
    let n = x.n + y.n;
    let row = |i: usize| if i < x.n { x.row(i) } else { y.row(i - x.n) };
    let d: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| (i + 1..n).map(move |j| sq_dist(row(i), row(j)).sqrt()))
        .collect();
    (!d.is_empty()).then(|| median(d))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mmd {
    /// V-statistic: every kernel entry, diagonals included.
    pub mmd2_biased: f64,
    /// U-statistic; needs two rows on each side.
    pub mmd2_unbiased: Option<f64>,
    pub bandwidth_used: f64,
    /// The median heuristic found no spread and 1.0 was used instead.
    pub bandwidth_fallback: bool,
}

/// Squared MMD with `k(a, b) = exp(−‖a − b‖² / (2σ²))`. Without an explicit
/// bandwidth, σ is the median pairwise distance over `X ∪ Y`.
pub fn mmd_rbf(x: &SampleMatrix, y: &SampleMatrix, bandwidth: Option<f64>) -> Result<Mmd> {
    same_width("mmd_rbf", x, y)?;
    let (sigma, fallback) = match bandwidth {
        Some(s) if s > 0.0 && s.is_finite() => (s, false),
        Some(s) => return Err(Error::Metric(format!("bandwidth must be positive, got {s}"))),
        None => match median_distance(x, y) {
            Some(m) if m > 0.0 => (m, false),
            _ => (1.0, true),
        },
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = move |d2: f64| (-gamma * d2).exp();
    let (nx, ny) = (x.n as f64, y.n as f64);
    let xx_off = pair_sum(x, x, true, k);
    let yy_off = pair_sum(y, y, true, k);
    let xy = pair_sum(x, y, false, k);
    // k(a, a) = 1, so each diagonal adds n.
    let biased = (xx_off + nx) / (nx * nx) + (yy_off + ny) / (ny * ny) - 2.0 * xy / (nx * ny);
    let unbiased = (x.n >= 2 && y.n >= 2)
        .then(|| xx_off / (nx * (nx - 1.0)) + yy_off / (ny * (ny - 1.0)) - 2.0 * xy / (nx * ny));
    Ok(Mmd {
        mmd2_biased: biased,
        mmd2_unbiased: unbiased,
        bandwidth_used: sigma,
        bandwidth_fallback: fallback,
    })
}

fn moments(x: &SampleMatrix) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if x.n < 2 {
        return Err(Error::Metric("a covariance needs at least two rows".into()));
    }
    let d = x.d;
    let mut mean = vec![0.0; d];
    for i in 0..x.n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= x.n as f64);
    let centred = DMatrix::from_fn(x.n, d, |i, j| x.data[i * d + j] - mean[j]);
    let cov = centred.transpose() * &centred / (x.n as f64 - 1.0);
    Ok((mean, cov))
}

/// Eigen-decomposes a symmetric matrix, clamping rounding-level negative
/// eigenvalues to zero.
fn clamped_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    for l in eig.eigenvalues.iter_mut() {
        if *l < -FRECHET_EIGEN_TOLERANCE {
            return Err(Error::Metric(format!("{what} has eigenvalue {l:.3e}")));
        }
        *l = l.max(0.0);
    }
    Ok(eig)
}

/// Squared Fréchet distance between Gaussians with the given moments.
pub fn frechet_from_moments(
    mean_x: &[f64],
    cov_x: &DMatrix<f64>,
    mean_y: &[f64],
    cov_y: &DMatrix<f64>,
) -> Result<f64> {
    let d = mean_x.len();
    if mean_y.len() != d || cov_x.shape() != (d, d) || cov_y.shape() != (d, d) {
        return Err(Error::shape("frechet", &[d, d], &[cov_y.nrows(), cov_y.ncols()]));
    }
    if cov_x.iter().chain(cov_y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Metric("covariance is not finite".into()));
    }
    let ex = clamped_eigen(cov_x.clone(), "covariance of X")?;
    let root_x = &ex.eigenvectors
        * DMatrix::from_diagonal(&ex.eigenvalues.map(f64::sqrt))
        * ex.eigenvectors.transpose();
    let inner = &root_x * cov_y * &root_x;
    let cross: f64 = clamped_eigen(inner, "the cross term")?.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let mean_term: f64 = mean_x.iter().zip(mean_y).map(|(a, b)| (a - b) * (a - b)).sum();
    let d2 = mean_term + cov_x.trace() + cov_y.trace() - 2.0 * cross;
    Ok(d2.max(0.0))
}

/// `‖μ_X − μ_Y‖² + tr(Σ_X + Σ_Y − 2(Σ_X^½ Σ_Y Σ_X^½)^½)` with sample
/// covariances over `n − 1`.
pub fn frechet_distance(x: &SampleMatrix, y: &SampleMatrix) -> Result<f64> {
    same_width("frechet_distance", x, y)?;
    let (mx, cx) = moments(x)?;
    let (my, cy) = moments(y)?;
    frechet_from_moments(&mx, &cx, &my, &cy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyDistance {
    /// Within-sample means over distinct pairs; a sample of one row
    /// contributes zero.
    pub distinct: f64,
    /// Within-sample means over all `n²` pairs; zero when `X = Y`.
    pub v_statistic: f64,
}

/// `2·E‖x − y‖ − E‖x − x'‖ − E‖y − y'‖` in both pair conventions.
pub fn energy_distance(x: &SampleMatrix, y: &SampleMatrix) -> Result<EnergyDistance> {
    same_width("energy_distance", x, y)?;
    let (nx, ny) = (x.n as f64, y.n as f64);
    let xx = pair_sum(x, x, true, f64::sqrt);
    let yy = pair_sum(y, y, true, f64::sqrt);
    let cross = 2.0 * pair_sum(x, y, false, f64::sqrt) / (nx * ny);
    let distinct = |s: f64, n: f64| if n >= 2.0 { s / (n * (n - 1.0)) } else { 0.0 };
    Ok(EnergyDistance {
        distinct: cross - distinct(xx, nx) - distinct(yy, ny),
        v_statistic: cross - xx / (nx * nx) - yy / (ny * ny),
    })
}

/// Kolmogorov survival function `P(K > λ)`.
///
/// Uses the alternating series in `exp(−2k²λ²)` for large `λ` and the
/// Jacobi-transformed series for small `λ`, where the first converges
/// slowly.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        let pi2 = std::f64::consts::PI.powi(2);
        let c = (2.0 * std::f64::consts::PI).sqrt() / lambda;
        let mut cdf = 0.0;
        for k in 1..=100 {
            let m = (2 * k - 1) as f64;
            let term = (-m * m * pi2 / (8.0 * lambda * lambda)).exp();
            cdf += term;
            if term < 1e-18 {
                break;
            }
        }
        (1.0 - c * cdf).clamp(0.0, 1.0)
    } else {
        let mut sum = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            sum += if k % 2 == 1 { term } else { -term };
            if term < 1e-18 {
                break;
            }
        }
        (2.0 * sum).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsFeature {
    pub statistic: f64,
    /// Asymptotic two-sample p-value.
    pub p_value: f64,
}

/// Two-sample KS statistic `sup |F_X − F_Y|` by a merged sweep over the
/// sorted samples, with ties stepped together.
pub fn ks_two_sample(x: &[f64], y: &[f64]) -> Result<KsFeature> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Metric("KS test needs two non-empty samples".into()));
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let v = a[i].min(b[j]);
        while i < n && a[i] <= v {
            i += 1;
        }
        while j < m && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    Ok(KsFeature {
        statistic: d,
        p_value: kolmogorov_sf(ne.sqrt() * d),
    })
}

pub fn ks_per_feature(x: &SampleMatrix, y: &SampleMatrix) -> Result<Vec<KsFeature>> {
    same_width("ks_per_feature", x, y)?;
    (0..x.d).map(|j| ks_two_sample(&x.column(j), &y.column(j))).collect()
}
