//! Small numerical helpers shared by the mixture, filter and bound code.

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

/// ln(2π)
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Numerically stable `ln Σ exp(v)`. Returns `-inf` for an empty slice or all `-inf` inputs.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn std_normal_pdf(t: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

/// Φ(t), accurate in the lower tail.
pub fn std_normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t * FRAC_1_SQRT_2)
}

/// 1 − Φ(t), accurate in the upper tail.
pub fn std_normal_sf(t: f64) -> f64 {
    0.5 * erfc(t * FRAC_1_SQRT_2)
}

/// P(a < T < b) for standard normal T without catastrophic cancellation in either tail.
pub fn std_normal_interval_mass(a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    if a >= 0.0 {
        std_normal_sf(a) - std_normal_sf(b)
    } else if b <= 0.0 {
        std_normal_cdf(b) - std_normal_cdf(a)
    } else {
        1.0 - std_normal_cdf(a) - std_normal_sf(b)
    }
}

pub fn to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in (r + 1)..n {
            let avg = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = avg;
            m[(c, r)] = avg;
        }
    }
}

/// Symmetrizes `m` and clamps small negative eigenvalues to zero.
///
/// Asymmetry or negative eigenvalues larger than `tol` (relative to the largest
/// entry, floored at 1) are reported as errors instead of being absorbed.
pub fn sanitize_covariance(mut m: DMatrix<f64>, tol: f64, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "{what}: covariance is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}: covariance has non-finite entries")));
    }
    let scale = max_abs(&m).max(1.0);
    let asym = (&m - m.transpose()).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if asym > tol * scale {
        return Err(Error::InvalidArgument(format!(
            "{what}: covariance asymmetric by {asym:e}"
        )));
    }
    symmetrize(&mut m);
    if m.nrows() == 0 || m.clone().cholesky().is_some() {
        return Ok(m);
    }
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return Ok(m);
    }
    if min < -tol * scale {
        return Err(Error::Numeric(format!(
            "{what}: covariance not positive semidefinite (min eigenvalue {min:e})"
        )));
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Square-root factor `L` with `L Lᵀ = cov`; works for singular PSD matrices.
pub fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = cov.clone().cholesky() {
        return ch.l();
    }
    let eig = cov.clone().symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

/// Log density of N(x; mean, cov) for nonsingular `cov`.
pub fn log_gaussian_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mean.len() || cov.nrows() != mean.len() {
        return Err(Error::Dimension(format!(
            "point has dimension {}, Gaussian has dimension {}",
            x.len(),
            mean.len()
        )));
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("density of a singular covariance".into()))?;
    let diff = x - mean;
    let y = chol.l().solve_lower_triangular(&diff).ok_or_else(|| {
        Error::Numeric("triangular solve failed in density evaluation".into())
    })?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (mean.len() as f64 * LN_2PI + log_det + y.norm_squared()))
}
