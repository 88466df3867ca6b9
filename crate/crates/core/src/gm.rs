//! Gaussian and Gaussian-mixture primitives.
//!
//! Mixtures carry the process and measurement noise models. Components may be
//! rank deficient (the lifted process-noise clusters are rank one), but density
//! evaluation requires nonsingular covariances.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{self, log_sum_exp, sanitize_covariance};
use crate::quad;

/// Construction tolerance: drift below this is absorbed, anything above is an error.
pub const CONSTRUCTION_TOL: f64 = 1e-6;

/// Integration half-width of the KL quadrature, in moment-matched standard deviations.
pub const KL_RANGE_SDS: f64 = 12.0;
pub const KL_ABS_TOL: f64 = 1e-4;
pub const KL_MC_DEFAULT_SAMPLES: usize = 2_000_000;
const KL_MC_CHUNKS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension(format!(
                "mean has dimension {}, covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite mean".into()));
        }
        let cov = sanitize_covariance(cov, CONSTRUCTION_TOL, "Gaussian")?;
        let factor = numeric::psd_factor(&cov);
        Ok(Self { mean, cov, factor })
    }

    pub fn univariate(mean: f64, variance: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, variance),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        numeric::log_gaussian_density(x, &self.mean, &self.cov)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eps = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.factor * eps
    }

    /// `√((x−μ)ᵀ Σ⁻¹ (x−μ))`.
    pub fn mahalanobis(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has dimension {}, Gaussian has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let chol = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("Mahalanobis distance with singular covariance".into()))?;
        let y = chol
            .l()
            .solve_lower_triangular(&(x - &self.mean))
            .ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
        Ok(y.norm())
    }

    /// Image under `x ↦ A x`.
    pub fn transform(&self, a: &DMatrix<f64>) -> Result<Self> {
        if a.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "transform has {} columns, Gaussian has dimension {}",
                a.ncols(),
                self.dim()
            )));
        }
        Self::new(a * &self.mean, a * &self.cov * a.transpose())
    }
}

/// Free-function form of [`Gaussian::mahalanobis`].
pub fn mahalanobis(x: &DVector<f64>, comp: &Gaussian) -> Result<f64> {
    comp.mahalanobis(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

/// A KL divergence estimate; `std_error` is zero for quadrature results.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlMethod {
    Quadrature,
    MonteCarlo { samples: usize, seed: u64 },
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::Dimension("mixture components differ in dimension".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidArgument(format!("invalid mixture weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > CONSTRUCTION_TOL {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}")));
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self { weights, components })
    }

    pub fn univariate(weights: &[f64], means: &[f64], variances: &[f64]) -> Result<Self> {
        if means.len() != weights.len() || variances.len() != weights.len() {
            return Err(Error::InvalidArgument("parameter lists differ in length".into()));
        }
        let comps = means
            .iter()
            .zip(variances)
            .map(|(&m, &v)| Gaussian::univariate(m, v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights.to_vec(), comps)
    }

    pub fn single(component: Gaussian) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![component],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    /// `ln Σᵢ wᵢ 𝒩(x; μᵢ, Σᵢ)` via log-sum-exp.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has dimension {}, mixture has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let terms = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| Ok(w.ln() + c.log_density(x)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(log_sum_exp(&terms))
    }

    /// Draws a point together with the index of the component that produced it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, usize) {
        let label = self.sample_label(rng);
        (self.components[label].sample(rng), label)
    }

    pub fn sample_label<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.weights.len() == 1 {
            return 0;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding gap above the cumulative sum
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    /// Gaussian with the mixture's mean and covariance.
    pub fn moment_match(&self) -> Gaussian {
        let dim = self.dim();
        let mut mean = DVector::zeros(dim);
        for (w, c) in self.weights.iter().zip(&self.components) {
            mean += *w * c.mean();
        }
        let mut cov = DMatrix::zeros(dim, dim);
        for (w, c) in self.weights.iter().zip(&self.components) {
            let d = &mean - c.mean();
            cov += *w * (c.cov() + &d * d.transpose());
        }
        Gaussian::new(mean, cov).expect("moment matching preserves symmetry and semidefiniteness")
    }

    /// Image of every component under `x ↦ A x`; weights unchanged.
    pub fn transform(&self, a: &DMatrix<f64>) -> Result<Self> {
        let components = self
            .components
            .iter()
            .map(|c| c.transform(a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights: self.weights.clone(),
            components,
        })
    }

    /// Adds `offset` to every component mean.
    pub fn shifted(&self, offset: &DVector<f64>) -> Result<Self> {
        let components = self
            .components
            .iter()
            .map(|c| Gaussian::new(c.mean() + offset, c.cov().clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights: self.weights.clone(),
            components,
        })
    }

    /// Reorders components so that new component `k` is old component `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() || order.iter().any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidArgument("not a permutation of the components".into()));
        }
        Ok(Self {
            weights: order.iter().map(|&i| self.weights[i]).collect(),
            components: order.iter().map(|&i| self.components[i].clone()).collect(),
        })
    }

    /// `D_KL(gm ‖ moment_match(gm))` in nats. Quadrature for univariate
    /// mixtures, Monte Carlo otherwise.
    pub fn kl_vs_moment_matched(&self) -> Result<KlEstimate> {
        let method = if self.dim() == 1 {
            KlMethod::Quadrature
        } else {
            KlMethod::MonteCarlo {
                samples: KL_MC_DEFAULT_SAMPLES,
                seed: 0,
            }
        };
        self.kl_vs_moment_matched_with(method)
    }

    pub fn kl_vs_moment_matched_with(&self, method: KlMethod) -> Result<KlEstimate> {
        let matched = self.moment_match();
        match method {
            KlMethod::Quadrature => self.kl_quadrature(&matched),
            KlMethod::MonteCarlo { samples, seed } => self.kl_monte_carlo(&matched, samples, seed),
        }
    }

    fn kl_quadrature(&self, matched: &Gaussian) -> Result<KlEstimate> {
        if self.dim() != 1 {
            return Err(Error::Unsupported(
                "quadrature KL requires a univariate mixture".into(),
            ));
        }
        let mean = matched.mean()[0];
        let var = matched.cov()[(0, 0)];
        if var <= 0.0 {
            return Err(Error::Numeric("degenerate mixture has no density".into()));
        }
        let sd = var.sqrt();
        let narrowest = self
            .components
            .iter()
            .map(|c| c.cov()[(0, 0)].sqrt())
            .fold(f64::INFINITY, f64::min);
        if narrowest <= 0.0 {
            return Err(Error::Numeric("component with zero variance has no density".into()));
        }
        let log_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        let params: Vec<(f64, f64)> = self
            .components
            .iter()
            .map(|c| (c.mean()[0], c.cov()[(0, 0)]))
            .collect();
        let log_q_norm = -0.5 * (numeric::LN_2PI + var.ln());
        let log_comp = |x: f64, (m, v): (f64, f64), lw: f64| {
            lw - 0.5 * (numeric::LN_2PI + v.ln()) - (x - m) * (x - m) / (2.0 * v)
        };
        let integrand = |x: f64| {
            let max = params
                .iter()
                .zip(&log_w)
                .map(|(p, lw)| log_comp(x, *p, *lw))
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return 0.0;
            }
            let sum: f64 = params
                .iter()
                .zip(&log_w)
                .map(|(p, lw)| (log_comp(x, *p, *lw) - max).exp())
                .sum();
            let lp = max + sum.ln();
            let lq = log_q_norm - (x - mean) * (x - mean) / (2.0 * var);
            lp.exp() * (lp - lq)
        };
        let value = quad::integrate(
            integrand,
            mean - KL_RANGE_SDS * sd,
            mean + KL_RANGE_SDS * sd,
            narrowest,
            KL_ABS_TOL,
        )?;
        Ok(KlEstimate {
            value: value.max(0.0),
            std_error: 0.0,
        })
    }

    fn kl_monte_carlo(&self, matched: &Gaussian, samples: usize, seed: u64) -> Result<KlEstimate> {
        if samples < 2 {
            return Err(Error::InvalidArgument("Monte Carlo KL needs at least 2 samples".into()));
        }
        let chunk = samples.div_ceil(KL_MC_CHUNKS);
        let partials = (0..KL_MC_CHUNKS)
            .into_par_iter()
            .map(|c| {
                let n = chunk.min(samples.saturating_sub(c * chunk));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                let (mut s, mut s2) = (0.0, 0.0);
                for _ in 0..n {
                    let (x, _) = self.sample(&mut rng);
                    let d = self.log_density(&x)? - matched.log_density(&x)?;
                    if !d.is_finite() {
                        return Err(Error::Numeric("non-finite log-ratio in Monte Carlo KL".into()));
                    }
                    s += d;
                    s2 += d * d;
                }
                Ok((s, s2))
            })
            .collect::<Result<Vec<_>>>()?;
        let (s, s2) = partials.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let n = samples as f64;
        let mean = s / n;
        let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
        Ok(KlEstimate {
            value: mean,
            std_error: (var / n).sqrt(),
        })
    }
}
