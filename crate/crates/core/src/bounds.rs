//! Analytic bounds on the MMSE of a GSF step and Monte Carlo estimators of
//! unconditional MSE.
//!
//! Everything here is evaluated on one [`ModeBank`]: the lower bound is the
//! unconditional MSE of the oracle Matched filter, the GSF-R bound is the
//! unconditional MSE of the max-weight filter (closed form for scalar
//! measurements via truncated Gaussian moments over the selection regions),
//! and the LMMSE bound is the trace of the moment-matched Kalman covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filters::ModeBank;
use crate::numeric::{std_normal_interval_mass, std_normal_pdf, LN_2PI};

/// Default sample count of the Monte Carlo GSF-R bound (vector measurements).
pub const MC_DEFAULT_SAMPLES: usize = 100_000;
/// z-score multiplier of the reported confidence interval.
pub const CI95_Z: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// Monte Carlo settings. Samples are split into `chunks` independent streams
/// whose partial sums are combined in chunk order, so the result does not
/// depend on how many threads ran them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
    pub chunks: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            samples: MC_DEFAULT_SAMPLES,
            seed: 0,
            chunks: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpperBoundMethod {
    Analytic1d,
    MonteCarlo(McConfig),
}

/// Per-step bound values (traces, state units squared).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsRecord {
    pub lb: f64,
    pub ub_gsfr: f64,
    pub ub_lmmse: f64,
    pub ub_combined: f64,
    pub tr_m1: f64,
    pub tr_m2: f64,
}

impl BoundsRecord {
    /// Evaluates all bounds for one step. `p_lmmse` is the LMMSE filter's posterior covariance.
    pub fn evaluate(bank: &ModeBank, p_lmmse: &DMatrix<f64>, method: UpperBoundMethod) -> Result<Self> {
        let (tr_m1, tr_m2) = trace_m1_m2(bank);
        let ub_gsfr = gsf_r_upper_bound(bank, method)?.value;
        let ub_lmmse = lmmse_upper_bound(p_lmmse);
        Ok(Self {
            lb: tr_m1,
            ub_gsfr,
            ub_lmmse,
            ub_combined: combined_upper_bound(ub_gsfr, ub_lmmse),
            tr_m1,
            tr_m2,
        })
    }
}

/// `Σᵢⱼ 𝒲ᵢ𝒫ⱼ tr(Pᵢⱼ)`, weighted by priors rather than posterior weights.
pub fn lower_bound(bank: &ModeBank) -> f64 {
    bank.modes.iter().map(|m| m.prior * m.kf.p_post.trace()).sum()
}

/// `(tr ℳ¹, tr ℳ²)` with ℳ¹ = Σ𝒲𝒫 Pᵢⱼ and ℳ² = Σ𝒲𝒫 (x̂ᵢx̂ᵢᵀ + W S Wᵀ).
pub fn trace_m1_m2(bank: &ModeBank) -> (f64, f64) {
    let m1 = lower_bound(bank);
    let m2 = bank
        .modes
        .iter()
        .map(|m| {
            let wsw = &m.kf.gain * &m.kf.s * m.kf.gain.transpose();
            m.prior * (m.kf.x_pred.norm_squared() + wsw.trace())
        })
        .sum();
    (m1, m2)
}

pub fn lmmse_upper_bound(p_k: &DMatrix<f64>) -> f64 {
    p_k.trace()
}

pub fn combined_upper_bound(ub_gsfr: f64, ub_lmmse: f64) -> f64 {
    ub_gsfr.min(ub_lmmse)
}

/// Open interval `(lo, hi)`; endpoints may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const REAL_LINE: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub fn contains(&self, z: f64) -> bool {
        self.lo < z && z < self.hi
    }
}

/// Partition of the scalar measurement line into the regions where each mode
/// has the largest prior-weighted likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDecomposition {
    pub n_process: usize,
    pub n_measurement: usize,
    /// Indexed like `ModeBank::modes`.
    pub regions: Vec<Vec<Interval>>,
    /// Points where ownership changes, ascending.
    pub boundaries: Vec<f64>,
    /// Some pair of modes has identical weighted densities everywhere; their
    /// shared region went to the lexicographically smallest mode.
    pub coincident: bool,
}

impl RegionDecomposition {
    pub fn region(&self, i: usize, j: usize) -> &[Interval] {
        &self.regions[i * self.n_measurement + j]
    }

    /// Mode index owning `z`, or `None` on a boundary point.
    pub fn owner_of(&self, z: f64) -> Option<usize> {
        self.regions
            .iter()
            .position(|r| r.iter().any(|iv| iv.contains(z)))
    }
}

/// Weighted log density coefficients `g(z) = c0 + c1 z + c2 z²`.
#[derive(Clone, Copy)]
struct LogQuadratic {
    c0: f64,
    c1: f64,
    c2: f64,
}

impl LogQuadratic {
    fn new(prior: f64, mean: f64, var: f64) -> Self {
        Self {
            c0: prior.ln() - 0.5 * (LN_2PI + var.ln()) - mean * mean / (2.0 * var),
            c1: mean / var,
            c2: -1.0 / (2.0 * var),
        }
    }

    fn eval(&self, z: f64) -> f64 {
        self.c0 + z * (self.c1 + z * self.c2)
    }
}

fn scalar_bank_params(bank: &ModeBank) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("empty bank".into()));
    }
    if bank.nz() != 1 {
        return Err(Error::Unsupported(format!(
            "analytic regions need scalar measurements, bank has n_z = {}",
            bank.nz()
        )));
    }
    let z_ref: f64 = bank.modes.iter().map(|m| m.prior * m.kf.z_pred[0]).sum();
    let means = bank.modes.iter().map(|m| m.kf.z_pred[0] - z_ref).collect();
    let vars: Vec<f64> = bank.modes.iter().map(|m| m.kf.s[(0, 0)]).collect();
    if let Some(v) = vars.iter().find(|v| **v <= 0.0 || !v.is_finite()) {
        return Err(Error::Numeric(format!("non-positive innovation variance {v}")));
    }
    Ok((z_ref, means, vars))
}

fn quadratic_roots(a: f64, b: f64, c: f64, scale: f64, out: &mut Vec<f64>) -> bool {
    // returns true when the two log densities coincide identically
    if a.abs() <= 1e-13 * scale {
        if b.abs() <= 1e-13 * scale {
            return c.abs() <= 1e-12 * (1.0 + c.abs().min(1.0));
        }
        out.push(-c / b);
        return false;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return false;
    }
    let q = -0.5 * (b + b.signum().max(0.0).mul_add(2.0, -1.0) * disc.sqrt());
    if q != 0.0 {
        out.push(q / a);
        out.push(c / q);
    } else {
        out.push(0.0);
    }
    false
}

fn argmax_first(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (k, v) in scores.enumerate() {
        if v > best_val {
            best = k;
            best_val = v;
        }
    }
    best
}

/// Computes the selection regions of a scalar-measurement bank.
pub fn regions_1d(bank: &ModeBank) -> Result<RegionDecomposition> {
    let (z_ref, means, vars) = scalar_bank_params(bank)?;
    let quads: Vec<LogQuadratic> = bank
        .modes
        .iter()
        .zip(means.iter().zip(&vars))
        .map(|(m, (mu, v))| LogQuadratic::new(m.prior, *mu, *v))
        .collect();
    let n = quads.len();
    let mut roots = Vec::new();
    let mut coincident = false;
    for a in 0..n {
        for b in (a + 1)..n {
            let (qa, qb) = (quads[a], quads[b]);
            let scale = qa.c2.abs().max(qb.c2.abs());
            if quads_coincide(&qa, &qb, scale, &mut roots) && bank.modes[a].prior > 0.0 {
                coincident = true;
            }
        }
    }
    roots.retain(|r| r.is_finite());
    roots.sort_by(|a, b| a.partial_cmp(b).expect("finite roots"));
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));

    let probe = |lo: f64, hi: f64| -> f64 {
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (false, true) => hi - 1.0,
            (true, false) => lo + 1.0,
            (false, false) => 0.0,
        }
    };
    let owner_at = |z: f64| argmax_first(quads.iter().map(|q| q.eval(z)));

    let mut edges = Vec::with_capacity(roots.len() + 2);
    edges.push(f64::NEG_INFINITY);
    edges.extend_from_slice(&roots);
    edges.push(f64::INFINITY);

    let mut regions = vec![Vec::<Interval>::new(); n];
    let mut boundaries = Vec::new();
    let mut current: Option<(usize, f64)> = None;
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let owner = owner_at(probe(lo, hi));
        match current {
            Some((o, _)) if o == owner => {}
            Some((o, start)) => {
                regions[o].push(Interval { lo: start, hi: lo });
                boundaries.push(lo + z_ref);
                current = Some((owner, lo));
            }
            None => current = Some((owner, lo)),
        }
    }
    if let Some((o, start)) = current {
        regions[o].push(Interval {
            lo: start,
            hi: f64::INFINITY,
        });
    }
    for r in regions.iter_mut() {
        for iv in r.iter_mut() {
            iv.lo += z_ref;
            iv.hi += z_ref;
        }
    }
    Ok(RegionDecomposition {
        n_process: bank.n_process,
        n_measurement: bank.n_measurement,
        regions,
        boundaries,
        coincident,
    })
}

fn quads_coincide(qa: &LogQuadratic, qb: &LogQuadratic, scale: f64, roots: &mut Vec<f64>) -> bool {
    quadratic_roots(qa.c2 - qb.c2, qa.c1 - qb.c1, qa.c0 - qb.c0, scale, roots)
}

/// Truncated moments of `𝒩(mean, var)` over a union of intervals, not renormalized:
/// `mass = ∫_R 𝒩`, `z_tilde = ∫_R z 𝒩`, `s_tilde = ∫_R (z − z_tilde)² 𝒩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedMoments {
    pub mass: f64,
    pub z_tilde: f64,
    pub s_tilde: f64,
}

impl TruncatedMoments {
    /// `∫_R z² 𝒩`.
    pub fn second_raw(&self) -> f64 {
        self.s_tilde + (2.0 - self.mass) * self.z_tilde * self.z_tilde
    }
}

/// Moments of the standardized variable `t = (z − mean)/sd` over the intervals:
/// `(∫φ, ∫tφ, ∫t²φ)`.
fn standardized_moments(mean: f64, sd: f64, intervals: &[Interval]) -> (f64, f64, f64) {
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for iv in intervals {
        let a = (iv.lo - mean) / sd;
        let b = (iv.hi - mean) / sd;
        if b <= a {
            continue;
        }
        let mass = std_normal_interval_mass(a, b);
        let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
        let apa = if a.is_finite() { a * pa } else { 0.0 };
        let bpb = if b.is_finite() { b * pb } else { 0.0 };
        m0 += mass;
        m1 += pa - pb;
        m2 += mass + apa - bpb;
    }
    (m0, m1, m2)
}

pub fn truncated_moments_1d(mean: f64, var: f64, intervals: &[Interval]) -> Result<TruncatedMoments> {
    if var <= 0.0 || !var.is_finite() || !mean.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "truncated moments need finite mean and positive variance, got ({mean}, {var})"
        )));
    }
    let sd = var.sqrt();
    let (m0, m1, m2) = standardized_moments(mean, sd, intervals);
    let z_tilde = mean * m0 + sd * m1;
    let raw2 = mean * mean * m0 + 2.0 * mean * sd * m1 + var * m2;
    Ok(TruncatedMoments {
        mass: m0,
        z_tilde,
        s_tilde: raw2 - (2.0 - m0) * z_tilde * z_tilde,
    })
}

/// `tr ℳᴿ`, the unconditional MSE of GSF-R on this bank.
pub fn gsf_r_upper_bound(bank: &ModeBank, method: UpperBoundMethod) -> Result<Estimate> {
    match method {
        UpperBoundMethod::Analytic1d => Ok(Estimate {
            value: gsf_r_upper_bound_analytic(bank)?,
            std_error: 0.0,
        }),
        UpperBoundMethod::MonteCarlo(cfg) => gsf_r_upper_bound_mc(bank, cfg),
    }
}

struct ScalarModes {
    priors: Vec<f64>,
    z_hat: Vec<f64>,
    sd: Vec<f64>,
    /// predicted state, centred on the prior-weighted mean
    x_pred: Vec<DVector<f64>>,
    gain: Vec<DVector<f64>>,
}

impl ScalarModes {
    fn new(bank: &ModeBank) -> Result<Self> {
        let (_, z_hat, vars) = scalar_bank_params(bank)?;
        let mut x_ref = DVector::zeros(bank.nx());
        for m in &bank.modes {
            x_ref += m.prior * &m.kf.x_pred;
        }
        Ok(Self {
            priors: bank.priors(),
            z_hat,
            sd: vars.iter().map(|v| v.sqrt()).collect(),
            x_pred: bank.modes.iter().map(|m| &m.kf.x_pred - &x_ref).collect(),
            gain: bank.modes.iter().map(|m| m.kf.gain.column(0).into_owned()).collect(),
        })
    }
}

/// Closed-form `tr ℳᴿ` for scalar measurements.
///
/// Uses `tr ℳᴿ = tr ℳ¹ + Σ_{ij} Σ_{lm} 𝒲ˡ𝒫ᵐ ∫_{ℛᵢⱼ} ‖x̂ˡᵐ(z) − x̂ⁱʲ(z)‖² 𝒩(z; ẑˡᵐ, Sˡᵐ) dz`,
/// which is `ℳ¹ + ℳ² − ℳᴿ¹ − ℳᴿ² + ℳᴿ³` regrouped so every term is nonnegative.
pub fn gsf_r_upper_bound_analytic(bank: &ModeBank) -> Result<f64> {
    let regions = regions_1d(bank)?;
    let z_ref: f64 = bank.modes.iter().map(|m| m.prior * m.kf.z_pred[0]).sum();
    let sm = ScalarModes::new(bank)?;
    let n = bank.len();
    let mut excess = 0.0;
    for (owner, region) in regions.regions.iter().enumerate() {
        if region.is_empty() {
            continue;
        }
        let shifted: Vec<Interval> = region
            .iter()
            .map(|iv| Interval {
                lo: iv.lo - z_ref,
                hi: iv.hi - z_ref,
            })
            .collect();
        for lm in 0..n {
            if lm == owner || sm.priors[lm] == 0.0 {
                continue;
            }
            let (m0, m1, m2) = standardized_moments(sm.z_hat[lm], sm.sd[lm], &shifted);
            if m0 == 0.0 && m1 == 0.0 && m2 == 0.0 {
                continue;
            }
            let sd = sm.sd[lm];
            // x̂ˡᵐ(z) − x̂ⁱʲ(z) = d0 + dw·t with t = z − ẑˡᵐ
            let d0 = &sm.x_pred[lm] - &sm.x_pred[owner] - &sm.gain[owner] * (sm.z_hat[lm] - sm.z_hat[owner]);
            let dw = &sm.gain[lm] - &sm.gain[owner];
            let term = m0 * d0.norm_squared() + 2.0 * sd * m1 * d0.dot(&dw) + sd * sd * m2 * dw.norm_squared();
            excess += sm.priors[lm] * term;
        }
    }
    Ok(lower_bound(bank) + excess.max(0.0))
}

/// ℳᴿ assembled term by term as `ℳ¹ + ℳ² − ℳᴿ¹ − ℳᴿ² + ℳᴿ³`, with every
/// integral over a selection region expanded through truncated moments of the
/// mode's predictive Gaussian. States are centred on the prior-weighted
/// prediction, which leaves ℳᴿ unchanged.
pub fn gsf_r_mse_matrix(bank: &ModeBank) -> Result<DMatrix<f64>> {
    let regions = regions_1d(bank)?;
    let z_ref: f64 = bank.modes.iter().map(|m| m.prior * m.kf.z_pred[0]).sum();
    let sm = ScalarModes::new(bank)?;
    let nx = bank.nx();
    let mut m1 = DMatrix::zeros(nx, nx);
    let mut m2 = DMatrix::zeros(nx, nx);
    for (k, m) in bank.modes.iter().enumerate() {
        m1 += m.prior * &m.kf.p_post;
        let w = &sm.gain[k];
        m2 += m.prior * (&sm.x_pred[k] * sm.x_pred[k].transpose() + sm.sd[k] * sm.sd[k] * w * w.transpose());
    }
    let mut mr1 = DMatrix::zeros(nx, nx);
    let mut mr3 = DMatrix::zeros(nx, nx);
    for (ij, region) in regions.regions.iter().enumerate() {
        let shifted: Vec<Interval> = region
            .iter()
            .map(|iv| Interval {
                lo: iv.lo - z_ref,
                hi: iv.hi - z_ref,
            })
            .collect();
        for lm in 0..bank.len() {
            let (m0, m1s, m2s) = standardized_moments(sm.z_hat[lm], sm.sd[lm], &shifted);
            let sd = sm.sd[lm];
            let (a, b) = (sd * m1s, sd * sd * m2s);
            let (wl, wi) = (&sm.gain[lm], &sm.gain[ij]);
            let xl = &sm.x_pred[lm];
            let gamma = &sm.x_pred[ij] + wi * (sm.z_hat[lm] - sm.z_hat[ij]);
            let p = sm.priors[lm];
            mr1 += p * (m0 * xl * gamma.transpose()
                + a * (xl * wi.transpose() + wl * gamma.transpose())
                + b * wl * wi.transpose());
            mr3 += p * (m0 * &gamma * gamma.transpose()
                + a * (&gamma * wi.transpose() + wi * gamma.transpose())
                + b * wi * wi.transpose());
        }
    }
    let mr2 = mr1.transpose();
    Ok(m1 + m2 - mr1 - mr2 + mr3)
}

/// Flattened bank for allocation-free per-sample evaluation.
struct FlatBank {
    nx: usize,
    nz: usize,
    log_prior: Vec<f64>,
    cum_prior: Vec<f64>,
    log_norm: Vec<f64>,
    x_pred: Vec<f64>,
    z_pred: Vec<f64>,
    gain: Vec<f64>,
    s_inv: Vec<f64>,
    s_chol: Vec<f64>,
    tr_p: Vec<f64>,
}

#[allow(clippy::needless_range_loop)]
impl FlatBank {
    fn new(bank: &ModeBank) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::InvalidArgument("empty bank".into()));
        }
        let (nx, nz) = (bank.nx(), bank.nz());
        let mut fb = FlatBank {
            nx,
            nz,
            log_prior: Vec::new(),
            cum_prior: Vec::new(),
            log_norm: Vec::new(),
            x_pred: Vec::new(),
            z_pred: Vec::new(),
            gain: Vec::new(),
            s_inv: Vec::new(),
            s_chol: Vec::new(),
            tr_p: Vec::new(),
        };
        let mut acc = 0.0;
        for m in &bank.modes {
            fb.log_prior.push(m.prior.ln());
            acc += m.prior;
            fb.cum_prior.push(acc);
            fb.log_norm.push(-0.5 * (nz as f64 * LN_2PI + m.kf.s_log_det));
            fb.x_pred.extend(m.kf.x_pred.iter());
            fb.z_pred.extend(m.kf.z_pred.iter());
            for r in 0..nx {
                for c in 0..nz {
                    fb.gain.push(m.kf.gain[(r, c)]);
                }
            }
            for r in 0..nz {
                for c in 0..nz {
                    fb.s_inv.push(m.kf.s_inv[(r, c)]);
                }
            }
            let l = m
                .kf
                .s
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numeric("singular innovation covariance".into()))?
                .l();
            for r in 0..nz {
                for c in 0..nz {
                    fb.s_chol.push(l[(r, c)]);
                }
            }
            fb.tr_p.push(m.kf.p_post.trace());
        }
        Ok(fb)
    }

    fn n(&self) -> usize {
        self.log_prior.len()
    }

    fn sample_z<R: Rng>(&self, rng: &mut R, z: &mut [f64], eps: &mut [f64]) {
        let u: f64 = rng.random::<f64>() * self.cum_prior[self.n() - 1];
        let k = self.cum_prior.iter().position(|c| u < *c).unwrap_or(self.n() - 1);
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let nz = self.nz;
        for r in 0..nz {
            let mut v = self.z_pred[k * nz + r];
            for c in 0..=r {
                v += self.s_chol[k * nz * nz + r * nz + c] * eps[c];
            }
            z[r] = v;
        }
    }

    /// Fills `scores` with log prior + log likelihood and `x_post` with every mode's posterior mean.
    fn evaluate(&self, z: &[f64], scores: &mut [f64], x_post: &mut [f64], innov: &mut [f64]) {
        let (nx, nz) = (self.nx, self.nz);
        for k in 0..self.n() {
            for r in 0..nz {
                innov[r] = z[r] - self.z_pred[k * nz + r];
            }
            let mut q = 0.0;
            for r in 0..nz {
                let mut row = 0.0;
                for c in 0..nz {
                    row += self.s_inv[k * nz * nz + r * nz + c] * innov[c];
                }
                q += innov[r] * row;
            }
            scores[k] = self.log_prior[k] + self.log_norm[k] - 0.5 * q;
            for r in 0..nx {
                let mut v = self.x_pred[k * nx + r];
                for c in 0..nz {
                    v += self.gain[k * nx * nz + r * nz + c] * innov[c];
                }
                x_post[k * nx + r] = v;
            }
        }
    }
}

/// Per-sample statistic evaluated on a measurement drawn from the predictive mixture.
#[derive(Clone, Copy)]
enum McStatistic {
    /// `tr Cᴿ = tr P^MMSE + ‖x̂ − x̂ᴿ‖²`
    GsfRCovarianceTrace,
    /// `‖x̂‖²` (the integrand of tr ℳ³)
    CombinedMeanSquaredNorm,
}

fn run_mc(bank: &ModeBank, cfg: McConfig, stat: McStatistic) -> Result<Estimate> {
    if cfg.samples < 2 || cfg.chunks == 0 {
        return Err(Error::InvalidArgument("Monte Carlo needs ≥ 2 samples and ≥ 1 chunk".into()));
    }
    let fb = FlatBank::new(bank)?;
    let chunk_len = cfg.samples.div_ceil(cfg.chunks);
    let partials: Vec<(f64, f64)> = (0..cfg.chunks)
        .into_par_iter()
        .map(|c| {
            let n = chunk_len.min(cfg.samples.saturating_sub(c * chunk_len));
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(c as u64);
            let (nx, nz, k) = (fb.nx, fb.nz, fb.n());
            let mut z = vec![0.0; nz];
            let mut eps = vec![0.0; nz];
            let mut innov = vec![0.0; nz];
            let mut scores = vec![0.0; k];
            let mut weights = vec![0.0; k];
            let mut x_post = vec![0.0; k * nx];
            let mut x_hat = vec![0.0; nx];
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                fb.sample_z(&mut rng, &mut z, &mut eps);
                fb.evaluate(&z, &mut scores, &mut x_post, &mut innov);
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (w, sc) in weights.iter_mut().zip(&scores) {
                    *w = (sc - max).exp();
                    total += *w;
                }
                x_hat.iter_mut().for_each(|v| *v = 0.0);
                for m in 0..k {
                    weights[m] /= total;
                    for r in 0..nx {
                        x_hat[r] += weights[m] * x_post[m * nx + r];
                    }
                }
                let value = match stat {
                    McStatistic::GsfRCovarianceTrace => {
                        let mut tr_p = 0.0;
                        for m in 0..k {
                            let spread: f64 = (0..nx).map(|r| (x_post[m * nx + r] - x_hat[r]).powi(2)).sum();
                            tr_p += weights[m] * (fb.tr_p[m] + spread);
                        }
                        let sel = argmax_first(scores.iter().copied());
                        let miss: f64 = (0..nx).map(|r| (x_hat[r] - x_post[sel * nx + r]).powi(2)).sum();
                        tr_p + miss
                    }
                    McStatistic::CombinedMeanSquaredNorm => x_hat.iter().map(|v| v * v).sum(),
                };
                s += value;
                s2 += value * value;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = partials.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let n = cfg.samples as f64;
    let mean = s / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    if !mean.is_finite() {
        return Err(Error::Numeric("non-finite Monte Carlo estimate".into()));
    }
    Ok(Estimate {
        value: mean,
        std_error: (var / n).sqrt(),
    })
}

/// Monte Carlo `tr ℳᴿ`: averages `tr Cᴿ(z)` over `z` drawn from the predictive mixture.
pub fn gsf_r_upper_bound_mc(bank: &ModeBank, cfg: McConfig) -> Result<Estimate> {
    run_mc(bank, cfg, McStatistic::GsfRCovarianceTrace)
}

/// Monte Carlo `tr ℳ³`; there is no closed form, so this is a diagnostic only.
pub fn trace_m3_mc(bank: &ModeBank, cfg: McConfig) -> Result<Estimate> {
    run_mc(bank, cfg, McStatistic::CombinedMeanSquaredNorm)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MseEstimate {
    pub mse: f64,
    pub ci95: f64,
}

/// Mean of per-run squared errors with a 95% normal-approximation interval half-width.
pub fn unconditional_mse_mc(per_run: &[f64]) -> Result<MseEstimate> {
    if per_run.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 runs, got {}",
            per_run.len()
        )));
    }
    let n = per_run.len() as f64;
    let mean = per_run.iter().sum::<f64>() / n;
    let var = per_run.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MseEstimate {
        mse: mean,
        ci95: CI95_Z * var.sqrt() / n.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_full_line_and_half_line() {
        let t = truncated_moments_1d(2.0, 3.0, &[Interval::REAL_LINE]).unwrap();
        assert!((t.mass - 1.0).abs() < 1e-15);
        assert!((t.z_tilde - 2.0).abs() < 1e-14);
        assert!((t.s_tilde - 3.0).abs() < 1e-13);
        let half = truncated_moments_1d(0.0, 1.0, &[Interval { lo: 0.0, hi: f64::INFINITY }]).unwrap();
        assert!((half.mass - 0.5).abs() < 1e-15);
        assert!((half.z_tilde - 0.398_942_280_401_432_7).abs() < 1e-15);
        let split = truncated_moments_1d(
            0.0,
            1.0,
            &[
                Interval { lo: f64::NEG_INFINITY, hi: 0.0 },
                Interval { lo: 0.0, hi: f64::INFINITY },
            ],
        )
        .unwrap();
        assert!((split.mass - 1.0).abs() < 1e-12);
        assert!(split.z_tilde.abs() < 1e-12);
        assert!((split.s_tilde - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_empty_and_invalid() {
        let t = truncated_moments_1d(0.0, 1.0, &[]).unwrap();
        assert_eq!((t.mass, t.z_tilde, t.s_tilde), (0.0, 0.0, 0.0));
        assert!(truncated_moments_1d(0.0, 0.0, &[Interval::REAL_LINE]).is_err());
    }

    #[test]
    fn mse_two_point() {
        let e = unconditional_mse_mc(&[1.0, 3.0]).unwrap();
        assert_eq!(e.mse, 2.0);
        assert!((e.ci95 - 1.96).abs() < 1e-15);
        let z = unconditional_mse_mc(&[0.0; 5]).unwrap();
        assert_eq!((z.mse, z.ci95), (0.0, 0.0));
        assert!(unconditional_mse_mc(&[1.0]).is_err());
    }

    #[test]
    fn combined_is_min() {
        assert_eq!(combined_upper_bound(3.0, 5.0), 3.0);
        assert_eq!(combined_upper_bound(5.0, 3.0), 3.0);
        assert_eq!(lmmse_upper_bound(&DMatrix::from_element(1, 1, 0.5)), 0.5);
    }
}
