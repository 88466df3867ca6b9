//! Mode-matched Kalman filtering and the four estimators built on it: the
//! Gaussian sum filter (GSF), the max-weight GSF-R, the oracle Matched filter
//! and the moment-matched LMMSE Kalman filter.
//!
//! The GSF bank is collapsed to a single Gaussian after every step, so each
//! step runs `C_v · C_w` mode filters from the same previous estimate.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gm::{Gaussian, GaussianMixture};
use crate::numeric::{self, symmetrize, LN_2PI};

/// Negative eigenvalues of a posted covariance up to this (relative) size are clamped.
pub const PSD_CLAMP_TOL: f64 = 1e-8;

/// Fault injection for mutation testing of the validation suite.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static FLIP_INNOVATION: Cell<bool> = const { Cell::new(false) };
    }

    /// Flips the sign of the innovation in [`super::mode_matched_step`] on the
    /// current thread while `on` is set.
    pub fn set_innovation_sign_flip(on: bool) {
        FLIP_INNOVATION.with(|f| f.set(on));
    }

    pub(crate) fn innovation_sign_flipped() -> bool {
        FLIP_INNOVATION.with(|f| f.get())
    }
}

/// Linear dynamic system `x_k = F x_{k-1} + v_k`, `z_k = H x_k + w_k` with
/// Gaussian-mixture `v` and `w`.
#[derive(Debug, Clone)]
pub struct SystemModel {
    f: DMatrix<f64>,
    h: DMatrix<f64>,
    dt: f64,
    process_noise: GaussianMixture,
    measurement_noise: GaussianMixture,
    process_matched: Gaussian,
    measurement_matched: Gaussian,
}

impl SystemModel {
    pub fn new(
        f: DMatrix<f64>,
        h: DMatrix<f64>,
        dt: f64,
        process_noise: GaussianMixture,
        measurement_noise: GaussianMixture,
    ) -> Result<Self> {
        let nx = f.nrows();
        if !f.is_square() || nx == 0 {
            return Err(Error::Dimension(format!("F is {}x{}", f.nrows(), f.ncols())));
        }
        if h.ncols() != nx || h.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "H is {}x{}, state dimension is {nx}",
                h.nrows(),
                h.ncols()
            )));
        }
        if process_noise.dim() != nx {
            return Err(Error::Dimension(format!(
                "process noise has dimension {}, state has {nx}",
                process_noise.dim()
            )));
        }
        if measurement_noise.dim() != h.nrows() {
            return Err(Error::Dimension(format!(
                "measurement noise has dimension {}, measurement has {}",
                measurement_noise.dim(),
                h.nrows()
            )));
        }
        let process_matched = process_noise.moment_match();
        let measurement_matched = measurement_noise.moment_match();
        Ok(Self {
            f,
            h,
            dt,
            process_noise,
            measurement_noise,
            process_matched,
            measurement_matched,
        })
    }

    pub fn nx(&self) -> usize {
        self.f.nrows()
    }

    pub fn nz(&self) -> usize {
        self.h.nrows()
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn process_noise(&self) -> &GaussianMixture {
        &self.process_noise
    }

    pub fn measurement_noise(&self) -> &GaussianMixture {
        &self.measurement_noise
    }

    /// Moment-matched process noise (ū, Q̄).
    pub fn process_matched(&self) -> &Gaussian {
        &self.process_matched
    }

    /// Moment-matched measurement noise (b̄, R̄).
    pub fn measurement_matched(&self) -> &Gaussian {
        &self.measurement_matched
    }

    pub fn n_modes(&self) -> usize {
        self.process_noise.len() * self.measurement_noise.len()
    }
}

/// Estimate and error covariance after `k` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub k: usize,
}

impl FilterState {
    pub fn new(x: DVector<f64>, p: DMatrix<f64>) -> Result<Self> {
        if p.nrows() != x.len() {
            return Err(Error::Dimension(format!(
                "state has dimension {}, covariance is {}x{}",
                x.len(),
                p.nrows(),
                p.ncols()
            )));
        }
        let p = numeric::sanitize_covariance(p, PSD_CLAMP_TOL, "initial covariance")?;
        Ok(Self { x, p, k: 0 })
    }
}

/// Output of one mode-matched Kalman step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeStep {
    pub x_pred: DVector<f64>,
    pub p_pred: DMatrix<f64>,
    pub z_pred: DVector<f64>,
    pub s: DMatrix<f64>,
    pub s_inv: DMatrix<f64>,
    pub s_log_det: f64,
    pub gain: DMatrix<f64>,
    pub x_post: DVector<f64>,
    pub p_post: DMatrix<f64>,
}

impl ModeStep {
    /// `ln 𝒩(z; ẑ, S)`.
    pub fn log_likelihood(&self, z: &DVector<f64>) -> f64 {
        let d = z - &self.z_pred;
        let q = (d.transpose() * &self.s_inv * &d)[(0, 0)];
        -0.5 * (z.len() as f64 * LN_2PI + self.s_log_det + q)
    }

    /// Mode posterior mean for an arbitrary measurement.
    pub fn posterior_mean_at(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.x_pred + &self.gain * (z - &self.z_pred)
    }
}

/// One (process cluster, measurement cluster) hypothesis inside a bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub process: usize,
    pub measurement: usize,
    /// `𝒲ᵢ 𝒫ⱼ`
    pub prior: f64,
    pub log_likelihood: f64,
    /// Normalized posterior weight `μᵢⱼ`.
    pub weight: f64,
    pub kf: ModeStep,
}

/// All mode filters of one GSF step, ordered lexicographically by (i, j).
#[derive(Debug, Clone, PartialEq)]
pub struct ModeBank {
    pub n_process: usize,
    pub n_measurement: usize,
    pub modes: Vec<Mode>,
}

impl ModeBank {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.n_measurement + j
    }

    pub fn mode(&self, i: usize, j: usize) -> &Mode {
        &self.modes[self.index(i, j)]
    }

    pub fn nx(&self) -> usize {
        self.modes[0].kf.x_pred.len()
    }

    pub fn nz(&self) -> usize {
        self.modes[0].kf.z_pred.len()
    }

    pub fn priors(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.prior).collect()
    }

    /// Posterior weights the bank would assign to measurement `z`.
    pub fn weights_at(&self, z: &DVector<f64>) -> Result<Vec<f64>> {
        let log_priors: Vec<f64> = self.modes.iter().map(|m| m.prior.ln()).collect();
        let log_liks: Vec<f64> = self.modes.iter().map(|m| m.kf.log_likelihood(z)).collect();
        posterior_weights(&log_priors, &log_liks)
    }

    /// Index of the largest prior-weighted likelihood at `z`; ties go to the lowest index.
    pub fn argmax_at(&self, z: &DVector<f64>) -> usize {
        let scores = self.modes.iter().map(|m| m.prior.ln() + m.kf.log_likelihood(z));
        argmax_first(scores)
    }

    /// Collapsed mean and covariance using the stored weights.
    pub fn combine(&self) -> (DVector<f64>, DMatrix<f64>) {
        let nx = self.nx();
        let mut x = DVector::zeros(nx);
        for m in &self.modes {
            x += m.weight * &m.kf.x_post;
        }
        let mut p = DMatrix::zeros(nx, nx);
        for m in &self.modes {
            let d = &m.kf.x_post - &x;
            p += m.weight * (&m.kf.p_post + &d * d.transpose());
        }
        symmetrize(&mut p);
        (x, p)
    }
}

fn argmax_first<I: Iterator<Item = f64>>(values: I) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsfOutput {
    pub bank: ModeBank,
    /// MMSE estimate x̂ₖ|ₖ and its covariance.
    pub combined: FilterState,
    /// (i, j) of the maximum-weight mode.
    pub argmax_mode: (usize, usize),
    /// x̂ᴿ, Pᴿ of the maximum-weight mode.
    pub selected: FilterState,
}

/// What GSF-R feeds into the next prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GsfRFeedback {
    /// Run the bank from the GSF's collapsed estimate; GSF-R only changes the output.
    #[default]
    SharedBank,
    /// Run the bank from GSF-R's own previously selected estimate.
    HardDecision,
}

impl fmt::Display for GsfRFeedback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GsfRFeedback::SharedBank => "shared-bank",
            GsfRFeedback::HardDecision => "hard-decision",
        })
    }
}

impl FromStr for GsfRFeedback {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared-bank" => Ok(GsfRFeedback::SharedBank),
            "hard-decision" => Ok(GsfRFeedback::HardDecision),
            other => Err(Error::InvalidArgument(format!("unknown GSF-R feedback mode '{other}'"))),
        }
    }
}

struct Prediction {
    x: DVector<f64>,
    p: DMatrix<f64>,
}

fn predict(model: &SystemModel, prev: &FilterState, i: usize) -> Result<Prediction> {
    let cluster = model
        .process_noise
        .components()
        .get(i)
        .ok_or_else(|| Error::InvalidArgument(format!("process cluster {i} out of range")))?;
    if prev.x.len() != model.nx() || prev.p.nrows() != model.nx() {
        return Err(Error::Dimension(format!(
            "previous state has dimension {}, model state has {}",
            prev.x.len(),
            model.nx()
        )));
    }
    let x = &model.f * &prev.x + cluster.mean();
    let mut p = cluster.cov() + &model.f * &prev.p * model.f.transpose();
    symmetrize(&mut p);
    Ok(Prediction { x, p })
}

fn update(
    model: &SystemModel,
    pred: &Prediction,
    i: usize,
    j: usize,
    z: &DVector<f64>,
) -> Result<ModeStep> {
    let cluster = model
        .measurement_noise
        .components()
        .get(j)
        .ok_or_else(|| Error::InvalidArgument(format!("measurement cluster {j} out of range")))?;
    if z.len() != model.nz() {
        return Err(Error::Dimension(format!(
            "measurement has dimension {}, model expects {}",
            z.len(),
            model.nz()
        )));
    }
    let h = &model.h;
    let z_pred = h * &pred.x + cluster.mean();
    let mut s = h * &pred.p * h.transpose() + cluster.cov();
    symmetrize(&mut s);
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("innovation covariance of mode ({i},{j}) is singular")))?;
    let s_inv = chol.inverse();
    let s_log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let gain = &pred.p * h.transpose() * &s_inv;
    let innovation = if fault::innovation_sign_flipped() {
        &z_pred - z
    } else {
        z - &z_pred
    };
    let x_post = &pred.x + &gain * innovation;
    let p_post = &pred.p - &gain * &s * gain.transpose();
    let p_post = numeric::sanitize_covariance(p_post, PSD_CLAMP_TOL, "mode posterior")
        .map_err(|e| Error::Numeric(format!("mode ({i},{j}): {e}")))?;
    Ok(ModeStep {
        x_pred: pred.x.clone(),
        p_pred: pred.p.clone(),
        z_pred,
        s,
        s_inv,
        s_log_det,
        gain,
        x_post,
        p_post,
    })
}

/// Kalman step conditioned on process cluster `i` and measurement cluster `j`.
pub fn mode_matched_step(
    model: &SystemModel,
    prev: &FilterState,
    i: usize,
    j: usize,
    z: &DVector<f64>,
) -> Result<ModeStep> {
    let pred = predict(model, prev, i)?;
    update(model, &pred, i, j, z)
}

/// Normalized `μ ∝ exp(log prior + log likelihood)` via log-sum-exp.
pub fn posterior_weights(log_priors: &[f64], log_likelihoods: &[f64]) -> Result<Vec<f64>> {
    if log_priors.len() != log_likelihoods.len() || log_priors.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} priors for {} likelihoods",
            log_priors.len(),
            log_likelihoods.len()
        )));
    }
    let joint: Vec<f64> = log_priors
        .iter()
        .zip(log_likelihoods)
        .map(|(p, l)| p + l)
        .collect();
    if joint.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numeric("non-finite mode log-weight".into()));
    }
    let max = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Numeric("all mode weights underflow".into()));
    }
    let exps: Vec<f64> = joint.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / total).collect())
}

/// One Gaussian sum filter step from the collapsed previous estimate.
pub fn gsf_step(model: &SystemModel, prev: &FilterState, z: &DVector<f64>) -> Result<GsfOutput> {
    let pw = model.process_noise.weights();
    let mw = model.measurement_noise.weights();
    let mut modes = Vec::with_capacity(model.n_modes());
    for (i, wi) in pw.iter().enumerate() {
        let pred = predict(model, prev, i)?;
        for (j, pj) in mw.iter().enumerate() {
            let kf = update(model, &pred, i, j, z)?;
            modes.push(Mode {
                process: i,
                measurement: j,
                prior: wi * pj,
                log_likelihood: kf.log_likelihood(z),
                weight: 0.0,
                kf,
            });
        }
    }
    let log_priors: Vec<f64> = modes.iter().map(|m| m.prior.ln()).collect();
    let log_liks: Vec<f64> = modes.iter().map(|m| m.log_likelihood).collect();
    let weights = posterior_weights(&log_priors, &log_liks)?;
    for (m, w) in modes.iter_mut().zip(&weights) {
        m.weight = *w;
    }
    let bank = ModeBank {
        n_process: pw.len(),
        n_measurement: mw.len(),
        modes,
    };
    let (x, p) = bank.combine();
    let p = numeric::sanitize_covariance(p, PSD_CLAMP_TOL, "combined covariance")
        .map_err(|e| Error::Numeric(e.to_string()))?;
    let k = prev.k + 1;
    // ties resolve to the lexicographically smallest (i, j) via scan order
    let best = argmax_first(bank.modes.iter().map(|m| m.weight));
    let best_mode = &bank.modes[best];
    let selected = FilterState {
        x: best_mode.kf.x_post.clone(),
        p: best_mode.kf.p_post.clone(),
        k,
    };
    let argmax_mode = (best_mode.process, best_mode.measurement);
    Ok(GsfOutput {
        bank,
        combined: FilterState { x, p, k },
        argmax_mode,
        selected,
    })
}

/// GSF-R step. With [`GsfRFeedback::SharedBank`] the bank is run from
/// `prev_combined` (the GSF's collapsed estimate); with
/// [`GsfRFeedback::HardDecision`] from `prev_selected`. The estimate is
/// `output.selected` in both cases.
pub fn gsf_r_step(
    model: &SystemModel,
    prev_combined: &FilterState,
    prev_selected: &FilterState,
    z: &DVector<f64>,
    feedback: GsfRFeedback,
) -> Result<GsfOutput> {
    match feedback {
        GsfRFeedback::SharedBank => gsf_step(model, prev_combined, z),
        GsfRFeedback::HardDecision => gsf_step(model, prev_selected, z),
    }
}

/// Stateful GSF-R that tracks whatever its feedback mode needs.
#[derive(Debug, Clone)]
pub struct GsfR {
    pub feedback: GsfRFeedback,
    pub combined: FilterState,
    pub selected: FilterState,
}

impl GsfR {
    pub fn new(initial: FilterState, feedback: GsfRFeedback) -> Self {
        Self {
            feedback,
            combined: initial.clone(),
            selected: initial,
        }
    }

    pub fn step(&mut self, model: &SystemModel, z: &DVector<f64>) -> Result<&FilterState> {
        let out = gsf_r_step(model, &self.combined, &self.selected, z, self.feedback)?;
        self.combined = out.combined;
        self.selected = out.selected;
        Ok(&self.selected)
    }
}

/// Oracle filter that runs only the active mode `(true_i, true_j)`.
pub fn matched_step(
    model: &SystemModel,
    prev: &FilterState,
    z: &DVector<f64>,
    true_i: usize,
    true_j: usize,
) -> Result<FilterState> {
    let step = mode_matched_step(model, prev, true_i, true_j, z)?;
    Ok(FilterState {
        x: step.x_post,
        p: step.p_post,
        k: prev.k + 1,
    })
}

/// Kalman step on the moment-matched noises (the LMMSE filter).
pub fn lmmse_step(model: &SystemModel, prev: &FilterState, z: &DVector<f64>) -> Result<FilterState> {
    if prev.x.len() != model.nx() || z.len() != model.nz() {
        return Err(Error::Dimension("state or measurement dimension mismatch".into()));
    }
    let (f, h) = (&model.f, &model.h);
    let (u_bar, q_bar) = (model.process_matched.mean(), model.process_matched.cov());
    let (b_bar, r_bar) = (model.measurement_matched.mean(), model.measurement_matched.cov());

    let x_pred = f * &prev.x + u_bar;
    let mut p_pred = f * &prev.p * f.transpose() + q_bar;
    symmetrize(&mut p_pred);
    let ph_t = &p_pred * h.transpose();
    let mut s = h * &ph_t + r_bar;
    symmetrize(&mut s);
    let s_inv = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("LMMSE innovation covariance is singular".into()))?
        .inverse();
    let x = &x_pred + &ph_t * &s_inv * (z - (h * &x_pred + b_bar));
    let p = &p_pred - &ph_t * &s_inv * ph_t.transpose();
    let p = numeric::sanitize_covariance(p, PSD_CLAMP_TOL, "LMMSE covariance")
        .map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(FilterState { x, p, k: prev.k + 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_model(pn: GaussianMixture, mn: GaussianMixture) -> SystemModel {
        SystemModel::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1), 1.0, pn, mn).unwrap()
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn s1(x: f64, p: f64) -> FilterState {
        FilterState::new(v1(x), DMatrix::from_element(1, 1, p)).unwrap()
    }

    #[test]
    fn scalar_conjugate_update() {
        let m = scalar_model(
            GaussianMixture::univariate(&[1.0], &[0.0], &[0.0]).unwrap(),
            GaussianMixture::univariate(&[1.0], &[0.0], &[1.0]).unwrap(),
        );
        let st = mode_matched_step(&m, &s1(0.0, 1.0), 0, 0, &v1(1.0)).unwrap();
        assert!((st.s[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((st.gain[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((st.x_post[0] - 0.5).abs() < 1e-15);
        assert!((st.p_post[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uninformative_measurement_limit() {
        let m = scalar_model(
            GaussianMixture::univariate(&[1.0], &[0.3], &[0.5]).unwrap(),
            GaussianMixture::univariate(&[1.0], &[0.0], &[1e12]).unwrap(),
        );
        let st = mode_matched_step(&m, &s1(2.0, 1.0), 0, 0, &v1(40.0)).unwrap();
        assert!(((st.x_post[0] - st.x_pred[0]) / st.x_pred[0]).abs() < 1e-6);
        assert!(((st.p_post[(0, 0)] - st.p_pred[(0, 0)]) / st.p_pred[(0, 0)]).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_cluster_and_bad_dims() {
        let m = scalar_model(
            GaussianMixture::univariate(&[1.0], &[0.0], &[1.0]).unwrap(),
            GaussianMixture::univariate(&[1.0], &[0.0], &[1.0]).unwrap(),
        );
        assert!(mode_matched_step(&m, &s1(0.0, 1.0), 1, 0, &v1(0.0)).is_err());
        assert!(mode_matched_step(&m, &s1(0.0, 1.0), 0, 3, &v1(0.0)).is_err());
        assert!(matches!(
            mode_matched_step(&m, &s1(0.0, 1.0), 0, 0, &DVector::zeros(2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn singular_innovation_names_mode() {
        let m = scalar_model(
            GaussianMixture::univariate(&[1.0], &[0.0], &[0.0]).unwrap(),
            GaussianMixture::univariate(&[0.5, 0.5], &[0.0, 1.0], &[1.0, 0.0]).unwrap(),
        );
        let err = mode_matched_step(&m, &s1(0.0, 0.0), 0, 1, &v1(0.0)).unwrap_err();
        assert!(err.to_string().contains("(0,1)"), "{err}");
    }

    #[test]
    fn posterior_weight_examples() {
        let w = posterior_weights(&[0.5f64.ln(), 0.5f64.ln()], &[-3.0, -3.0]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        let w = posterior_weights(&[0.9f64.ln(), 0.1f64.ln()], &[-7.0, -7.0]).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15 && (w[1] - 0.1).abs() < 1e-15);
        // exp(-1000) underflows in f64, so the exact answer rounds to [1, 0]
        let w = posterior_weights(&[0.0, 0.0], &[-5.0, -1005.0]).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
        assert!(posterior_weights(&[f64::NEG_INFINITY], &[0.0]).is_err());
        assert!(posterior_weights(&[0.0], &[f64::NAN]).is_err());
    }

    #[test]
    fn two_mode_hand_computed_update() {
        let m = scalar_model(
            GaussianMixture::univariate(&[1.0], &[0.0], &[0.0]).unwrap(),
            GaussianMixture::univariate(&[0.5, 0.5], &[-1.0, 1.0], &[1.0, 1.0]).unwrap(),
        );
        // F = 1, Q = 0 so the prediction is N(0, 1)
        let out = gsf_step(&m, &s1(0.0, 1.0), &v1(0.0)).unwrap();
        let w: Vec<f64> = out.bank.modes.iter().map(|m| m.weight).collect();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        assert!((out.bank.modes[0].kf.x_post[0] - 0.5).abs() < 1e-15);
        assert!((out.bank.modes[1].kf.x_post[0] + 0.5).abs() < 1e-15);
        assert!((out.bank.modes[0].kf.p_post[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(out.combined.x[0].abs() < 1e-15);
        assert!((out.combined.p[(0, 0)] - 0.75).abs() < 1e-15);
        assert_eq!(out.argmax_mode, (0, 0));
    }

    #[test]
    fn well_separated_clusters_select_the_right_mode() {
        let means: Vec<f64> = [-50.0, -30.0, 0.0, 30.0, 50.0].to_vec();
        let m = scalar_model(
            GaussianMixture::univariate(&[1.0], &[0.0], &[0.0]).unwrap(),
            GaussianMixture::univariate(&[0.2; 5], &means, &[1.0; 5]).unwrap(),
        );
        let out = gsf_step(&m, &s1(0.0, 1.0), &v1(-50.0)).unwrap();
        assert_eq!(out.argmax_mode, (0, 0));
        assert!(out.bank.modes[0].weight > 0.999);
    }

    #[test]
    fn lmmse_uses_matched_measurement_variance() {
        let means: Vec<f64> = [-50.0, -30.0, 0.0, 30.0, 50.0].to_vec();
        let m = scalar_model(
            GaussianMixture::univariate(&[1.0], &[0.0], &[0.0]).unwrap(),
            GaussianMixture::univariate(&[0.2; 5], &means, &[1.0; 5]).unwrap(),
        );
        assert!((m.measurement_matched().cov()[(0, 0)] - 1361.0).abs() < 1e-9);
        let st = lmmse_step(&m, &s1(0.0, 1.0), &v1(3.0)).unwrap();
        // P = 1 - 1/(1 + 1361)
        assert!((st.p[(0, 0)] - (1.0 - 1.0 / 1362.0)).abs() < 1e-14);
    }

    #[test]
    fn feedback_parses() {
        assert_eq!("shared-bank".parse::<GsfRFeedback>().unwrap(), GsfRFeedback::SharedBank);
        assert_eq!("hard-decision".parse::<GsfRFeedback>().unwrap(), GsfRFeedback::HardDecision);
        assert!("soft".parse::<GsfRFeedback>().is_err());
        assert_eq!(GsfRFeedback::HardDecision.to_string(), "hard-decision");
    }

    #[test]
    fn fault_hook_flips_innovation() {
        let m = scalar_model(
            GaussianMixture::univariate(&[1.0], &[0.0], &[0.0]).unwrap(),
            GaussianMixture::univariate(&[1.0], &[0.0], &[1.0]).unwrap(),
        );
        fault::set_innovation_sign_flip(true);
        let st = mode_matched_step(&m, &s1(0.0, 1.0), 0, 0, &v1(1.0));
        fault::set_innovation_sign_flip(false);
        assert!((st.unwrap().x_post[0] + 0.5).abs() < 1e-15);
    }
}
