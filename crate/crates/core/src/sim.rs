//! Synthetic tracking scenarios, Monte Carlo runs of the four filters and
//! separation sweeps.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{unconditional_mse_mc, BoundsRecord, MseEstimate, UpperBoundMethod};
use crate::error::{Error, Result};
use crate::filters::{
    gsf_r_step, gsf_step, lmmse_step, matched_step, FilterState, GsfRFeedback, SystemModel,
};
use crate::gm::{Gaussian, GaussianMixture};
use crate::numeric::to_db;

pub const DEFAULT_DT: f64 = 0.1080;
/// Selected-estimate norm beyond this multiple of the trajectory RMS state norm flags a run as diverged.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// The three five-cluster noise generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseModel {
    Model1,
    Model2,
    Model3,
}

impl NoiseModel {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(NoiseModel::Model1),
            2 => Ok(NoiseModel::Model2),
            3 => Ok(NoiseModel::Model3),
            other => Err(Error::InvalidArgument(format!("unknown noise model {other}, expected 1, 2 or 3"))),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            NoiseModel::Model1 => 1,
            NoiseModel::Model2 => 2,
            NoiseModel::Model3 => 3,
        }
    }

    pub fn weights(self) -> [f64; 5] {
        match self {
            NoiseModel::Model1 => [0.2; 5],
            NoiseModel::Model2 => [0.1, 0.1, 0.6, 0.1, 0.1],
            NoiseModel::Model3 => [0.5, 0.1, 0.1, 0.1, 0.2],
        }
    }

    /// Cluster means at `c = 1`.
    pub fn base_means(self) -> [f64; 5] {
        match self {
            NoiseModel::Model1 | NoiseModel::Model2 => [-50.0, -30.0, 0.0, 30.0, 50.0],
            NoiseModel::Model3 => [-50.0, 10.0, 30.0, 50.0, 80.0],
        }
    }

    /// Univariate mixture with means scaled by `c` and unit variances.
    pub fn generator(self, c: f64) -> Result<GaussianMixture> {
        if !c.is_finite() || c < 0.0 {
            return Err(Error::InvalidArgument(format!("separation c must be finite and ≥ 0, got {c}")));
        }
        let means = self.base_means().map(|m| m * c);
        GaussianMixture::univariate(&self.weights(), &means, &[1.0; 5])
    }
}

fn default_c_process() -> f64 {
    1.0
}
fn default_c_grid() -> Vec<f64> {
    log_spaced(0.02, 2.5, 16)
}
fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_steps() -> usize {
    100
}
fn default_runs() -> usize {
    1000
}
fn default_fraction() -> f64 {
    0.5
}
fn default_x0() -> Vec<f64> {
    vec![0.0, 0.0]
}
fn default_p0() -> Vec<Vec<f64>> {
    vec![vec![1.0, 0.0], vec![0.0, 1.0]]
}

/// `n` points from `lo` to `hi` inclusive, evenly spaced in log scale.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|k| {
                    if k == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * k as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model_id: u8,
    #[serde(default = "default_c_process")]
    pub c_process: f64,
    #[serde(default = "default_c_grid")]
    pub c_measurement: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fraction")]
    pub steady_state_fraction: f64,
    #[serde(default)]
    pub feedback: GsfRFeedback,
    #[serde(default = "default_x0")]
    pub initial_state: Vec<f64>,
    #[serde(default = "default_p0")]
    pub initial_covariance: Vec<Vec<f64>>,
}

impl ScenarioConfig {
    pub fn new(model_id: u8) -> Self {
        Self {
            model_id,
            c_process: default_c_process(),
            c_measurement: default_c_grid(),
            dt: default_dt(),
            steps: default_steps(),
            runs: default_runs(),
            seed: 0,
            steady_state_fraction: default_fraction(),
            feedback: GsfRFeedback::default(),
            initial_state: default_x0(),
            initial_covariance: default_p0(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        NoiseModel::from_id(self.model_id)?;
        if !(self.c_process.is_finite() && self.c_process >= 0.0) {
            return bad(format!("c_process must be finite and ≥ 0, got {}", self.c_process));
        }
        if self.c_measurement.is_empty() {
            return bad("c_measurement is empty".into());
        }
        if let Some(c) = self.c_measurement.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return bad(format!("c_measurement values must be finite and ≥ 0, got {c}"));
        }
        if self.c_measurement.windows(2).any(|w| w[1] <= w[0]) {
            return bad("c_measurement must be strictly ascending".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.steps == 0 {
            return bad("steps must be ≥ 1".into());
        }
        if self.runs < 2 {
            return bad(format!("runs must be ≥ 2, got {}", self.runs));
        }
        if !(self.steady_state_fraction > 0.0 && self.steady_state_fraction <= 1.0) {
            return bad(format!(
                "steady_state_fraction must lie in (0, 1], got {}",
                self.steady_state_fraction
            ));
        }
        if self.initial_state.len() != 2 {
            return bad(format!("initial_state must have 2 entries, got {}", self.initial_state.len()));
        }
        if self.initial_covariance.len() != 2 || self.initial_covariance.iter().any(|r| r.len() != 2) {
            return bad("initial_covariance must be 2x2".into());
        }
        self.initial_filter_state()?;
        Ok(())
    }

    /// First step index (0-based) inside the steady-state window.
    pub fn window_start(&self) -> usize {
        let len = ((self.steps as f64) * self.steady_state_fraction).round() as usize;
        self.steps - len.clamp(1, self.steps)
    }

    pub fn initial_filter_state(&self) -> Result<FilterState> {
        let n = self.initial_state.len();
        let x = DVector::from_column_slice(&self.initial_state);
        let p = DMatrix::from_fn(n, n, |r, c| {
            self.initial_covariance.get(r).and_then(|row| row.get(c)).copied().unwrap_or(f64::NAN)
        });
        FilterState::new(x, p)
    }
}

/// Constant-velocity system with process noise lifted from the univariate generator.
pub fn build_system(cfg: &ScenarioConfig, c: f64) -> Result<SystemModel> {
    let model = NoiseModel::from_id(cfg.model_id)?;
    let dt = cfg.dt;
    let f = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let g = DMatrix::from_column_slice(2, 1, &[dt, 1.0]);
    let process = model.generator(cfg.c_process)?.transform(&g)?;
    let measurement = model.generator(c)?;
    SystemModel::new(f, h, dt, process, measurement)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x₀ … x_steps`
    pub states: Vec<DVector<f64>>,
    /// `z₁ … z_steps`
    pub measurements: Vec<DVector<f64>>,
    pub process_labels: Vec<usize>,
    pub measurement_labels: Vec<usize>,
}

impl Trajectory {
    /// `sqrt(mean ‖xₖ‖²)` over `k ≥ 1`.
    pub fn rms_state_norm(&self) -> f64 {
        let n = self.states.len().saturating_sub(1).max(1) as f64;
        (self.states.iter().skip(1).map(|x| x.norm_squared()).sum::<f64>() / n).sqrt()
    }
}

pub fn generate_trajectory<R: Rng + ?Sized>(
    model: &SystemModel,
    x0: &DVector<f64>,
    steps: usize,
    rng: &mut R,
) -> Trajectory {
    let mut states = Vec::with_capacity(steps + 1);
    let mut measurements = Vec::with_capacity(steps);
    let mut process_labels = Vec::with_capacity(steps);
    let mut measurement_labels = Vec::with_capacity(steps);
    states.push(x0.clone());
    for _ in 0..steps {
        let (v, i) = model.process_noise().sample(rng);
        let x = model.f() * states.last().expect("x0 pushed") + v;
        let (w, j) = model.measurement_noise().sample(rng);
        measurements.push(model.h() * &x + w);
        states.push(x);
        process_labels.push(i);
        measurement_labels.push(j);
    }
    Trajectory {
        states,
        measurements,
        process_labels,
        measurement_labels,
    }
}

/// Window averages of one run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunResult {
    pub se_gsf: f64,
    pub se_gsfr: f64,
    pub se_matched: f64,
    pub se_lmmse: f64,
    pub lb: f64,
    pub ub_gsfr: f64,
    pub ub_lmmse: f64,
    pub bound_order_violations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunOutcome {
    Completed(RunResult),
    Diverged,
}

/// Stream id of a run: c index in the high word, run index in the low word.
pub fn run_stream(c_index: u32, run: u32) -> u64 {
    ((c_index as u64) << 32) | run as u64
}

pub fn run_rng(seed: u64, c_index: u32, run: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run_stream(c_index, run));
    rng
}

fn bound_order_ok(b: &BoundsRecord) -> bool {
    let ub = b.ub_gsfr.min(b.ub_lmmse);
    b.lb <= ub * (1.0 + 1e-9) + 1e-12
}

/// Runs GSF, GSF-R, Matched and LMMSE over one trajectory.
pub fn run_single(
    system: &SystemModel,
    cfg: &ScenarioConfig,
    traj: &Trajectory,
) -> Result<RunOutcome> {
    let init = cfg.initial_filter_state()?;
    let start = cfg.window_start();
    let threshold = DIVERGENCE_FACTOR * traj.rms_state_norm();
    let mut gsf = init.clone();
    let mut gsfr_sel = init.clone();
    let mut matched = init.clone();
    let mut lmmse = init;
    let mut acc = RunResult::default();
    let mut n = 0usize;
    for (k, z) in traj.measurements.iter().enumerate() {
        let out = gsf_step(system, &gsf, z)?;
        let selected = match cfg.feedback {
            GsfRFeedback::SharedBank => out.selected.clone(),
            GsfRFeedback::HardDecision => {
                match gsf_r_step(system, &gsf, &gsfr_sel, z, GsfRFeedback::HardDecision) {
                    Ok(o) => o.selected,
                    Err(_) => return Ok(RunOutcome::Diverged),
                }
            }
        };
        if selected.x.iter().any(|v| !v.is_finite()) || selected.x.norm() > threshold {
            return Ok(RunOutcome::Diverged);
        }
        matched = matched_step(system, &matched, z, traj.process_labels[k], traj.measurement_labels[k])?;
        lmmse = lmmse_step(system, &lmmse, z)?;
        if k >= start {
            let x = &traj.states[k + 1];
            let b = BoundsRecord::evaluate(&out.bank, &lmmse.p, UpperBoundMethod::Analytic1d)?;
            acc.se_gsf += (x - &out.combined.x).norm_squared();
            acc.se_gsfr += (x - &selected.x).norm_squared();
            acc.se_matched += (x - &matched.x).norm_squared();
            acc.se_lmmse += (x - &lmmse.x).norm_squared();
            acc.lb += b.lb;
            acc.ub_gsfr += b.ub_gsfr;
            acc.ub_lmmse += b.ub_lmmse;
            if !bound_order_ok(&b) {
                acc.bound_order_violations += 1;
            }
            n += 1;
        }
        gsf = out.combined;
        gsfr_sel = selected;
    }
    let n = n as f64;
    for v in [
        &mut acc.se_gsf,
        &mut acc.se_gsfr,
        &mut acc.se_matched,
        &mut acc.se_lmmse,
        &mut acc.lb,
        &mut acc.ub_gsfr,
        &mut acc.ub_lmmse,
    ] {
        *v /= n;
    }
    Ok(RunOutcome::Completed(acc))
}

/// One sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub c: f64,
    pub kl_nats: f64,
    pub mse_gsf: MseEstimate,
    pub mse_gsfr: MseEstimate,
    pub mse_matched: MseEstimate,
    pub mse_lmmse: MseEstimate,
    pub lb: f64,
    pub ub_gsfr: f64,
    pub ub_lmmse: f64,
    pub ub_combined: f64,
    pub diverged_runs: usize,
    pub bound_order_violations: usize,
}

impl SweepRow {
    pub fn mse_gsf_db(&self) -> f64 {
        to_db(self.mse_gsf.mse)
    }
    pub fn mse_gsfr_db(&self) -> f64 {
        to_db(self.mse_gsfr.mse)
    }
    pub fn mse_matched_db(&self) -> f64 {
        to_db(self.mse_matched.mse)
    }
    pub fn mse_lmmse_db(&self) -> f64 {
        to_db(self.mse_lmmse.mse)
    }
    pub fn lb_db(&self) -> f64 {
        to_db(self.lb)
    }
    pub fn ub_gsfr_db(&self) -> f64 {
        to_db(self.ub_gsfr)
    }
    pub fn ub_lmmse_db(&self) -> f64 {
        to_db(self.ub_lmmse)
    }
    pub fn ub_combined_db(&self) -> f64 {
        to_db(self.ub_combined)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: ScenarioConfig,
    pub rows: Vec<SweepRow>,
}

/// Aggregates the runs of an arbitrary system. `c_index` selects the RNG streams.
pub fn run_system(
    system: &SystemModel,
    cfg: &ScenarioConfig,
    c: f64,
    c_index: u32,
    kl_nats: f64,
) -> Result<SweepRow> {
    cfg.validate()?;
    if system.nx() != cfg.initial_state.len() {
        return Err(Error::Dimension(format!(
            "system state dimension {} does not match initial state {}",
            system.nx(),
            cfg.initial_state.len()
        )));
    }
    let x0 = DVector::from_column_slice(&cfg.initial_state);
    let outcomes: Vec<Result<RunOutcome>> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = run_rng(cfg.seed, c_index, r as u32);
            let traj = generate_trajectory(system, &x0, cfg.steps, &mut rng);
            run_single(system, cfg, &traj)
        })
        .collect();
    let mut runs = Vec::with_capacity(cfg.runs);
    let mut diverged = 0;
    for o in outcomes {
        match o? {
            RunOutcome::Completed(r) => runs.push(r),
            RunOutcome::Diverged => diverged += 1,
        }
    }
    if runs.len() < 2 {
        return Err(Error::Numeric(format!(
            "only {} of {} runs completed without divergence",
            runs.len(),
            cfg.runs
        )));
    }
    let col = |f: fn(&RunResult) -> f64| runs.iter().map(f).collect::<Vec<f64>>();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let lb = mean(col(|r| r.lb));
    let ub_gsfr = mean(col(|r| r.ub_gsfr));
    let ub_lmmse = mean(col(|r| r.ub_lmmse));
    Ok(SweepRow {
        c,
        kl_nats,
        mse_gsf: unconditional_mse_mc(&col(|r| r.se_gsf))?,
        mse_gsfr: unconditional_mse_mc(&col(|r| r.se_gsfr))?,
        mse_matched: unconditional_mse_mc(&col(|r| r.se_matched))?,
        mse_lmmse: unconditional_mse_mc(&col(|r| r.se_lmmse))?,
        lb,
        ub_gsfr,
        ub_lmmse,
        ub_combined: ub_gsfr.min(ub_lmmse),
        diverged_runs: diverged,
        bound_order_violations: runs.iter().map(|r| r.bound_order_violations).sum(),
    })
}

/// One sweep row for `cfg.c_measurement[c_index]`.
pub fn run_experiment(cfg: &ScenarioConfig, c_index: usize) -> Result<SweepRow> {
    cfg.validate()?;
    let c = *cfg
        .c_measurement
        .get(c_index)
        .ok_or_else(|| Error::InvalidArgument(format!("c index {c_index} out of range")))?;
    let system = build_system(cfg, c)?;
    let kl = system.measurement_noise().kl_vs_moment_matched()?.value;
    run_system(&system, cfg, c, c_index as u32, kl)
}

pub fn sweep(cfg: &ScenarioConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let rows = (0..cfg.c_measurement.len())
        .map(|k| run_experiment(cfg, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        config: cfg.clone(),
        rows,
    })
}

/// Single-cluster system with the same dynamics, for degeneracy checks.
pub fn single_cluster_system(dt: f64, process_var: f64, measurement_var: f64) -> Result<SystemModel> {
    let f = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let q = DMatrix::from_row_slice(2, 2, &[dt * dt, dt, dt, 1.0]) * process_var;
    let process = GaussianMixture::single(Gaussian::new(DVector::zeros(2), q)?);
    let measurement = GaussianMixture::single(Gaussian::univariate(0.0, measurement_var)?);
    SystemModel::new(f, h, dt, process, measurement)
}
