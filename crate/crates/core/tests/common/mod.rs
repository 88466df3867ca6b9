#![allow(dead_code)]

use gsf_bounds::filters::{gsf_step, FilterState, ModeBank, SystemModel};
use gsf_bounds::gm::GaussianMixture;
use nalgebra::{DMatrix, DVector};

pub fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

/// Scalar random walk `x' = x`, `z = x + w`, so mode j predicts `z ~ N(b_j, p0 + R_j)`.
pub fn scalar_measurement_bank(p0: f64, weights: &[f64], means: &[f64], vars: &[f64]) -> ModeBank {
    let process = GaussianMixture::univariate(&[1.0], &[0.0], &[0.0]).unwrap();
    let measurement = GaussianMixture::univariate(weights, means, vars).unwrap();
    let model = SystemModel::new(
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        1.0,
        process,
        measurement,
    )
    .unwrap();
    let prev = FilterState::new(v(&[0.0]), DMatrix::from_element(1, 1, p0)).unwrap();
    gsf_step(&model, &prev, &v(&[0.0])).unwrap().bank
}

/// Bank of a 2-state constant-velocity system with arbitrary scalar mixtures on both noises.
pub fn cv_bank(
    process: (&[f64], &[f64], &[f64]),
    measurement: (&[f64], &[f64], &[f64]),
    p0: [f64; 3],
    x0: [f64; 2],
) -> ModeBank {
    let dt = 0.108;
    let g = DMatrix::from_column_slice(2, 1, &[dt, 1.0]);
    let pn = GaussianMixture::univariate(process.0, process.1, process.2)
        .unwrap()
        .transform(&g)
        .unwrap();
    let mn = GaussianMixture::univariate(measurement.0, measurement.1, measurement.2).unwrap();
    let model = SystemModel::new(
        DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        dt,
        pn,
        mn,
    )
    .unwrap();
    let p = DMatrix::from_row_slice(2, 2, &[p0[0], p0[1], p0[1], p0[2]]);
    let prev = FilterState::new(v(&x0), p).unwrap();
    gsf_step(&model, &prev, &v(&[0.0])).unwrap().bank
}

/// Deterministic pseudo-random scalar bank for oracle comparisons.
pub fn random_bank(seed: u64) -> ModeBank {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let np = rng.random_range(1..=3);
    let nm = rng.random_range(1..=4);
    let mut mix = |n: usize, spread: f64| {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        let w = w.iter().map(|x| x / s).collect::<Vec<_>>();
        let m = (0..n).map(|_| rng.random_range(-spread..spread)).collect::<Vec<_>>();
        let var = (0..n).map(|_| rng.random_range(0.2..3.0)).collect::<Vec<_>>();
        (w, m, var)
    };
    let (pw, pm, pv) = mix(np, 5.0);
    let (mw, mm, mv) = mix(nm, 6.0);
    let a: f64 = rng.random_range(0.2..2.0);
    let c: f64 = rng.random_range(0.2..2.0);
    let b = rng.random_range(-0.5..0.5f64) * (a * c).sqrt();
    let x0 = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
    cv_bank((&pw, &pm, &pv), (&mw, &mm, &mv), [a, b, c], x0)
}
