#![allow(dead_code)]

pub mod pricing;

use nested_covar::linalg::Matrix;
use nested_covar::rng::RngSeed;
use nested_covar::smoothers::{
    BasisSpec, HyperparameterGrid, KernelSpec, MlpArch, TrainConfig, TrainingSet, DEFAULT_BANDWIDTH_CONSTANTS,
};
use nested_covar::smoothers::Family;
use rand::Rng;
use rand_distr::StandardNormal;

/// `z₁² + sin(z₂)`.
pub fn known(z: &[f64]) -> f64 {
    z[0] * z[0] + z[1].sin()
}

/// 41 × 41 grid over `[−2, 2]²`.
pub fn grid41() -> Matrix {
    Matrix::from_fn(41 * 41, 2, |i, j| {
        let idx = if j == 0 { i / 41 } else { i % 41 };
        -2.0 + 0.1 * idx as f64
    })
}

/// Range of [`known`] over [`grid41`].
pub fn known_range() -> f64 {
    let g = grid41();
    let v: Vec<f64> = g.iter_rows().map(known).collect();
    v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
}

/// `m` uniform inputs on `[−a, a]²` with targets `known + N(0, sd²)`.
pub fn known_sample(m: usize, half_width: f64, sd: f64, seed: u64) -> TrainingSet {
    let mut rng = RngSeed(seed).stream(0, 0);
    let mut x = Vec::with_capacity(2 * m);
    let mut y = Vec::with_capacity(m);
    for _ in 0..m {
        let a = half_width * (2.0 * rng.random::<f64>() - 1.0);
        let b = half_width * (2.0 * rng.random::<f64>() - 1.0);
        let e: f64 = rng.sample(StandardNormal);
        x.extend([a, b]);
        y.push(known(&[a, b]) + sd * e);
    }
    TrainingSet::new(Matrix::from_vec(m, 2, x).unwrap(), y).unwrap()
}

/// Tuning grid used for the known-function checks.
pub fn known_grid(family: Family) -> HyperparameterGrid {
    match family {
        Family::LinearRegression => HyperparameterGrid::linear(&BasisSpec::polynomial(1), &[2, 3, 4, 5, 6, 7, 8]),
        Family::KernelSmoothing => HyperparameterGrid::kernel(&DEFAULT_BANDWIDTH_CONSTANTS),
        Family::Krr => HyperparameterGrid::krr(
            &KernelSpec::Gaussian { length_scale: 1.0 },
            &[1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7],
            &[2.0, 1.0, 0.5, 0.25],
        ),
        Family::Mlp => HyperparameterGrid::mlp(
            &MlpArch::default(),
            &TrainConfig::default(),
            &[32, 64],
            &[0.01, 0.003],
        )
        .with_folds(3),
    }
}

pub const FAMILIES: [Family; 4] = [
    Family::LinearRegression,
    Family::KernelSmoothing,
    Family::Krr,
    Family::Mlp,
];
