//! Kernel ridge regression in dual form.

use faer::linalg::solvers::Solve;
use serde::{Deserialize, Serialize};

use super::{elapsed_since, Family, ModelMeta, ModelParams, SurfaceModel, TrainingSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Stationary kernel on standardized inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Gaussian { length_scale: f64 },
    /// Half-integer smoothness only: `nu ∈ {0.5, 1.5, 2.5}`.
    Matern { nu: f64, length_scale: f64 },
}

impl KernelSpec {
    pub fn length_scale(&self) -> f64 {
        match *self {
            KernelSpec::Gaussian { length_scale } | KernelSpec::Matern { length_scale, .. } => length_scale,
        }
    }

    pub fn with_length_scale(&self, length_scale: f64) -> KernelSpec {
        match *self {
            KernelSpec::Gaussian { .. } => KernelSpec::Gaussian { length_scale },
            KernelSpec::Matern { nu, .. } => KernelSpec::Matern { nu, length_scale },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.length_scale();
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::Domain(format!("kernel length scale must be positive, got {l}")));
        }
        if let KernelSpec::Matern { nu, .. } = *self {
            if ![0.5, 1.5, 2.5].contains(&nu) {
                return Err(Error::Domain(format!("Matern smoothness must be 0.5, 1.5 or 2.5, got {nu}")));
            }
        }
        Ok(())
    }

    /// Kernel value at squared distance `r2`.
    #[inline]
    pub fn eval_sq(&self, r2: f64) -> f64 {
        match *self {
            KernelSpec::Gaussian { length_scale } => (-0.5 * r2 / (length_scale * length_scale)).exp(),
            KernelSpec::Matern { nu, length_scale } => {
                let r = r2.sqrt() / length_scale;
                if nu == 0.5 {
                    (-r).exp()
                } else if nu == 1.5 {
                    let a = 3f64.sqrt() * r;
                    (1.0 + a) * (-a).exp()
                } else {
                    let a = 5f64.sqrt() * r;
                    (1.0 + a + a * a / 3.0) * (-a).exp()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KrrOptions {
    /// Fit standardized targets (mean 0, unit variance) and map back.
    #[serde(default = "yes")]
    pub center_targets: bool,
    /// Largest accepted sample size.
    #[serde(default = "default_cap")]
    pub max_rows: usize,
}

fn yes() -> bool {
    true
}
fn default_cap() -> usize {
    12_000
}

impl Default for KrrOptions {
    fn default() -> Self {
        KrrOptions {
            center_targets: true,
            max_rows: default_cap(),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `k_zᵀ·weights` at standardized `z`.
pub(super) fn dual_value(inputs: &Matrix, weights: &[f64], kernel: &KernelSpec, z: &[f64]) -> f64 {
    inputs
        .iter_rows()
        .zip(weights)
        .map(|(row, w)| w * kernel.eval_sq(sq_dist(row, z)))
        .sum()
}

/// [`fit_krr_with`] under default options.
pub fn fit_krr(data: &TrainingSet, kernel: &KernelSpec, lambda: f64) -> Result<SurfaceModel> {
    fit_krr_with(data, kernel, lambda, &KrrOptions::default())
}

/// Solves `(K + mλI) w = X` by Cholesky factorization.
pub fn fit_krr_with(data: &TrainingSet, kernel: &KernelSpec, lambda: f64, opts: &KrrOptions) -> Result<SurfaceModel> {
    let start = std::time::Instant::now();
    crate::linalg::ensure_sequential_faer();
    kernel.validate()?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("ridge penalty must be positive, got {lambda}")));
    }
    let m = data.len();
    if m > opts.max_rows {
        return Err(Error::Domain(format!(
            "kernel ridge sample size {m} exceeds the cap of {}",
            opts.max_rows
        )));
    }
    let inputs = data.standardized_inputs();
    let y = data.targets();
    let (shift, scale) = if opts.center_targets {
        let mean = y.iter().sum::<f64>() / m as f64;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64).sqrt();
        (mean, if sd > 0.0 { sd } else { 1.0 })
    } else {
        (0.0, 1.0)
    };
    let ridge = m as f64 * lambda;
    // Only the lower triangle is read by the factorization.
    let gram = faer::Mat::from_fn(m, m, |i, j| {
        if j > i {
            0.0
        } else if i == j {
            1.0 + ridge
        } else {
            kernel.eval_sq(sq_dist(inputs.row(i), inputs.row(j)))
        }
    });
    let llt = gram.llt(faer::Side::Lower).map_err(|_| Error::FactorizationFailure)?;
    let rhs = faer::Mat::from_fn(m, 1, |i, _| (y[i] - shift) / scale);
    let sol = llt.solve(&rhs);
    let weights: Vec<f64> = (0..m).map(|i| sol[(i, 0)]).collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::FactorizationFailure);
    }
    Ok(SurfaceModel {
        family: Family::Krr,
        params: ModelParams::Krr {
            inputs,
            weights,
            kernel: *kernel,
            lambda,
            target_shift: shift,
            target_scale: scale,
        },
        standardization: data.standardization().clone(),
        meta: ModelMeta {
            fit_seconds: elapsed_since(start),
            sample_size: m,
            hyperparameters: serde_json::json!({ "kernel": kernel, "lambda": lambda }),
        },
    })
}
