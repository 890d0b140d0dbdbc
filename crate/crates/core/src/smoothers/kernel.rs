//! Nadaraya–Watson smoother with a Gaussian kernel.

use serde::{Deserialize, Serialize};

use super::{elapsed_since, Family, ModelMeta, ModelParams, SurfaceModel, TrainingSet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Constants `c` searched by [`Bandwidth::Auto`] in `h = c·m^{−1/(4+d)}`.
pub const DEFAULT_BANDWIDTH_CONSTANTS: [f64; 8] = [0.1, 0.15, 0.2, 0.3, 0.45, 0.65, 1.0, 1.5];

/// Largest number of held-out points scored per leave-one-out pass.
const LOO_QUERIES: usize = 1000;

/// Exponent beyond which `exp(−x)` is treated as underflowed.
const UNDERFLOW: f64 = 708.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Bandwidth in standardized units.
    Fixed(f64),
    /// `h = c·m^{−1/(4+d)}` with `c` chosen by leave-one-out CV.
    Auto,
    /// As `Auto` over the given constants.
    AutoFrom(Vec<f64>),
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// NW value at standardized `z`, skipping training row `skip`. The second
/// component reports that every weight underflowed and the nearest target
/// was returned instead.
fn nw_value_skip(inputs: &Matrix, targets: &[f64], h: f64, z: &[f64], skip: Option<usize>) -> (f64, bool) {
    let mut dmin = f64::INFINITY;
    let mut imin = 0;
    for (i, row) in inputs.iter_rows().enumerate() {
        if Some(i) == skip {
            continue;
        }
        let d2 = sq_dist(row, z);
        if d2 < dmin {
            dmin = d2;
            imin = i;
        }
    }
    let inv = 0.5 / (h * h);
    if dmin * inv > UNDERFLOW {
        return (targets[imin], true);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (i, row) in inputs.iter_rows().enumerate() {
        if Some(i) == skip {
            continue;
        }
        let e = (sq_dist(row, z) - dmin) * inv;
        if e < UNDERFLOW {
            let w = (-e).exp();
            num += w * targets[i];
            den += w;
        }
    }
    (num / den, false)
}

pub(super) fn nw_value(inputs: &Matrix, targets: &[f64], h: f64, z: &[f64]) -> (f64, bool) {
    nw_value_skip(inputs, targets, h, z, None)
}

/// Leave-one-out mean squared error over an evenly strided subset of rows.
pub(super) fn loo_mse(inputs: &Matrix, targets: &[f64], h: f64) -> f64 {
    let m = inputs.rows();
    let stride = m.div_ceil(LOO_QUERIES).max(1);
    let queries: Vec<usize> = (0..m).step_by(stride).collect();
    use rayon::prelude::*;
    let sse: f64 = queries
        .par_iter()
        .map(|&i| {
            let (v, _) = nw_value_skip(inputs, targets, h, inputs.row(i), Some(i));
            (v - targets[i]).powi(2)
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    sse / queries.len() as f64
}

pub(super) fn auto_bandwidth(m: usize, d: usize, c: f64) -> f64 {
    c * (m as f64).powf(-1.0 / (4.0 + d as f64))
}

/// Fits the smoother. Weights are computed relative to the nearest training
/// point, so they never all underflow unless the nearest one does.
pub fn fit_kernel_smoother(data: &TrainingSet, bandwidth: &Bandwidth) -> Result<SurfaceModel> {
    let start = std::time::Instant::now();
    let (m, d) = (data.len(), data.dim());
    if m < 2 {
        return Err(Error::Domain("kernel smoothing needs at least 2 samples".into()));
    }
    let inputs = data.standardized_inputs();
    let targets = data.targets().to_vec();
    let (h, constant) = match bandwidth {
        Bandwidth::Fixed(h) => {
            if !(*h > 0.0 && h.is_finite()) {
                return Err(Error::Domain(format!("bandwidth must be positive, got {h}")));
            }
            (*h, None)
        }
        Bandwidth::Auto => select_constant(&inputs, &targets, &DEFAULT_BANDWIDTH_CONSTANTS)?,
        Bandwidth::AutoFrom(cs) => select_constant(&inputs, &targets, cs)?,
    };
    Ok(SurfaceModel {
        family: Family::KernelSmoothing,
        params: ModelParams::Kernel {
            inputs,
            targets,
            bandwidth: h,
        },
        standardization: data.standardization().clone(),
        meta: ModelMeta {
            fit_seconds: elapsed_since(start),
            sample_size: m,
            hyperparameters: serde_json::json!({ "bandwidth": h, "constant": constant, "dim": d }),
        },
    })
}

fn select_constant(inputs: &Matrix, targets: &[f64], constants: &[f64]) -> Result<(f64, Option<f64>)> {
    if constants.is_empty() || constants.iter().any(|c| !(*c > 0.0)) {
        return Err(Error::Domain("bandwidth constants must be positive and nonempty".into()));
    }
    let (m, d) = (inputs.rows(), inputs.cols());
    let mut sorted = constants.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for &c in &sorted {
        let mse = loo_mse(inputs, targets, auto_bandwidth(m, d, c));
        // Ties go to the larger bandwidth.
        if best.is_none_or(|(_, b)| mse <= b) {
            best = Some((c, mse));
        }
    }
    let (c, _) = best.expect("nonempty constants");
    Ok((auto_bandwidth(m, d, c), Some(c)))
}
