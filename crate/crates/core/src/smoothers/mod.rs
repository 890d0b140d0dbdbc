//! Loss-surface approximations fitted from two-level samples.
//!
//! All four families work on standardized inputs. A fitted [`SurfaceModel`]
//! is immutable; evaluation is a pure function of the model and the point,
//! so any partition of a batch gives the same values.

mod kernel;
mod krr;
mod linear;
mod mlp;
mod persist;
mod tune;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use kernel::{fit_kernel_smoother, Bandwidth, DEFAULT_BANDWIDTH_CONSTANTS};
pub use krr::{fit_krr, fit_krr_with, KernelSpec, KrrOptions};
pub use linear::{fit_linear, Basis, BasisSpec, Term};
pub use mlp::{fit_mlp, MlpArch, TrainConfig};
pub use persist::{load_model, load_model_file, save_model, save_model_file, ARTIFACT_VERSION, MAGIC};
pub use tune::{fit_candidate, tune, Candidate, CvRow, HyperparameterGrid, TuneOutcome};

/// Per-dimension affine map `z ↦ (z − location) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub location: Vec<f64>,
    pub scale: Vec<f64>,
    /// Columns with (numerically) zero spread; their scale is 1.
    pub constant: Vec<bool>,
}

impl Standardization {
    pub fn identity(d: usize) -> Self {
        Standardization {
            location: vec![0.0; d],
            scale: vec![1.0; d],
            constant: vec![false; d],
        }
    }

    /// Column means and population standard deviations of `inputs`.
    pub fn fit(inputs: &Matrix) -> Self {
        let (m, d) = (inputs.rows(), inputs.cols());
        let mut location = vec![0.0; d];
        for row in inputs.iter_rows() {
            for (l, x) in location.iter_mut().zip(row) {
                *l += x;
            }
        }
        location.iter_mut().for_each(|l| *l /= m as f64);
        let mut var = vec![0.0; d];
        for row in inputs.iter_rows() {
            for j in 0..d {
                let e = row[j] - location[j];
                var[j] += e * e;
            }
        }
        let mut scale = vec![1.0; d];
        let mut constant = vec![false; d];
        for j in 0..d {
            let sd = (var[j] / m as f64).sqrt();
            if sd > 1e-12 * location[j].abs().max(1.0) {
                scale[j] = sd;
            } else {
                constant[j] = true;
            }
        }
        Standardization {
            location,
            scale,
            constant,
        }
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..x.len() {
            out[j] = (x[j] - self.location[j]) / self.scale[j];
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        out
    }

    pub fn apply_matrix(&self, inputs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(inputs.rows(), inputs.cols());
        for i in 0..inputs.rows() {
            self.apply_into(inputs.row(i), out.row_mut(i));
        }
        out
    }
}

/// Stage-1 regression data: `m` scenarios in `R^d` and their responses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    inputs: Matrix,
    targets: Vec<f64>,
    standardization: Standardization,
}

impl TrainingSet {
    /// Validates the data and standardizes by column moments.
    pub fn new(inputs: Matrix, targets: Vec<f64>) -> Result<Self> {
        let s = Standardization::fit(&inputs);
        TrainingSet::with_standardization(inputs, targets, s)
    }

    pub fn with_standardization(inputs: Matrix, targets: Vec<f64>, standardization: Standardization) -> Result<Self> {
        if inputs.rows() == 0 || inputs.cols() == 0 {
            return Err(Error::EmptyInput);
        }
        if targets.len() != inputs.rows() {
            return Err(Error::DimensionMismatch {
                expected: inputs.rows(),
                got: targets.len(),
            });
        }
        if standardization.dim() != inputs.cols() {
            return Err(Error::DimensionMismatch {
                expected: inputs.cols(),
                got: standardization.dim(),
            });
        }
        if inputs.as_slice().iter().chain(&targets).any(|x| !x.is_finite()) {
            return Err(Error::Domain("training data contains non-finite values".into()));
        }
        if standardization.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Domain("standardization scales must be positive".into()));
        }
        Ok(TrainingSet {
            inputs,
            targets,
            standardization,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }
    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }
    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn standardized_inputs(&self) -> Matrix {
        self.standardization.apply_matrix(&self.inputs)
    }

    /// Rows `idx`, keeping this set's standardization.
    pub fn subset(&self, idx: &[usize]) -> TrainingSet {
        TrainingSet {
            inputs: self.inputs.select_rows(idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            standardization: self.standardization.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Family {
    LinearRegression,
    KernelSmoothing,
    Krr,
    Mlp,
}

impl Family {
    pub fn code(self) -> u8 {
        match self {
            Family::LinearRegression => 1,
            Family::KernelSmoothing => 2,
            Family::Krr => 3,
            Family::Mlp => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Family> {
        Some(match c {
            1 => Family::LinearRegression,
            2 => Family::KernelSmoothing,
            3 => Family::Krr,
            4 => Family::Mlp,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::LinearRegression => "linear",
            Family::KernelSmoothing => "kernel",
            Family::Krr => "krr",
            Family::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Family> {
        match s.to_ascii_lowercase().as_str() {
            "linear" | "linear_regression" | "ols" => Ok(Family::LinearRegression),
            "kernel" | "kernel_smoothing" | "nw" => Ok(Family::KernelSmoothing),
            "krr" => Ok(Family::Krr),
            "mlp" => Ok(Family::Mlp),
            other => Err(Error::Config(format!("unknown smoother family '{other}'"))),
        }
    }
}

/// Family-specific fitted state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Linear {
        basis: Basis,
        coef: Vec<f64>,
    },
    Kernel {
        /// Standardized training inputs.
        inputs: Matrix,
        targets: Vec<f64>,
        bandwidth: f64,
    },
    Krr {
        inputs: Matrix,
        weights: Vec<f64>,
        kernel: KernelSpec,
        lambda: f64,
        target_shift: f64,
        target_scale: f64,
    },
    Mlp {
        arch: MlpArch,
        layers: Vec<mlp::Layer>,
        target_shift: f64,
        target_scale: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub fit_seconds: f64,
    pub sample_size: usize,
    pub hyperparameters: serde_json::Value,
}

/// A fitted loss-surface approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceModel {
    pub family: Family,
    pub params: ModelParams,
    pub standardization: Standardization,
    pub meta: ModelMeta,
}

/// Side information from a batch evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalDiagnostics {
    /// Points where every kernel weight underflowed and the nearest
    /// training target was used.
    pub empty_neighborhoods: usize,
}

impl EvalDiagnostics {
    pub fn into_result(self) -> Result<()> {
        if self.empty_neighborhoods > 0 {
            Err(Error::EmptyNeighborhood {
                count: self.empty_neighborhoods,
            })
        } else {
            Ok(())
        }
    }
}

/// Rows per parallel work item. Values never depend on it.
const EVAL_CHUNK: usize = 256;

impl SurfaceModel {
    pub fn dim(&self) -> usize {
        self.standardization.dim()
    }

    /// Value at a single raw point, plus whether the kernel fallback fired.
    fn eval_point(&self, x: &[f64], z: &mut [f64]) -> (f64, bool) {
        self.standardization.apply_into(x, z);
        match &self.params {
            ModelParams::Linear { basis, coef } => (basis.dot(coef, x, z), false),
            ModelParams::Kernel {
                inputs,
                targets,
                bandwidth,
            } => kernel::nw_value(inputs, targets, *bandwidth, z),
            ModelParams::Krr {
                inputs,
                weights,
                kernel,
                target_shift,
                target_scale,
                ..
            } => (target_shift + target_scale * krr::dual_value(inputs, weights, kernel, z), false),
            ModelParams::Mlp {
                layers,
                target_shift,
                target_scale,
                ..
            } => (target_shift + target_scale * mlp::forward_one(layers, z), false),
        }
    }

    /// Values at the rows of `points`, with diagnostics.
    pub fn evaluate_with_diagnostics(&self, points: &Matrix) -> Result<(Vec<f64>, EvalDiagnostics)> {
        let d = self.dim();
        if points.rows() > 0 && points.cols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: points.cols(),
            });
        }
        let n = points.rows();
        let mut out = vec![0.0; n];
        let fallbacks: usize = out
            .par_chunks_mut(EVAL_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut z = vec![0.0; d];
                let mut count = 0;
                for (k, v) in chunk.iter_mut().enumerate() {
                    let (val, fell_back) = self.eval_point(points.row(c * EVAL_CHUNK + k), &mut z);
                    *v = val;
                    count += usize::from(fell_back);
                }
                count
            })
            .sum();
        Ok((
            out,
            EvalDiagnostics {
                empty_neighborhoods: fallbacks,
            },
        ))
    }

    /// Values at the rows of `points`.
    pub fn evaluate(&self, points: &Matrix) -> Result<Vec<f64>> {
        self.evaluate_with_diagnostics(points).map(|(v, _)| v)
    }

    /// Value at one raw point.
    pub fn evaluate_one(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let mut z = vec![0.0; x.len()];
        Ok(self.eval_point(x, &mut z).0)
    }

    pub fn sample_size(&self) -> usize {
        self.meta.sample_size
    }
}

/// Evaluates `model` at the rows of `points`.
pub fn evaluate(model: &SurfaceModel, points: &Matrix) -> Result<Vec<f64>> {
    model.evaluate(points)
}

/// Maximum and root-mean-square absolute error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub sup: f64,
    pub l2: f64,
}

/// Error of `model` against `oracle` over `count` probe points, where
/// `probe(i)` yields the `i`-th point. With probes drawn from the scenario
/// law this is a Monte Carlo stand-in for the essential supremum.
pub fn sup_error<O, P>(model: &SurfaceModel, oracle: O, probe: P, count: usize) -> Result<ErrorSummary>
where
    O: Fn(&[f64]) -> f64 + Sync,
    P: Fn(usize) -> Vec<f64> + Sync,
{
    if count == 0 {
        return Err(Error::EmptyInput);
    }
    let d = model.dim();
    let errs: Vec<f64> = (0..count)
        .into_par_iter()
        .map(|i| {
            let x = probe(i);
            if x.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: x.len() });
            }
            let mut z = vec![0.0; d];
            Ok((model.eval_point(&x, &mut z).0 - oracle(&x)).abs())
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&errs))
}

/// Error summary over the rows of a fixed probe matrix.
pub fn sup_error_on<O>(model: &SurfaceModel, oracle: O, points: &Matrix) -> Result<ErrorSummary>
where
    O: Fn(&[f64]) -> f64 + Sync,
{
    sup_error(model, oracle, |i| points.row(i).to_vec(), points.rows())
}

fn summarize(errs: &[f64]) -> ErrorSummary {
    let sup = errs.iter().cloned().fold(0.0, f64::max);
    let l2 = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
    ErrorSummary { sup, l2 }
}

pub(crate) fn elapsed_since(start: std::time::Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_points() -> Matrix {
        Matrix::from_fn(100, 2, |i, j| if j == 0 { i as f64 * 0.1 - 5.0 } else { (i % 7) as f64 })
    }

    #[test]
    fn standardized_columns_are_centered() {
        let x = grid_points();
        let ts = TrainingSet::new(x, vec![0.0; 100]).unwrap();
        let z = ts.standardized_inputs();
        for j in 0..2 {
            let col: Vec<f64> = (0..100).map(|i| z[(i, j)]).collect();
            let mean = col.iter().sum::<f64>() / 100.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_column_flagged() {
        let x = Matrix::from_fn(10, 2, |i, j| if j == 0 { i as f64 } else { 3.0 });
        let s = Standardization::fit(&x);
        assert_eq!(s.constant, vec![false, true]);
        assert_eq!(s.scale[1], 1.0);
    }

    #[test]
    fn rejects_bad_training_data() {
        let x = Matrix::from_fn(3, 1, |i, _| i as f64);
        assert!(TrainingSet::new(x.clone(), vec![1.0, 2.0]).is_err());
        assert!(TrainingSet::new(x, vec![1.0, f64::NAN, 2.0]).is_err());
        assert_eq!(TrainingSet::new(Matrix::zeros(0, 2), vec![]), Err(Error::EmptyInput));
    }

    #[test]
    fn family_codes_round_trip() {
        for f in [Family::LinearRegression, Family::KernelSmoothing, Family::Krr, Family::Mlp] {
            assert_eq!(Family::from_code(f.code()), Some(f));
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
    }
}
