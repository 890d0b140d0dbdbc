//! Ordinary least squares on an explicit basis.

use faer::linalg::solvers::SolveLstsq;
use serde::{Deserialize, Serialize};

use super::{elapsed_since, Family, ModelMeta, ModelParams, SurfaceModel, TrainingSet};
use crate::error::{Error, Result};

/// One basis function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "term", rename_all = "snake_case")]
pub enum Term {
    Intercept,
    /// `z_dim^power` on the standardized coordinate.
    Power { dim: usize, power: u32 },
    /// `(x_dim − strike)⁺` on the raw coordinate.
    Hinge { dim: usize, strike: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub terms: Vec<Term>,
}

/// Compact description of a basis: an intercept, powers `1..=degree` of
/// every coordinate, and optional hinge terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub degree: u32,
    #[serde(default)]
    pub hinges: Vec<(usize, f64)>,
}

impl BasisSpec {
    pub fn polynomial(degree: u32) -> Self {
        BasisSpec {
            degree,
            hinges: Vec::new(),
        }
    }

    /// Portfolio default: `{1, z, z²}` per coordinate plus `(s_i − K)⁺` on
    /// the spot block for every distinct strike of asset `i`.
    pub fn portfolio(strikes: &[Vec<f64>]) -> Self {
        let mut hinges = Vec::new();
        for (i, ks) in strikes.iter().enumerate() {
            let mut seen: Vec<f64> = Vec::new();
            for &k in ks {
                if !seen.contains(&k) {
                    seen.push(k);
                    hinges.push((i, k));
                }
            }
        }
        BasisSpec { degree: 2, hinges }
    }

    pub fn with_degree(&self, degree: u32) -> Self {
        BasisSpec {
            degree,
            hinges: self.hinges.clone(),
        }
    }

    pub fn build(&self, d: usize) -> Basis {
        let mut terms = vec![Term::Intercept];
        for dim in 0..d {
            for power in 1..=self.degree {
                terms.push(Term::Power { dim, power });
            }
        }
        for &(dim, strike) in &self.hinges {
            terms.push(Term::Hinge { dim, strike });
        }
        Basis { terms }
    }
}

impl Basis {
    pub fn new(terms: Vec<Term>) -> Self {
        Basis { terms }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    fn max_dim(&self) -> Option<usize> {
        self.terms
            .iter()
            .filter_map(|t| match *t {
                Term::Intercept => None,
                Term::Power { dim, .. } | Term::Hinge { dim, .. } => Some(dim),
            })
            .max()
    }

    fn value(t: &Term, x: &[f64], z: &[f64]) -> f64 {
        match *t {
            Term::Intercept => 1.0,
            Term::Power { dim, power } => z[dim].powi(power as i32),
            Term::Hinge { dim, strike } => (x[dim] - strike).max(0.0),
        }
    }

    /// `ω̃ᵀ b(x)` given the raw point `x` and its standardized image `z`.
    pub fn dot(&self, coef: &[f64], x: &[f64], z: &[f64]) -> f64 {
        self.terms.iter().zip(coef).map(|(t, c)| c * Basis::value(t, x, z)).sum()
    }
}

/// Least-squares coefficients by Householder QR of the design matrix.
pub fn fit_linear(data: &TrainingSet, basis: &Basis) -> Result<SurfaceModel> {
    let start = std::time::Instant::now();
    crate::linalg::ensure_sequential_faer();
    let (m, d, s) = (data.len(), data.dim(), basis.len());
    if s == 0 {
        return Err(Error::Domain("basis is empty".into()));
    }
    if let Some(dim) = basis.max_dim() {
        if dim >= d {
            return Err(Error::DimensionMismatch { expected: d, got: dim + 1 });
        }
    }
    if m <= s {
        return Err(Error::RankDeficient { column: m });
    }
    let z = data.standardized_inputs();
    let x = data.inputs();
    let design = faer::Mat::from_fn(m, s, |i, j| Basis::value(&basis.terms[j], x.row(i), z.row(i)));
    let qr = design.qr();
    let r = qr.thin_R();
    for j in 0..s {
        let norm = (0..m).map(|i| design[(i, j)] * design[(i, j)]).sum::<f64>().sqrt();
        if !(r[(j, j)].abs() > 1e-10 * norm) {
            return Err(Error::RankDeficient { column: j });
        }
    }
    let rhs = faer::Mat::from_fn(m, 1, |i, _| data.targets()[i]);
    let sol = qr.solve_lstsq(&rhs);
    let coef: Vec<f64> = (0..s).map(|j| sol[(j, 0)]).collect();
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::RankDeficient { column: 0 });
    }
    Ok(SurfaceModel {
        family: Family::LinearRegression,
        params: ModelParams::Linear {
            basis: basis.clone(),
            coef,
        },
        standardization: data.standardization().clone(),
        meta: ModelMeta {
            fit_seconds: elapsed_since(start),
            sample_size: m,
            hyperparameters: serde_json::json!({ "terms": s }),
        },
    })
}
