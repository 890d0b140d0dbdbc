//! K-fold cross-validated grid search.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::kernel::auto_bandwidth;
use super::{
    fit_kernel_smoother, fit_krr, fit_linear, fit_mlp, Bandwidth, BasisSpec, Family, KernelSpec, MlpArch,
    SurfaceModel, TrainConfig, TrainingSet,
};
use crate::error::{Error, Result};
use crate::rng::{tags, RngSeed};

/// One point of a hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Candidate {
    Linear { basis: BasisSpec },
    /// Bandwidth `c·m^{−1/(4+d)}` for the size `m` of the fitted sample.
    Kernel { constant: f64 },
    Krr { kernel: KernelSpec, lambda: f64 },
    Mlp { arch: MlpArch, train: TrainConfig },
}

impl Candidate {
    pub fn family(&self) -> Family {
        match self {
            Candidate::Linear { .. } => Family::LinearRegression,
            Candidate::Kernel { .. } => Family::KernelSmoothing,
            Candidate::Krr { .. } => Family::Krr,
            Candidate::Mlp { .. } => Family::Mlp,
        }
    }
}

/// Fits the model described by `candidate`.
pub fn fit_candidate(data: &TrainingSet, candidate: &Candidate) -> Result<SurfaceModel> {
    match candidate {
        Candidate::Linear { basis } => fit_linear(data, &basis.build(data.dim())),
        Candidate::Kernel { constant } => {
            fit_kernel_smoother(data, &Bandwidth::Fixed(auto_bandwidth(data.len(), data.dim(), *constant)))
        }
        Candidate::Krr { kernel, lambda } => fit_krr(data, kernel, *lambda),
        Candidate::Mlp { arch, train } => fit_mlp(data, arch, train),
    }
}

/// Candidates in evaluation order plus the search settings.
///
/// Candidates are scored in list order and a later one replaces the
/// incumbent only with a strictly lower CV error, so on ties the earlier
/// entry wins. The builders list the most regularized settings first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparameterGrid {
    pub candidates: Vec<Candidate>,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default)]
    pub seed: u64,
    /// Wall-clock cap; unset means no cap.
    #[serde(default)]
    pub budget_seconds: Option<f64>,
    /// Tune on a fixed random subsample of at most this many rows.
    #[serde(default)]
    pub max_rows: Option<usize>,
}

fn default_folds() -> usize {
    5
}

fn sorted_desc(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

impl HyperparameterGrid {
    pub fn new(candidates: Vec<Candidate>) -> Self {
        HyperparameterGrid {
            candidates,
            cv_folds: default_folds(),
            seed: 0,
            budget_seconds: None,
            max_rows: None,
        }
    }

    /// Polynomial degrees, lowest first.
    pub fn linear(base: &BasisSpec, degrees: &[u32]) -> Self {
        let mut ds = degrees.to_vec();
        ds.sort_unstable();
        ds.dedup();
        HyperparameterGrid::new(ds.into_iter().map(|d| Candidate::Linear { basis: base.with_degree(d) }).collect())
    }

    /// Bandwidth constants, widest first.
    pub fn kernel(constants: &[f64]) -> Self {
        HyperparameterGrid::new(
            sorted_desc(constants)
                .into_iter()
                .map(|constant| Candidate::Kernel { constant })
                .collect(),
        )
    }

    /// Penalties from largest, then length scales from largest.
    pub fn krr(kernel: &KernelSpec, lambdas: &[f64], length_scales: &[f64]) -> Self {
        let mut c = Vec::new();
        for lambda in sorted_desc(lambdas) {
            for l in sorted_desc(length_scales) {
                c.push(Candidate::Krr {
                    kernel: kernel.with_length_scale(l),
                    lambda,
                });
            }
        }
        HyperparameterGrid::new(c)
    }

    /// Widths from smallest, then the learning rates in the given order.
    pub fn mlp(arch: &MlpArch, train: &TrainConfig, widths: &[usize], learning_rates: &[f64]) -> Self {
        let mut ws = widths.to_vec();
        ws.sort_unstable();
        ws.dedup();
        let mut c = Vec::new();
        for width in ws {
            for &learning_rate in learning_rates {
                c.push(Candidate::Mlp {
                    arch: MlpArch { width, ..*arch },
                    train: TrainConfig { learning_rate, ..*train },
                });
            }
        }
        HyperparameterGrid::new(c)
    }

    pub fn with_folds(mut self, k: usize) -> Self {
        self.cv_folds = k;
        self
    }
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
    pub fn with_max_rows(mut self, rows: usize) -> Self {
        self.max_rows = Some(rows);
        self
    }
    pub fn with_budget(mut self, seconds: f64) -> Self {
        self.budget_seconds = Some(seconds);
        self
    }
}

/// Cross-validation record of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub candidate: Candidate,
    /// Pooled held-out MSE; absent if some fold failed to fit.
    pub mse: Option<f64>,
    pub fold_mse: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub family: Family,
    pub best: Candidate,
    pub best_mse: f64,
    pub table: Vec<CvRow>,
}

fn score(data: &TrainingSet, folds: &[Vec<usize>], candidate: &Candidate) -> CvRow {
    let m = data.len();
    let mut fold_mse = Vec::with_capacity(folds.len());
    let mut sse = 0.0;
    let mut count = 0usize;
    for (f, held) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        debug_assert_eq!(train_idx.len() + held.len(), m);
        let result = fit_candidate(&data.subset(&train_idx), candidate)
            .and_then(|model| model.evaluate(&data.inputs().select_rows(held)));
        match result {
            Ok(pred) => {
                let s: f64 = held.iter().zip(&pred).map(|(&i, p)| (p - data.targets()[i]).powi(2)).sum();
                fold_mse.push(s / held.len() as f64);
                sse += s;
                count += held.len();
            }
            Err(e) => {
                return CvRow {
                    candidate: candidate.clone(),
                    mse: None,
                    fold_mse,
                    error: Some(e.to_string()),
                }
            }
        }
    }
    let mse = sse / count as f64;
    CvRow {
        candidate: candidate.clone(),
        mse: mse.is_finite().then_some(mse),
        fold_mse,
        error: None,
    }
}

/// Grid search by K-fold cross-validation.
///
/// Fold membership is a seeded permutation of the (optionally subsampled)
/// rows. When the wall-clock budget runs out before every candidate is
/// scored, the error carries the best result among those scored.
pub fn tune(data: &TrainingSet, grid: &HyperparameterGrid) -> Result<TuneOutcome> {
    let start = std::time::Instant::now();
    if grid.candidates.is_empty() {
        return Err(Error::Domain("hyperparameter grid is empty".into()));
    }
    if grid.cv_folds < 2 {
        return Err(Error::Domain(format!("cv_folds must be at least 2, got {}", grid.cv_folds)));
    }
    let family = grid.candidates[0].family();
    if grid.candidates.iter().any(|c| c.family() != family) {
        return Err(Error::Domain("a grid must hold candidates of one family".into()));
    }
    let seed = RngSeed(grid.seed).derive(tags::TUNING);
    let data = match grid.max_rows {
        Some(cap) if cap < data.len() => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut seed.stream(1, 0));
            idx.truncate(cap);
            idx.sort_unstable();
            data.subset(&idx)
        }
        _ => data.clone(),
    };
    let k = grid.cv_folds;
    if data.len() < k {
        return Err(Error::Domain(format!(
            "{} rows cannot be split into {k} folds",
            data.len()
        )));
    }
    let mut perm: Vec<usize> = (0..data.len()).collect();
    perm.shuffle(&mut seed.stream(0, 0));
    let mut folds = vec![Vec::new(); k];
    for (p, &i) in perm.iter().enumerate() {
        folds[p % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());

    let mut table = Vec::with_capacity(grid.candidates.len());
    let mut best: Option<(usize, f64)> = None;
    for (ci, cand) in grid.candidates.iter().enumerate() {
        if let Some(budget) = grid.budget_seconds {
            if start.elapsed().as_secs_f64() > budget {
                let outcome = best.map(|(b, mse)| {
                    Box::new(TuneOutcome {
                        family,
                        best: grid.candidates[b].clone(),
                        best_mse: mse,
                        table: table.clone(),
                    })
                });
                return Err(Error::BudgetExhausted {
                    evaluated: ci,
                    best: outcome,
                });
            }
        }
        let row = score(&data, &folds, cand);
        if let Some(mse) = row.mse {
            if best.is_none_or(|(_, b)| mse < b) {
                best = Some((ci, mse));
            }
        }
        table.push(row);
    }
    match best {
        Some((b, best_mse)) => Ok(TuneOutcome {
            family,
            best: grid.candidates[b].clone(),
            best_mse,
            table,
        }),
        None => Err(Error::Domain(format!(
            "no candidate could be fitted: {}",
            table[0].error.clone().unwrap_or_default()
        ))),
    }
}
