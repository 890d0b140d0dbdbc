//! Estimators built on a [`LossModel`].

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{batching_covar, median_var, EstimateReport, EstimatorConfig, LossModel, PhaseTimings};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{tags, RngSeed};
use crate::smoothers::{fit_candidate, tune, Candidate, HyperparameterGrid, SurfaceModel, TrainingSet, TuneOutcome};

/// How a surface is obtained from Stage-1 data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceMethod {
    Fixed(Candidate),
    Tuned(HyperparameterGrid),
}

/// Where the decoupled estimator takes its surfaces from.
#[derive(Debug, Clone, PartialEq)]
pub enum SurfaceSource {
    /// Run Stage 1 and fit.
    Fit(SurfaceMethod),
    /// Previously fitted `(μ̃, π̃)`; Stage 1 is skipped.
    Fitted(Box<SurfaceModel>, Box<SurfaceModel>),
    /// The exact conditional losses.
    Oracle,
}

/// Scenarios per Stage-2 evaluation block.
const STAGE2_BLOCK: usize = 16_384;

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Stage-1 outer scenarios of `seed` and their inner-sample means.
pub fn two_level_sample<P: LossModel + ?Sized>(problem: &P, count: usize, l: usize, seed: RngSeed) -> Result<(Matrix, Vec<(f64, f64)>)> {
    if count == 0 || l == 0 {
        return Err(Error::Domain("two-level simulation needs at least one scenario and one inner sample".into()));
    }
    let outer = seed.derive(tags::STAGE1_OUTER);
    let inner = seed.derive(tags::STAGE1_INNER);
    let rows: Vec<(Vec<f64>, (f64, f64))> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let z = problem.outer(outer, i);
            let xy = problem.inner_means(&z, l, inner, i)?;
            Ok((z, xy))
        })
        .collect::<Result<_>>()?;
    let d = problem.dim();
    let mut data = Vec::with_capacity(count * d);
    let mut means = Vec::with_capacity(count);
    for (z, xy) in rows {
        data.extend_from_slice(&z);
        means.push(xy);
    }
    Ok((Matrix::from_vec(count, d, data)?, means))
}

fn stage2_block<P: LossModel + ?Sized>(problem: &P, seed: RngSeed, from: usize, to: usize) -> Result<Matrix> {
    let d = problem.dim();
    let rows: Vec<Vec<f64>> = (from as u64..to as u64).into_par_iter().map(|i| problem.outer(seed, i)).collect();
    Matrix::from_vec(to - from, d, rows.concat())
}

struct Fitted {
    mu: SurfaceModel,
    pi: SurfaceModel,
    tuning: Option<[TuneOutcome; 2]>,
    tune_secs: f64,
    fit_secs: f64,
}

fn fit_pair(features: Matrix, means: &[(f64, f64)], method: &SurfaceMethod) -> Result<Fitted> {
    let xs = TrainingSet::new(features.clone(), means.iter().map(|p| p.0).collect())?;
    let ys = TrainingSet::new(features, means.iter().map(|p| p.1).collect())?;
    match method {
        SurfaceMethod::Fixed(c) => {
            let t = Instant::now();
            let mu = fit_candidate(&xs, c)?;
            let pi = fit_candidate(&ys, c)?;
            Ok(Fitted {
                mu,
                pi,
                tuning: None,
                tune_secs: 0.0,
                fit_secs: secs(t),
            })
        }
        SurfaceMethod::Tuned(grid) => {
            let t = Instant::now();
            let tx = tune(&xs, grid)?;
            let ty = tune(&ys, grid)?;
            let tune_secs = secs(t);
            let t = Instant::now();
            let mu = fit_candidate(&xs, &tx.best)?;
            let pi = fit_candidate(&ys, &ty.best)?;
            Ok(Fitted {
                mu,
                pi,
                tuning: Some([tx, ty]),
                tune_secs,
                fit_secs: secs(t),
            })
        }
    }
}

fn finish(
    pairs: &[(f64, f64)],
    cfg: &EstimatorConfig,
    mut timings: PhaseTimings,
    tuning: Option<[TuneOutcome; 2]>,
    empty_neighborhoods: usize,
) -> Result<EstimateReport> {
    let t = Instant::now();
    let b = batching_covar(pairs, cfg.k, cfg.h, cfg.alpha, cfg.beta)?;
    let var_hat = median_var(&b.batch_var)?;
    timings.estimate = secs(t);
    Ok(EstimateReport {
        covar_hat: b.covar,
        var_hat,
        config: *cfg,
        timings,
        concomitants: Some(b.concomitants),
        tuning,
        empty_neighborhoods,
    })
}

/// Batching on exact conditional losses of `n = k·h` scenarios drawn from
/// the Stage-2 stream.
pub fn batching_exact_covar<P: LossModel + ?Sized>(problem: &P, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    cfg.validate()?;
    let t = Instant::now();
    let seed = RngSeed(cfg.seed).derive(tags::STAGE2_OUTER);
    let pairs: Vec<(f64, f64)> = (0..cfg.n() as u64)
        .into_par_iter()
        .map(|i| problem.exact(&problem.outer(seed, i)))
        .collect::<Result<_>>()?;
    let timings = PhaseTimings {
        sim2: secs(t),
        ..PhaseTimings::default()
    };
    finish(&pairs, cfg, timings, None, 0)
}

/// Standard nested simulation: `k·h` scenarios, `l` inner samples each,
/// batching on the sample means.
pub fn naive_sns_covar<P: LossModel + ?Sized>(problem: &P, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    cfg.validate()?;
    let t = Instant::now();
    let (_, means) = two_level_sample(problem, cfg.n(), cfg.l, RngSeed(cfg.seed))?;
    let timings = PhaseTimings {
        sim1: secs(t),
        ..PhaseTimings::default()
    };
    finish(&means, cfg, timings, None, 0)
}

/// Coupled smoothing: surfaces are fitted on the `k·h` scenarios and
/// evaluated on the same scenarios.
pub fn naive_smoothed_covar<P: LossModel + ?Sized>(
    problem: &P,
    cfg: &EstimatorConfig,
    method: &SurfaceMethod,
) -> Result<EstimateReport> {
    cfg.validate()?;
    let t = Instant::now();
    let (features, means) = two_level_sample(problem, cfg.n(), cfg.l, RngSeed(cfg.seed))?;
    let mut timings = PhaseTimings {
        sim1: secs(t),
        ..PhaseTimings::default()
    };
    let fitted = fit_pair(features.clone(), &means, method)?;
    timings.tune = fitted.tune_secs;
    timings.fit = fitted.fit_secs;
    let t = Instant::now();
    let (mu, d1) = fitted.mu.evaluate_with_diagnostics(&features)?;
    let (pi, d2) = fitted.pi.evaluate_with_diagnostics(&features)?;
    timings.sim2 = secs(t);
    let pairs: Vec<(f64, f64)> = mu.into_iter().zip(pi).collect();
    finish(
        &pairs,
        cfg,
        timings,
        fitted.tuning,
        d1.empty_neighborhoods + d2.empty_neighborhoods,
    )
}

/// Surfaces from Stage 1 of the decoupled estimator.
#[derive(Debug, Clone)]
pub struct FittedSurfaces {
    pub mu: SurfaceModel,
    pub pi: SurfaceModel,
    pub tuning: Option<[TuneOutcome; 2]>,
    /// `sim1`, `tune` and `fit` are set.
    pub timings: PhaseTimings,
}

/// Stage 1 alone: `cfg.m` scenarios with `cfg.l` inner samples, then
/// tuning and fitting of both surfaces.
pub fn fit_surfaces<P: LossModel + ?Sized>(
    problem: &P,
    cfg: &EstimatorConfig,
    method: &SurfaceMethod,
) -> Result<FittedSurfaces> {
    let t = Instant::now();
    let (features, means) = two_level_sample(problem, cfg.m, cfg.l, RngSeed(cfg.seed))?;
    let sim1 = secs(t);
    let f = fit_pair(features, &means, method)?;
    Ok(FittedSurfaces {
        mu: f.mu,
        pi: f.pi,
        tuning: f.tuning,
        timings: PhaseTimings {
            sim1,
            tune: f.tune_secs,
            fit: f.fit_secs,
            ..PhaseTimings::default()
        },
    })
}

/// Two-stage estimator: surfaces from `m` scenarios with `l` inner samples,
/// then batching over `k·h` fresh scenarios pushed through the surfaces.
pub fn decoupled_covar<P: LossModel + ?Sized>(
    problem: &P,
    cfg: &EstimatorConfig,
    source: &SurfaceSource,
) -> Result<EstimateReport> {
    cfg.validate()?;
    let mut timings = PhaseTimings::default();
    let mut tuning = None;
    let surfaces = match source {
        SurfaceSource::Fit(method) => {
            let f = fit_surfaces(problem, cfg, method)?;
            timings = f.timings;
            tuning = f.tuning;
            Some((f.mu, f.pi))
        }
        SurfaceSource::Fitted(mu, pi) => {
            for s in [mu, pi] {
                if s.dim() != problem.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: problem.dim(),
                        got: s.dim(),
                    });
                }
            }
            Some(((**mu).clone(), (**pi).clone()))
        }
        SurfaceSource::Oracle => None,
    };
    let t = Instant::now();
    let seed = RngSeed(cfg.seed).derive(tags::STAGE2_OUTER);
    let n = cfg.n();
    let mut pairs = Vec::with_capacity(n);
    let mut fallbacks = 0;
    match &surfaces {
        Some((mu, pi)) => {
            let mut from = 0;
            while from < n {
                let to = (from + STAGE2_BLOCK).min(n);
                let block = stage2_block(problem, seed, from, to)?;
                let (a, da) = mu.evaluate_with_diagnostics(&block)?;
                let (b, db) = pi.evaluate_with_diagnostics(&block)?;
                fallbacks += da.empty_neighborhoods + db.empty_neighborhoods;
                pairs.extend(a.into_iter().zip(b));
                from = to;
            }
        }
        None => {
            pairs = (0..n as u64)
                .into_par_iter()
                .map(|i| problem.exact(&problem.outer(seed, i)))
                .collect::<Result<_>>()?;
        }
    }
    timings.sim2 = secs(t);
    finish(&pairs, cfg, timings, tuning, fallbacks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::GaussianToy;
    use crate::smoothers::BasisSpec;

    fn cfg(k: usize, h: usize, m: usize, l: usize, seed: u64) -> EstimatorConfig {
        EstimatorConfig {
            alpha: 0.9,
            beta: 0.9,
            k,
            h,
            m,
            l,
            seed,
        }
    }

    #[test]
    fn oracle_decoupled_equals_exact_batching() {
        let toy = GaussianToy::new(0.5, 1.0).unwrap();
        let c = cfg(20, 30, 0, 0, 9);
        let a = batching_exact_covar(&toy, &c).unwrap();
        let b = decoupled_covar(&toy, &c, &SurfaceSource::Oracle).unwrap();
        assert_eq!(a.covar_hat.to_bits(), b.covar_hat.to_bits());
        assert_eq!(a.concomitants, b.concomitants);
    }

    #[test]
    fn noise_free_linear_smoothing_matches_exact() {
        // With zero inner noise and the identity surface in the basis, the
        // fitted values reproduce the exact losses.
        let toy = GaussianToy::new(0.5, 0.0).unwrap();
        let c = cfg(10, 20, 0, 1, 4);
        let method = SurfaceMethod::Fixed(Candidate::Linear {
            basis: BasisSpec::polynomial(1),
        });
        let smoothed = naive_smoothed_covar(&toy, &c, &method).unwrap();
        let sns = naive_sns_covar(&toy, &c).unwrap();
        assert!((smoothed.covar_hat - sns.covar_hat).abs() < 1e-8);
    }

    #[test]
    fn decoupled_fit_runs_and_is_reproducible() {
        let toy = GaussianToy::new(0.5, 1.0).unwrap();
        let c = cfg(10, 10, 200, 5, 2);
        let src = SurfaceSource::Fit(SurfaceMethod::Fixed(Candidate::Linear {
            basis: BasisSpec::polynomial(1),
        }));
        let a = decoupled_covar(&toy, &c, &src).unwrap();
        let b = decoupled_covar(&toy, &c, &src).unwrap();
        assert_eq!(a.covar_hat, b.covar_hat);
        assert!(a.covar_hat.is_finite());
    }

    #[test]
    fn fitted_dimension_checked() {
        let toy = GaussianToy::new(0.5, 1.0).unwrap();
        let ts = TrainingSet::new(Matrix::from_fn(10, 3, |i, j| (i + j * j) as f64), vec![1.0; 10]).unwrap();
        let m = fit_candidate(&ts, &Candidate::Kernel { constant: 1.0 }).unwrap();
        let src = SurfaceSource::Fitted(Box::new(m.clone()), Box::new(m));
        assert!(matches!(
            decoupled_covar(&toy, &cfg(2, 2, 0, 0, 0), &src),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
