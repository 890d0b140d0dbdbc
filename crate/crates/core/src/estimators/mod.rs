//! Batching, nested and decoupled CoVaR estimators.

mod nested;
mod problem;

pub use nested::{
    batching_exact_covar, decoupled_covar, fit_surfaces, naive_smoothed_covar, naive_sns_covar, two_level_sample,
    FittedSurfaces, SurfaceMethod, SurfaceSource,
};
pub use problem::{norm_inv, GaussianToy, LossModel, PortfolioProblem, Problem};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smoothers::TuneOutcome;

/// 1-based rank `⌈p·n⌉`, clamped to `[1, n]`. A relative slack of 1e-12
/// keeps products such as `0.95·100` on the integer they denote.
pub fn order_index(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let r = (x - 1e-12 * x.abs().max(1.0)).ceil();
    (r.max(1.0) as usize).min(n)
}

fn check_level(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("level must lie in (0, 1), got {p}")))
    }
}

/// The `⌈p·N⌉`-th smallest value.
pub fn empirical_quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_level(p)?;
    let r = order_index(p, values.len());
    let mut v = values.to_vec();
    let (_, x, _) = v.select_nth_unstable_by(r - 1, f64::total_cmp);
    Ok(*x)
}

/// Output of [`batching_covar`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchingResult {
    pub covar: f64,
    /// `π` value paired with each batch's `⌈αh⌉`-th smallest `μ`.
    pub concomitants: Vec<f64>,
    /// Each batch's `⌈αh⌉`-th smallest `μ`.
    pub batch_var: Vec<f64>,
}

/// Batching estimator over consecutive blocks of `h` pairs `(μ, π)`.
///
/// Within a batch, equal `μ` values are ordered by position.
pub fn batching_covar(pairs: &[(f64, f64)], k: usize, h: usize, alpha: f64, beta: f64) -> Result<BatchingResult> {
    check_level(alpha)?;
    check_level(beta)?;
    if k == 0 || h == 0 || pairs.len() != k * h {
        return Err(Error::ShapeMismatch(format!(
            "{} pairs cannot form {k} batches of {h}",
            pairs.len()
        )));
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::Domain("loss pairs must be finite".into()));
    }
    let ra = order_index(alpha, h) - 1;
    let mut concomitants = Vec::with_capacity(k);
    let mut batch_var = Vec::with_capacity(k);
    let mut idx: Vec<usize> = Vec::with_capacity(h);
    for batch in pairs.chunks_exact(h) {
        idx.clear();
        idx.extend(0..h);
        let (_, &mut sel, _) =
            idx.select_nth_unstable_by(ra, |&a, &b| batch[a].0.total_cmp(&batch[b].0).then(a.cmp(&b)));
        concomitants.push(batch[sel].1);
        batch_var.push(batch[sel].0);
    }
    let covar = empirical_quantile(&concomitants, beta)?;
    Ok(BatchingResult {
        covar,
        concomitants,
        batch_var,
    })
}

/// Median of the per-batch VaR estimates (lower median for even counts).
pub fn median_var(batch_var: &[f64]) -> Result<f64> {
    if batch_var.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = batch_var.to_vec();
    let r = (v.len() - 1) / 2;
    let (_, x, _) = v.select_nth_unstable_by(r, f64::total_cmp);
    Ok(*x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BudgetStrategy {
    /// Nested simulation with the rate-optimal split of `Γ`.
    SnsOpt,
    /// Coupled smoothing: `n = Γ/l` scenarios with fixed `l`.
    SmoothFixedL,
    /// Two-stage: `m = Γ/l` Stage-1 scenarios, separate Stage-2 size.
    Decoupled,
}

impl std::str::FromStr for BudgetStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SNS_OPT" => Ok(BudgetStrategy::SnsOpt),
            "SMOOTH_FIXED_L" => Ok(BudgetStrategy::SmoothFixedL),
            "DECOUPLED" => Ok(BudgetStrategy::Decoupled),
            other => Err(Error::Config(format!("unknown budget strategy '{other}'"))),
        }
    }
}

/// Constants of the allocation rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConstants {
    /// Target `√k / h` of the batching shape.
    #[serde(default = "one")]
    pub c: f64,
    #[serde(default = "one")]
    pub c1: f64,
    #[serde(default = "one")]
    pub c2: f64,
    /// Inner sample size for the fixed-`l` strategies.
    #[serde(default)]
    pub l: Option<usize>,
    /// Stage-2 scenario count for the decoupled strategy.
    #[serde(default)]
    pub n: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl Default for BudgetConstants {
    fn default() -> Self {
        BudgetConstants {
            c: 1.0,
            c1: 1.0,
            c2: 1.0,
            l: None,
            n: None,
        }
    }
}

/// A resolved integer allocation of an inner-sample budget `Γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub gamma: u64,
    pub strategy: BudgetStrategy,
    pub constants: BudgetConstants,
    pub k: usize,
    pub h: usize,
    pub l: usize,
    /// Outer scenarios carrying inner samples.
    pub m: usize,
    /// Scenarios entering the batching step.
    pub n: usize,
    /// `log_Γ` of `l`, `h` and `k`.
    pub exponents: [f64; 3],
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// `h = round((n/c²)^{1/3})`, `k = ⌊n/h⌋`.
pub fn batch_shape(n: usize, c: f64) -> Result<(usize, usize)> {
    if n == 0 || !(c > 0.0) {
        return Err(Error::InfeasibleBudget(format!("cannot shape n = {n} with c = {c}")));
    }
    let h = round_half_up((n as f64 / (c * c)).cbrt()).clamp(1, n);
    Ok((n / h, h))
}

/// Integer allocation of `Γ` under `strategy`.
///
/// `SNS_OPT` rounds `l = c1·Γ^{1/4}`, `h = c2·Γ^{1/4}` and
/// `k = Γ^{1/2}/(c1·c2)` half up, then decrements `l` (and, at `l = 1`,
/// `k`) until `k·h·l ≤ Γ`.
pub fn allocate_budget(gamma: u64, strategy: BudgetStrategy, constants: &BudgetConstants) -> Result<BudgetAllocation> {
    if gamma < 64 {
        return Err(Error::InfeasibleBudget(format!("budget {gamma} is below the minimum of 64")));
    }
    let c = constants;
    if !(c.c > 0.0 && c.c1 > 0.0 && c.c2 > 0.0) {
        return Err(Error::InfeasibleBudget("allocation constants must be positive".into()));
    }
    let g = gamma as f64;
    let fixed_l = || -> Result<usize> {
        match c.l {
            Some(l) if l >= 1 && (l as u64) <= gamma => Ok(l),
            Some(l) => Err(Error::InfeasibleBudget(format!("inner size l = {l} does not fit budget {gamma}"))),
            None => Err(Error::InfeasibleBudget(format!("{strategy:?} needs a fixed inner size l"))),
        }
    };
    let (k, h, l, m, n) = match strategy {
        BudgetStrategy::SnsOpt => {
            let mut l = round_half_up(c.c1 * g.powf(0.25)).max(1);
            let h = round_half_up(c.c2 * g.powf(0.25)).max(1);
            let mut k = round_half_up(g.sqrt() / (c.c1 * c.c2)).max(1);
            while (k * h * l) as u64 > gamma && l > 1 {
                l -= 1;
            }
            while (k * h * l) as u64 > gamma && k > 1 {
                k -= 1;
            }
            if (k * h * l) as u64 > gamma {
                return Err(Error::InfeasibleBudget(format!("no SNS allocation fits budget {gamma}")));
            }
            (k, h, l, k * h, k * h)
        }
        BudgetStrategy::SmoothFixedL => {
            let l = fixed_l()?;
            let (k, h) = batch_shape((gamma / l as u64) as usize, c.c)?;
            (k, h, l, k * h, k * h)
        }
        BudgetStrategy::Decoupled => {
            let l = fixed_l()?;
            let m = (gamma / l as u64) as usize;
            let n = c
                .n
                .ok_or_else(|| Error::InfeasibleBudget("DECOUPLED needs a Stage-2 size n".into()))?;
            let (k, h) = batch_shape(n, c.c)?;
            (k, h, l, m, k * h)
        }
    };
    let lg = g.ln();
    Ok(BudgetAllocation {
        gamma,
        strategy,
        constants: *constants,
        k,
        h,
        l,
        m,
        n,
        exponents: [(l as f64).ln() / lg, (h as f64).ln() / lg, (k as f64).ln() / lg],
    })
}

/// Levels, sizes and seed of one estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub h: usize,
    /// Stage-1 outer scenarios (decoupled only).
    #[serde(default)]
    pub m: usize,
    /// Inner samples per scenario.
    #[serde(default)]
    pub l: usize,
    pub seed: u64,
}

impl EstimatorConfig {
    pub fn n(&self) -> usize {
        self.k * self.h
    }

    pub fn from_allocation(a: &BudgetAllocation, alpha: f64, beta: f64, seed: u64) -> Self {
        EstimatorConfig {
            alpha,
            beta,
            k: a.k,
            h: a.h,
            m: a.m,
            l: a.l,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_level(self.alpha)?;
        check_level(self.beta)?;
        if self.k == 0 || self.h == 0 {
            return Err(Error::Domain("batch count and size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub sim1: f64,
    pub tune: f64,
    pub fit: f64,
    pub sim2: f64,
    pub estimate: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.sim1 + self.tune + self.fit + self.sim2 + self.estimate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub covar_hat: f64,
    /// Median over batches of the per-batch VaR of the first loss.
    pub var_hat: f64,
    pub config: EstimatorConfig,
    pub timings: PhaseTimings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concomitants: Option<Vec<f64>>,
    /// Tuning outcomes of the two surfaces, when tuning ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<[TuneOutcome; 2]>,
    /// Kernel-smoother evaluations that fell back to the nearest sample.
    #[serde(default)]
    pub empty_neighborhoods: usize,
}
