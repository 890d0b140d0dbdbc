//! Stock / geometric Asian / up-and-out barrier portfolios and their losses.

use serde::{Deserialize, Serialize};

use super::{barrier_uoc_price, geometric_asian_call_conditional, geometric_asian_call_initial};
use crate::error::{domain, Error, Result};
use crate::market::{MarketModel, PathBundle, RiskFactorVector};

/// Weighted leg values of a portfolio.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LegPrices {
    pub stock: f64,
    pub asian: f64,
    pub barrier: f64,
}

impl LegPrices {
    pub fn total(&self) -> f64 {
        self.stock + self.asian + self.barrier
    }
}

/// A portfolio of `w1` shares, `w2` geometric Asian calls and `w3` barrier
/// calls on each asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioSpec {
    pub w: [f64; 3],
    pub k_asian: Vec<f64>,
    pub k_barrier: Vec<f64>,
    pub barrier: Vec<f64>,
    /// Initial value, priced in closed form at t = 0.
    pub v0: f64,
    pub v0_legs: LegPrices,
}

/// Value of a portfolio at `τ` in closed form, split by leg.
pub type PortfolioValues = LegPrices;

impl PortfolioSpec {
    /// Validates the contract data against `model` and prices `V_0`.
    pub fn new(
        w: [f64; 3],
        k_asian: Vec<f64>,
        k_barrier: Vec<f64>,
        barrier: Vec<f64>,
        model: &MarketModel,
    ) -> Result<Self> {
        let q = model.q();
        for v in [&k_asian, &k_barrier, &barrier] {
            if v.len() != q {
                return Err(Error::DimensionMismatch { expected: q, got: v.len() });
            }
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(domain("portfolio weights must be finite"));
        }
        if k_asian.iter().chain(&k_barrier).chain(&barrier).any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(domain("strikes and barriers must be strictly positive"));
        }
        for i in 0..q {
            if !(barrier[i] > model.s0()[i]) {
                return Err(domain(format!(
                    "barrier {} of asset {i} must exceed its initial price {}",
                    barrier[i],
                    model.s0()[i]
                )));
            }
        }
        let mut spec = PortfolioSpec {
            w,
            k_asian,
            k_barrier,
            barrier,
            v0: 0.0,
            v0_legs: LegPrices::default(),
        };
        let mut legs = LegPrices::default();
        for i in 0..q {
            legs.stock += w[0] * model.s0()[i];
            if w[1] != 0.0 {
                legs.asian += w[1] * geometric_asian_call_initial(model, i, spec.k_asian[i])?;
            }
            if w[2] != 0.0 {
                legs.barrier += w[2]
                    * barrier_uoc_price(
                        model.s0()[i],
                        spec.k_barrier[i],
                        spec.barrier[i],
                        model.r_f(),
                        model.vol(i),
                        model.maturity(),
                    )?;
            }
        }
        spec.v0_legs = legs;
        spec.v0 = legs.total();
        Ok(spec)
    }

    /// Same strike and barrier for every asset.
    pub fn uniform(w: [f64; 3], k_asian: f64, k_barrier: f64, barrier: f64, model: &MarketModel) -> Result<Self> {
        let q = model.q();
        PortfolioSpec::new(w, vec![k_asian; q], vec![k_barrier; q], vec![barrier; q], model)
    }

    /// Closed-form `V_τ(z)` by leg.
    pub fn value_at_tau(&self, model: &MarketModel, z: &RiskFactorVector) -> Result<PortfolioValues> {
        let q = model.q();
        if z.q() != q {
            return Err(Error::DimensionMismatch { expected: q, got: z.q() });
        }
        let ttm = model.maturity() - model.tau();
        let mut legs = LegPrices::default();
        for i in 0..q {
            legs.stock += self.w[0] * z.s_tau[i];
            if self.w[1] != 0.0 {
                legs.asian += self.w[1]
                    * geometric_asian_call_conditional(model, i, z.s_tau[i], z.geo_partial[i], self.k_asian[i])?;
            }
            if self.w[2] != 0.0 && z.run_max[i] <= self.barrier[i] && z.s_tau[i] < self.barrier[i] {
                legs.barrier += self.w[2]
                    * barrier_uoc_price(
                        z.s_tau[i],
                        self.k_barrier[i],
                        self.barrier[i],
                        model.r_f(),
                        model.vol(i),
                        ttm,
                    )?;
            }
        }
        Ok(legs)
    }

    /// Pathwise discounted `V̂_τ` on one inner continuation, by leg.
    pub fn pathwise_value(&self, model: &MarketModel, z: &RiskFactorVector, bundle: &PathBundle) -> Result<PortfolioValues> {
        if bundle.lineage.anchor != z.fingerprint() {
            return Err(Error::MismatchedScenario);
        }
        let q = model.q();
        let m = model.steps() as f64;
        let mt = model.tau_index() as f64;
        let disc = (-model.r_f() * (model.maturity() - model.tau())).exp();
        let mut legs = LegPrices::default();
        for i in 0..q {
            legs.stock += self.w[0] * z.s_tau[i];
            if self.w[1] != 0.0 {
                let tail: f64 = bundle.asset_path(i).iter().map(|s| s.ln()).sum();
                let g = ((mt * z.geo_partial[i].ln() + tail) / m).exp();
                legs.asian += self.w[1] * disc * (g - self.k_asian[i]).max(0.0);
            }
            if self.w[2] != 0.0 && bundle.bridge_max[i] <= self.barrier[i] {
                legs.barrier += self.w[2] * disc * (bundle.terminal(i) - self.k_barrier[i]).max(0.0);
            }
        }
        Ok(legs)
    }
}

/// `V_0 − V̂_τ` for each inner continuation of `z`.
pub fn discounted_losses(
    portfolio: &PortfolioSpec,
    model: &MarketModel,
    z: &RiskFactorVector,
    bundles: &[PathBundle],
) -> Result<Vec<f64>> {
    bundles
        .iter()
        .map(|b| Ok(portfolio.v0 - portfolio.pathwise_value(model, z, b)?.total()))
        .collect()
}

/// Exact conditional loss `V_0 − V_τ(z)`.
pub fn closed_form_loss(portfolio: &PortfolioSpec, model: &MarketModel, z: &RiskFactorVector) -> Result<f64> {
    Ok(portfolio.v0 - portfolio.value_at_tau(model, z)?.total())
}
