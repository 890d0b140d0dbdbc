//! Two-level loss models the estimators run on.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::market::{simulate_inner, simulate_outer_at, MarketModel, RiskFactorVector};
use crate::pricing::{closed_form_loss, discounted_losses, PortfolioSpec};
use crate::rng::RngSeed;

/// A pair of conditional losses `μ(Z) = E[X | Z]`, `π(Z) = E[Y | Z]`
/// observable only through inner simulation.
pub trait LossModel: Sync {
    /// Length of a scenario feature vector.
    fn dim(&self) -> usize;

    /// Outer scenario `index` of the stream `seed`, as features.
    fn outer(&self, seed: RngSeed, index: u64) -> Vec<f64>;

    /// `(X̄, Ȳ)` averaged over `l` inner draws given scenario `z`. Draws
    /// come from stream `scenario_id` of `seed`.
    fn inner_means(&self, z: &[f64], l: usize, seed: RngSeed, scenario_id: u64) -> Result<(f64, f64)>;

    /// Exact `(μ(z), π(z))`.
    fn exact(&self, z: &[f64]) -> Result<(f64, f64)>;
}

/// Two portfolios on one simulated market.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioProblem {
    pub model: MarketModel,
    /// Portfolio whose loss is conditioned on (`μ`).
    pub first: PortfolioSpec,
    /// Portfolio whose conditional quantile is sought (`π`).
    pub second: PortfolioSpec,
}

impl LossModel for PortfolioProblem {
    fn dim(&self) -> usize {
        3 * self.model.q()
    }

    fn outer(&self, seed: RngSeed, index: u64) -> Vec<f64> {
        simulate_outer_at(&self.model, seed, index).to_features()
    }

    fn inner_means(&self, z: &[f64], l: usize, seed: RngSeed, scenario_id: u64) -> Result<(f64, f64)> {
        let z = RiskFactorVector::from_features(z)?;
        let paths = simulate_inner(&self.model, &z, l, seed, scenario_id)?;
        let x = discounted_losses(&self.first, &self.model, &z, &paths)?;
        let y = discounted_losses(&self.second, &self.model, &z, &paths)?;
        Ok((mean(&x), mean(&y)))
    }

    fn exact(&self, z: &[f64]) -> Result<(f64, f64)> {
        let z = RiskFactorVector::from_features(z)?;
        Ok((
            closed_form_loss(&self.first, &self.model, &z)?,
            closed_form_loss(&self.second, &self.model, &z)?,
        ))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard bivariate normal scenario with `μ(z) = z₁`, `π(z) = z₂` and
/// independent Gaussian inner noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianToy {
    pub rho: f64,
    #[serde(default = "one")]
    pub noise_sd: f64,
}

fn one() -> f64 {
    1.0
}

impl GaussianToy {
    pub fn new(rho: f64, noise_sd: f64) -> Result<Self> {
        if !(rho.abs() < 1.0) || !(noise_sd >= 0.0) {
            return Err(domain("toy needs |rho| < 1 and noise_sd >= 0"));
        }
        Ok(GaussianToy { rho, noise_sd })
    }

    /// `ρ·Φ⁻¹(α) + √(1−ρ²)·Φ⁻¹(β)`.
    pub fn analytic_covar(&self, alpha: f64, beta: f64) -> f64 {
        self.rho * norm_inv(alpha) + (1.0 - self.rho * self.rho).sqrt() * norm_inv(beta)
    }
}

impl LossModel for GaussianToy {
    fn dim(&self) -> usize {
        2
    }

    fn outer(&self, seed: RngSeed, index: u64) -> Vec<f64> {
        let mut rng = seed.stream(index, 0);
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        vec![a, self.rho * a + (1.0 - self.rho * self.rho).sqrt() * b]
    }

    fn inner_means(&self, z: &[f64], l: usize, seed: RngSeed, scenario_id: u64) -> Result<(f64, f64)> {
        if l == 0 {
            return Err(domain("inner sample size must be at least 1"));
        }
        let (mut sx, mut sy) = (0.0, 0.0);
        for j in 0..l as u64 {
            let mut rng = seed.stream(scenario_id, j + 1);
            let ex: f64 = rng.sample(StandardNormal);
            let ey: f64 = rng.sample(StandardNormal);
            sx += ex;
            sy += ey;
        }
        let lf = l as f64;
        Ok((z[0] + self.noise_sd * sx / lf, z[1] + self.noise_sd * sy / lf))
    }

    fn exact(&self, z: &[f64]) -> Result<(f64, f64)> {
        Ok((z[0], z[1]))
    }
}

/// Either problem, chosen at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Toy(GaussianToy),
    Portfolio(Box<PortfolioProblem>),
}

impl LossModel for Problem {
    fn dim(&self) -> usize {
        match self {
            Problem::Toy(t) => t.dim(),
            Problem::Portfolio(p) => p.dim(),
        }
    }

    fn outer(&self, seed: RngSeed, index: u64) -> Vec<f64> {
        match self {
            Problem::Toy(t) => t.outer(seed, index),
            Problem::Portfolio(p) => p.outer(seed, index),
        }
    }

    fn inner_means(&self, z: &[f64], l: usize, seed: RngSeed, scenario_id: u64) -> Result<(f64, f64)> {
        match self {
            Problem::Toy(t) => t.inner_means(z, l, seed, scenario_id),
            Problem::Portfolio(p) => p.inner_means(z, l, seed, scenario_id),
        }
    }

    fn exact(&self, z: &[f64]) -> Result<(f64, f64)> {
        match self {
            Problem::Toy(t) => t.exact(z),
            Problem::Portfolio(p) => p.exact(z),
        }
    }
}

/// Standard normal quantile.
pub fn norm_inv(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_quantiles() {
        assert!((norm_inv(0.95) - 1.644_853_626_951_472_2).abs() < 1e-12);
        assert!((norm_inv(0.5)).abs() < 1e-15);
        assert!((norm_inv(0.001) + 3.090_232_306_167_813_5).abs() < 1e-10);
    }

    #[test]
    fn toy_covar_value() {
        let t = GaussianToy::new(0.5, 1.0).unwrap();
        assert!((t.analytic_covar(0.95, 0.95) - 2.2469).abs() < 1e-4);
    }

    #[test]
    fn toy_inner_noise_shrinks() {
        let t = GaussianToy::new(0.5, 1.0).unwrap();
        let z = [0.3, -0.2];
        let (x, _) = t.inner_means(&z, 10_000, RngSeed(1), 0).unwrap();
        assert!((x - 0.3).abs() < 0.05);
    }
}
