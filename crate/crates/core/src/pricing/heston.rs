//! European call under stochastic variance, priced by Fourier inversion of
//! the two characteristic functions.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::quadrature::integrate;
use crate::error::{domain, Error, Result};

const BASE_LIMIT: f64 = 200.0;
const BASE_TOL: f64 = 1e-8;
const TAIL_TOL: f64 = 1e-10;
const MAX_LIMIT: f64 = 200.0 * 1024.0;
const MAX_INTERVALS: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HestonParams {
    pub kappa: f64,
    pub theta: f64,
    pub sigma_v: f64,
    pub rho: f64,
    pub v0: f64,
    #[serde(default)]
    pub lambda_h: f64,
}

impl HestonParams {
    pub fn validate(&self) -> Result<()> {
        let p = self;
        if !(p.kappa > 0.0 && p.theta > 0.0 && p.sigma_v > 0.0 && p.v0 > 0.0) {
            return Err(domain("heston kappa, theta, sigma_v and v0 must be positive"));
        }
        if !(p.rho.abs() < 1.0) || !p.lambda_h.is_finite() {
            return Err(domain("heston rho must lie in (-1, 1) and lambda_h must be finite"));
        }
        Ok(())
    }
}

/// `ln(1 + z)` without cancellation for small `z`.
fn ln1p(z: Complex64) -> Complex64 {
    let re = 0.5 * libm::log1p(2.0 * z.re + z.norm_sqr());
    let im = z.im.atan2(1.0 + z.re);
    Complex64::new(re, im)
}

/// `f_j(φ)` for `j ∈ {1, 2}`, written with `g = (c − d)/(c + d)` so that
/// `e^{−dτ}` never grows.
fn char_fn(j: usize, phi: f64, x: f64, p: &HestonParams, r: f64, ttm: f64) -> Complex64 {
    let i = Complex64::i();
    let (u, b) = if j == 1 {
        (0.5, p.kappa + p.lambda_h - p.rho * p.sigma_v)
    } else {
        (-0.5, p.kappa + p.lambda_h)
    };
    let a = p.kappa * p.theta;
    let s2 = p.sigma_v * p.sigma_v;
    let c = Complex64::new(b, -p.rho * p.sigma_v * phi);
    let w_base = Complex64::new(-phi * phi, 2.0 * u * phi);
    let d = (c * c - s2 * w_base).sqrt();
    let cpd = c + d;
    // c − d = σ² w_base / (c + d), free of cancellation.
    let cmd = s2 * w_base / cpd;
    let g = cmd / cpd;
    let e = (-d * ttm).exp();
    let log_ratio = ln1p(-g * e) - ln1p(-g);
    let big_c = i * r * phi * ttm + (a / s2) * (cmd * ttm - 2.0 * log_ratio);
    let big_d = w_base / cpd * (1.0 - e) / (1.0 - g * e);
    (big_c + big_d * p.v0 + i * phi * x).exp()
}

/// `Re[e^{−iφ ln K} f_j(φ) / (iφ)]` at spot `s`.
pub fn heston_integrand(j: usize, phi: f64, s: f64, p: &HestonParams, k: f64, r: f64, ttm: f64) -> f64 {
    let f = char_fn(j, phi, s.ln(), p, r, ttm);
    let z = Complex64::new(0.0, -phi * k.ln()).exp() * f / Complex64::new(0.0, phi);
    z.re
}

fn probability(j: usize, s: f64, p: &HestonParams, k: f64, r: f64, ttm: f64) -> Result<f64> {
    let f = |phi: f64| heston_integrand(j, phi, s, p, k, r, ttm);
    let mut total = integrate(f, 0.0, BASE_LIMIT, BASE_TOL, MAX_INTERVALS)?;
    let mut limit = BASE_LIMIT;
    loop {
        let tail = integrate(f, limit, 2.0 * limit, TAIL_TOL, MAX_INTERVALS)?;
        total += tail;
        limit *= 2.0;
        if tail.abs() < TAIL_TOL {
            break;
        }
        if limit > MAX_LIMIT {
            return Err(Error::IntegrationFailure(format!(
                "tail of P{j} still {tail:.3e} at phi = {limit}"
            )));
        }
    }
    Ok(0.5 + total / std::f64::consts::PI)
}

/// In-the-money probabilities `(P1, P2)`.
pub fn heston_probabilities(s: f64, params: &HestonParams, k: f64, r: f64, ttm: f64) -> Result<(f64, f64)> {
    params.validate()?;
    if !(s > 0.0 && k > 0.0 && ttm > 0.0) || !r.is_finite() {
        return Err(domain(format!(
            "heston call needs s, k, ttm > 0; got s={s}, k={k}, ttm={ttm}"
        )));
    }
    let p1 = probability(1, s, params, k, r, ttm)?;
    let p2 = probability(2, s, params, k, r, ttm)?;
    Ok((p1, p2))
}

/// `s·P1 − k·e^{−r·ttm}·P2`.
pub fn heston_call_price(s: f64, params: &HestonParams, k: f64, r: f64, ttm: f64) -> Result<f64> {
    let (p1, p2) = heston_probabilities(s, params, k, r, ttm)?;
    Ok(s * p1 - k * (-r * ttm).exp() * p2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pricing::bs_call_price;

    fn flat() -> HestonParams {
        HestonParams {
            kappa: 50.0,
            theta: 0.04,
            sigma_v: 1e-4,
            rho: 0.0,
            v0: 0.04,
            lambda_h: 0.0,
        }
    }

    fn typical() -> HestonParams {
        HestonParams {
            kappa: 2.0,
            theta: 0.04,
            sigma_v: 0.5,
            rho: -0.7,
            v0: 0.05,
            lambda_h: 0.0,
        }
    }

    #[test]
    fn constant_variance_limit() {
        for k in [80.0, 100.0, 105.0, 130.0] {
            let h = heston_call_price(100.0, &flat(), k, 0.05, 1.0).unwrap();
            let bs = bs_call_price(100.0, k, 0.05, 0.2, 1.0).unwrap();
            assert!((h / bs - 1.0).abs() < 1e-3, "k={k}: {h} vs {bs}");
        }
    }

    #[test]
    fn deep_in_the_money() {
        let h = heston_call_price(300.0, &typical(), 100.0, 0.05, 0.1).unwrap();
        let fwd = 300.0 - 100.0 * (-0.05f64 * 0.1).exp();
        assert!((h / fwd - 1.0).abs() < 1e-3);
    }

    #[test]
    fn probabilities_in_unit_interval() {
        for p in [flat(), typical()] {
            for (s, k, t) in [(100.0, 100.0, 1.0), (80.0, 120.0, 0.5), (150.0, 90.0, 2.0)] {
                let (p1, p2) = heston_probabilities(s, &p, k, 0.03, t).unwrap();
                assert!((0.0..=1.0).contains(&p1) && (0.0..=1.0).contains(&p2));
            }
        }
    }

    #[test]
    fn integrand_decays_by_truncation() {
        let p = typical();
        let peak = (1..2000)
            .map(|i| heston_integrand(2, i as f64 * 0.01, 100.0, &p, 105.0, 0.05, 1.0).abs())
            .fold(0.0, f64::max);
        let end = heston_integrand(2, BASE_LIMIT, 100.0, &p, 105.0, 0.05, 1.0).abs();
        assert!(end < 1e-10 * peak);
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = typical();
        p.rho = 1.0;
        assert!(heston_call_price(100.0, &p, 100.0, 0.05, 1.0).is_err());
        assert!(heston_call_price(100.0, &typical(), 100.0, 0.05, 0.0).is_err());
    }
}
