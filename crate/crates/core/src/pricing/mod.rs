//! Closed-form prices used as ground truth and as building blocks of the
//! exact loss surfaces.

mod heston;
mod portfolio;
pub(crate) mod quadrature;

pub use heston::{heston_call_price, heston_integrand, heston_probabilities, HestonParams};
pub use portfolio::{closed_form_loss, discounted_losses, LegPrices, PortfolioSpec, PortfolioValues};

use crate::error::{domain, Error, Result};
use crate::market::MarketModel;

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// `N(a) − N(b)`, evaluated on the tail side that avoids cancellation.
fn norm_diff(a: f64, b: f64) -> f64 {
    if a > 0.0 && b > 0.0 {
        norm_cdf(-b) - norm_cdf(-a)
    } else {
        norm_cdf(a) - norm_cdf(b)
    }
}

/// Black–Scholes price of a European call.
pub fn bs_call_price(s: f64, k: f64, r: f64, sigma: f64, ttm: f64) -> Result<f64> {
    if !(s > 0.0 && k > 0.0 && sigma > 0.0 && ttm >= 0.0) || !r.is_finite() {
        return Err(domain(format!(
            "call needs s, k, sigma > 0 and ttm >= 0; got s={s}, k={k}, sigma={sigma}, ttm={ttm}"
        )));
    }
    if ttm == 0.0 {
        return Ok((s - k).max(0.0));
    }
    let sd = sigma * ttm.sqrt();
    let d1 = ((s / k).ln() + (r + 0.5 * sigma * sigma) * ttm) / sd;
    let d2 = d1 - sd;
    Ok(s * norm_cdf(d1) - k * (-r * ttm).exp() * norm_cdf(d2))
}

/// Up-and-out barrier call under GBM with continuous monitoring.
///
/// Returns [`Error::KnockedOut`] when `s >= b`; the option is then worth 0
/// (see [`barrier_uoc_value`]).
pub fn barrier_uoc_price(s: f64, k: f64, b: f64, r: f64, sigma: f64, ttm: f64) -> Result<f64> {
    if !(s > 0.0 && k > 0.0 && b > 0.0 && sigma > 0.0 && ttm >= 0.0) || !r.is_finite() {
        return Err(domain(format!(
            "barrier call needs s, k, b, sigma > 0 and ttm >= 0; got s={s}, k={k}, b={b}, sigma={sigma}, ttm={ttm}"
        )));
    }
    if s >= b {
        return Err(Error::KnockedOut { spot: s, barrier: b });
    }
    if k >= b {
        return Ok(0.0);
    }
    if ttm == 0.0 {
        return Ok((s - k).max(0.0));
    }
    let sd = sigma * ttm.sqrt();
    let half_var = 0.5 * sigma * sigma;
    let dp = |x: f64| (x.ln() + (r + half_var) * ttm) / sd;
    let dm = |x: f64| (x.ln() + (r - half_var) * ttm) / sd;
    let disc = (-r * ttm).exp();
    let p = -2.0 * r / (sigma * sigma);
    let ratio = s / b;
    let reflect = b * b / (k * s);

    let t1 = s * norm_diff(dp(s / k), dp(s / b));
    let t2 = disc * k * norm_diff(dm(s / k), dm(s / b));
    let t3 = b * ratio.powf(p) * norm_diff(dp(reflect), dp(b / s));
    let t4 = disc * k * ratio.powf(p + 1.0) * norm_diff(dm(reflect), dm(b / s));
    Ok((t1 - t2 - t3 + t4).max(0.0))
}

/// [`barrier_uoc_price`] with a knocked-out option valued at 0.
pub fn barrier_uoc_value(s: f64, k: f64, b: f64, r: f64, sigma: f64, ttm: f64) -> Result<f64> {
    match barrier_uoc_price(s, k, b, r, sigma, ttm) {
        Err(Error::KnockedOut { .. }) => Ok(0.0),
        other => other,
    }
}

/// Fixings of a discretely monitored geometric average, split into the part
/// already observed and the dates still to come.
#[derive(Debug, Clone, PartialEq)]
pub struct AsianFixings {
    /// Sum of the logs of the observed fixings.
    pub known_log_sum: f64,
    pub known_count: usize,
    /// Future fixing times, strictly increasing and after `now`.
    pub future_times: Vec<f64>,
}

/// Time-`now` price of a geometric Asian call whose average runs over
/// `known_count + future_times.len()` fixings, paid at `maturity`.
///
/// Under GBM the log of the average is Gaussian: with `u_l = t_l − now`,
/// mean `(Σ log known + n_f ln s + (r − σ²/2) Σ u_l) / M` and variance
/// `σ² Σ_{a,b} min(u_a, u_b) / M²`, so the payoff is one lognormal call.
#[allow(clippy::too_many_arguments)]
pub fn geometric_asian_call(
    spot: f64,
    fixings: &AsianFixings,
    now: f64,
    maturity: f64,
    r: f64,
    sigma: f64,
    k: f64,
) -> Result<f64> {
    if !(spot > 0.0 && k > 0.0 && sigma >= 0.0 && maturity >= now) {
        return Err(domain(format!(
            "asian call needs spot, strike > 0 and sigma >= 0; got spot={spot}, k={k}, sigma={sigma}"
        )));
    }
    let total = fixings.known_count + fixings.future_times.len();
    if total == 0 {
        return Err(domain("asian average needs at least one fixing"));
    }
    let mf = total as f64;
    let n_f = fixings.future_times.len();
    let mut drift_sum = 0.0;
    let mut min_sum = 0.0;
    let mut prev = now;
    for (a, &t) in fixings.future_times.iter().enumerate() {
        if !(t > prev) {
            return Err(domain("future fixing times must be increasing and after now"));
        }
        prev = t;
        let u = t - now;
        drift_sum += u;
        // Σ_{a,b} min(u_a, u_b) over sorted u: u_a counted 2(n − a) − 1 times.
        min_sum += u * (2 * (n_f - a) - 1) as f64;
    }
    let mean = (fixings.known_log_sum + n_f as f64 * spot.ln() + (r - 0.5 * sigma * sigma) * drift_sum) / mf;
    let var = sigma * sigma * min_sum / (mf * mf);
    let disc = (-r * (maturity - now)).exp();
    if var <= 0.0 {
        return Ok(disc * (mean.exp() - k).max(0.0));
    }
    let sd = var.sqrt();
    let d1 = (mean - k.ln() + var) / sd;
    let d2 = d1 - sd;
    Ok(disc * ((mean + 0.5 * var).exp() * norm_cdf(d1) - k * norm_cdf(d2)))
}

/// Time-`τ` price of asset `asset`'s geometric Asian call given the first
/// `M_τ` fixings (through `geo_partial`) and the spot `s_tau`.
pub fn geometric_asian_call_conditional(
    model: &MarketModel,
    asset: usize,
    s_tau: f64,
    geo_partial: f64,
    k: f64,
) -> Result<f64> {
    if !(s_tau > 0.0 && geo_partial > 0.0) {
        return Err(domain("asian conditioning values must be positive"));
    }
    let mt = model.tau_index();
    let fixings = AsianFixings {
        known_log_sum: mt as f64 * geo_partial.ln(),
        known_count: mt,
        future_times: model.grid()[mt..].to_vec(),
    };
    geometric_asian_call(
        s_tau,
        &fixings,
        model.tau(),
        model.maturity(),
        model.r_f(),
        model.vol(asset),
        k,
    )
}

/// Time-0 price of asset `asset`'s geometric Asian call over the full grid.
pub fn geometric_asian_call_initial(model: &MarketModel, asset: usize, k: f64) -> Result<f64> {
    let fixings = AsianFixings {
        known_log_sum: 0.0,
        known_count: 0,
        future_times: model.grid().to_vec(),
    };
    geometric_asian_call(
        model.s0()[asset],
        &fixings,
        0.0,
        model.maturity(),
        model.r_f(),
        model.vol(asset),
        k,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    #[test]
    fn cdf_reference_values() {
        assert_eq!(norm_cdf(0.0), 0.5);
        assert!((norm_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-15);
        assert!((norm_cdf(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-15);
    }

    #[test]
    fn bs_limits() {
        assert!((bs_call_price(100.0, 1e-12, 0.05, 0.2, 1.0).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(bs_call_price(110.0, 100.0, 0.05, 0.2, 0.0).unwrap(), 10.0);
        assert!(bs_call_price(-1.0, 100.0, 0.05, 0.2, 1.0).is_err());
        assert!(bs_call_price(100.0, 100.0, 0.05, 0.0, 1.0).is_err());
    }

    #[test]
    fn bs_monotone_in_spot_and_vol() {
        let mut prev = 0.0;
        for s in [80.0, 90.0, 100.0, 110.0, 120.0] {
            let p = bs_call_price(s, 100.0, 0.05, 0.2, 1.0).unwrap();
            assert!(p > prev);
            prev = p;
        }
        let mut prev = 0.0;
        for v in [0.05, 0.1, 0.2, 0.4] {
            let p = bs_call_price(100.0, 100.0, 0.05, v, 1.0).unwrap();
            assert!(p > prev);
            prev = p;
        }
    }

    #[test]
    fn barrier_knockout_and_far_barrier() {
        assert!(matches!(
            barrier_uoc_price(130.0, 105.0, 120.0, 0.05, 0.2, 1.0),
            Err(Error::KnockedOut { .. })
        ));
        assert_eq!(barrier_uoc_value(120.0, 105.0, 120.0, 0.05, 0.2, 1.0).unwrap(), 0.0);
        let far = barrier_uoc_price(100.0, 105.0, 1e8, 0.05, 0.2, 1.0).unwrap();
        let bs = bs_call_price(100.0, 105.0, 0.05, 0.2, 1.0).unwrap();
        assert!((far - bs).abs() < 1e-6);
    }

    #[test]
    fn barrier_vanishes_near_barrier() {
        let mut prev = f64::INFINITY;
        for s in [119.0, 119.9, 119.99, 119.9999] {
            let p = barrier_uoc_price(s, 105.0, 120.0, 0.05, 0.2, 1.0).unwrap();
            assert!(p <= prev);
            prev = p;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn barrier_below_vanilla() {
        let b = barrier_uoc_price(100.0, 105.0, 120.0, 0.05, 0.2, 1.0).unwrap();
        let v = bs_call_price(100.0, 105.0, 0.05, 0.2, 1.0).unwrap();
        assert!(b > 0.0 && b < v);
    }

    #[test]
    fn asian_all_fixings_known() {
        let f = AsianFixings {
            known_log_sum: 50.0 * 110.0f64.ln(),
            known_count: 50,
            future_times: vec![],
        };
        let p = geometric_asian_call(100.0, &f, 0.8, 1.0, 0.05, 0.2, 105.0).unwrap();
        let expected = (-0.05f64 * 0.2).exp() * (110.0 - 105.0);
        assert!((p - expected).abs() < 1e-10);
    }

    #[test]
    fn asian_deterministic_limit() {
        let model = MarketModel::new(
            vec![100.0],
            vec![0.1],
            0.05,
            Matrix::from_rows(&[vec![1e-20]]).unwrap(),
            MarketModel::uniform_grid(1.0, 50),
            2,
        )
        .unwrap();
        let p = geometric_asian_call_conditional(&model, 0, 100.0, 100.0, 95.0).unwrap();
        // Deterministic forward fixings: ln S(t_l) = ln 100 + r (t_l − τ).
        let tau = model.tau();
        let log_mean = (2.0 * 100f64.ln()
            + model.grid()[2..].iter().map(|t| 100f64.ln() + 0.05 * (t - tau)).sum::<f64>())
            / 50.0;
        let expected = (-0.05 * (1.0 - tau)).exp() * (log_mean.exp() - 95.0);
        assert!((p - expected).abs() < 1e-8);
    }
}
