//! Correlated multi-asset GBM world.
//!
//! Outer scenarios run under the real-world drift on `[0, τ]`; inner
//! continuations run under the risk-free drift on `[τ, T]`. Each monitoring
//! interval is stepped with the exact lognormal transition, and the running
//! maximum of every asset is refined with a sampled Brownian-bridge maximum
//! so that barrier payoffs see the continuous path.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{cholesky_factor, Matrix};
use crate::rng::{open_unit, RngSeed};

/// Immutable description of the q-asset market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    s0: Vec<f64>,
    drift_real: Vec<f64>,
    r_f: f64,
    cov: Matrix,
    chol: Matrix,
    vols: Vec<f64>,
    grid: Vec<f64>,
    tau_index: usize,
}

impl MarketModel {
    /// Builds and validates a model. `grid` holds `t_1 < … < t_M`; the risk
    /// horizon is `τ = grid[tau_index - 1]`.
    pub fn new(
        s0: Vec<f64>,
        drift_real: Vec<f64>,
        r_f: f64,
        cov: Matrix,
        grid: Vec<f64>,
        tau_index: usize,
    ) -> Result<Self> {
        let q = s0.len();
        if q == 0 {
            return Err(domain("market needs at least one asset"));
        }
        if drift_real.len() != q || cov.rows() != q || cov.cols() != q {
            return Err(Error::DimensionMismatch {
                expected: q,
                got: if drift_real.len() != q { drift_real.len() } else { cov.rows() },
            });
        }
        if s0.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(domain("initial prices must be strictly positive"));
        }
        if !r_f.is_finite() || drift_real.iter().any(|m| !m.is_finite()) {
            return Err(domain("drifts must be finite"));
        }
        if grid.is_empty() || !(grid[0] > 0.0) || grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(domain("monitoring grid must be positive and strictly increasing"));
        }
        if tau_index < 1 || tau_index >= grid.len() {
            return Err(domain(format!(
                "tau_index must satisfy 1 <= tau_index < M = {}, got {tau_index}",
                grid.len()
            )));
        }
        for i in 0..q {
            if !(cov[(i, i)] > 0.0) {
                return Err(domain(format!("variance of asset {i} must be positive")));
            }
        }
        let chol = cholesky_factor(&cov)?;
        let vols = (0..q).map(|i| cov[(i, i)].sqrt()).collect();
        Ok(MarketModel {
            s0,
            drift_real,
            r_f,
            cov,
            chol,
            vols,
            grid,
            tau_index,
        })
    }

    /// Equally spaced grid `T/M, 2T/M, …, T`.
    pub fn uniform_grid(maturity: f64, steps: usize) -> Vec<f64> {
        (1..=steps).map(|l| maturity * l as f64 / steps as f64).collect()
    }

    /// Covariance from per-asset vols and a correlation matrix.
    pub fn covariance_from_correlation(vols: &[f64], corr: &Matrix) -> Result<Matrix> {
        let q = vols.len();
        if corr.rows() != q || corr.cols() != q {
            return Err(Error::DimensionMismatch {
                expected: q,
                got: corr.rows(),
            });
        }
        Ok(Matrix::from_fn(q, q, |i, j| corr[(i, j)] * vols[i] * vols[j]))
    }

    pub fn q(&self) -> usize {
        self.s0.len()
    }
    pub fn s0(&self) -> &[f64] {
        &self.s0
    }
    pub fn drift_real(&self) -> &[f64] {
        &self.drift_real
    }
    pub fn r_f(&self) -> f64 {
        self.r_f
    }
    pub fn cov(&self) -> &Matrix {
        &self.cov
    }
    pub fn chol(&self) -> &Matrix {
        &self.chol
    }
    /// Marginal volatility `σ̄_i = √Σ_ii`.
    pub fn vol(&self, i: usize) -> f64 {
        self.vols[i]
    }
    pub fn vols(&self) -> &[f64] {
        &self.vols
    }
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }
    /// Number of monitoring dates `M`.
    pub fn steps(&self) -> usize {
        self.grid.len()
    }
    /// `M_τ`, the number of monitoring dates in `(0, τ]`.
    pub fn tau_index(&self) -> usize {
        self.tau_index
    }
    pub fn tau(&self) -> f64 {
        self.grid[self.tau_index - 1]
    }
    pub fn maturity(&self) -> f64 {
        self.grid[self.grid.len() - 1]
    }

    /// Time of monitoring date `l` (1-based); `l = 0` is the origin.
    pub(crate) fn time(&self, l: usize) -> f64 {
        if l == 0 {
            0.0
        } else {
            self.grid[l - 1]
        }
    }

    /// One exact GBM step of all assets over `[t_{l-1}, t_l]`, updating log
    /// prices and log running maxima in place.
    fn step<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        l: usize,
        drift: &[f64],
        log_s: &mut [f64],
        log_max: &mut [f64],
        xi: &mut [f64],
    ) {
        let q = self.q();
        let dt = self.time(l) - self.time(l - 1);
        let sdt = dt.sqrt();
        for x in xi.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        for i in 0..q {
            let row = &self.chol.row(i)[..=i];
            let eps: f64 = row.iter().zip(&xi[..=i]).map(|(a, x)| a * x).sum();
            let var = self.vols[i] * self.vols[i];
            let start = log_s[i];
            let end = start + (drift[i] - 0.5 * var) * dt + sdt * eps;
            log_s[i] = end;
            let u = open_unit(rng);
            let m = log_bridge_max(start, end, var * dt, u);
            if m > log_max[i] {
                log_max[i] = m;
            }
        }
    }

    fn check_scenario(&self, z: &RiskFactorVector) -> Result<()> {
        let q = self.q();
        if z.s_tau.len() != q || z.run_max.len() != q || z.geo_partial.len() != q {
            return Err(Error::DimensionMismatch {
                expected: q,
                got: z.s_tau.len(),
            });
        }
        Ok(())
    }
}

/// One outer-level scenario `Z ∈ R^{3q}` observed at the risk horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskFactorVector {
    pub s_tau: Vec<f64>,
    /// Bridge-adjusted running maximum over `[0, τ]`.
    pub run_max: Vec<f64>,
    /// Geometric mean of the fixings `t_1 … t_{M_τ}`.
    pub geo_partial: Vec<f64>,
}

impl RiskFactorVector {
    pub fn q(&self) -> usize {
        self.s_tau.len()
    }

    /// Flattened `(s_tau, run_max, geo_partial)`.
    pub fn to_features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.q());
        v.extend_from_slice(&self.s_tau);
        v.extend_from_slice(&self.run_max);
        v.extend_from_slice(&self.geo_partial);
        v
    }

    pub fn from_features(f: &[f64]) -> Result<Self> {
        if f.len() % 3 != 0 || f.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "feature vector length {} is not a positive multiple of 3",
                f.len()
            )));
        }
        let q = f.len() / 3;
        Ok(RiskFactorVector {
            s_tau: f[..q].to_vec(),
            run_max: f[q..2 * q].to_vec(),
            geo_partial: f[2 * q..].to_vec(),
        })
    }

    /// Bit-level fingerprint used to tie inner paths to their scenario.
    pub fn fingerprint(&self) -> u64 {
        self.to_features()
            .iter()
            .fold(0x2545_F491_4F6C_DD1D, |h, x| crate::rng::mix(h ^ x.to_bits()))
    }
}

/// Identity of the random stream that produced a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub seed: RngSeed,
    pub stream: u64,
    pub substream: u64,
    /// Fingerprint of the conditioning scenario.
    pub anchor: u64,
}

/// One inner continuation from `τ` to `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    /// `q × (M − M_τ)` row-major prices on `t_{M_τ+1} … t_M`.
    pub prices: Vec<f64>,
    pub fixings: usize,
    /// Cumulative bridge-adjusted running maximum over `[0, T]`.
    pub bridge_max: Vec<f64>,
    pub lineage: SeedLineage,
}

impl PathBundle {
    pub fn asset_path(&self, i: usize) -> &[f64] {
        &self.prices[i * self.fixings..(i + 1) * self.fixings]
    }

    pub fn terminal(&self, i: usize) -> f64 {
        self.prices[(i + 1) * self.fixings - 1]
    }
}

/// Log of a sampled Brownian-bridge maximum between log prices `x` and `y`
/// with bridge variance `var_dt = σ²·dt`.
pub(crate) fn log_bridge_max(x: f64, y: f64, var_dt: f64, u: f64) -> f64 {
    let d = y - x;
    0.5 * (x + y + (d * d - 2.0 * var_dt * u.ln()).sqrt())
}

/// Samples the maximum of a GBM path on an interval given both endpoints.
///
/// Inverts `P(max > b) = exp(−2 ln(b/s_start) ln(b/s_end) / (σ² dt))` at
/// the uniform `u`. The result is never below `max(s_start, s_end)`.
pub fn bridge_max_sample(s_start: f64, s_end: f64, sigma: f64, dt: f64, u: f64) -> Result<f64> {
    if !(s_start > 0.0 && s_end > 0.0 && sigma > 0.0 && dt > 0.0 && u > 0.0 && u < 1.0) {
        return Err(domain(format!(
            "bridge maximum needs positive prices, sigma, dt and u in (0,1); got \
             s_start={s_start}, s_end={s_end}, sigma={sigma}, dt={dt}, u={u}"
        )));
    }
    let m = log_bridge_max(s_start.ln(), s_end.ln(), sigma * sigma * dt, u).exp();
    Ok(m.max(s_start).max(s_end))
}

fn outer_one(model: &MarketModel, seed: RngSeed, index: u64) -> RiskFactorVector {
    let q = model.q();
    let mut rng = seed.stream(index, 0);
    let mut log_s: Vec<f64> = model.s0.iter().map(|s| s.ln()).collect();
    let mut log_max = log_s.clone();
    let mut log_geo = vec![0.0; q];
    let mut xi = vec![0.0; q];
    let mt = model.tau_index;
    for l in 1..=mt {
        model.step(&mut rng, l, &model.drift_real, &mut log_s, &mut log_max, &mut xi);
        for (g, s) in log_geo.iter_mut().zip(&log_s) {
            *g += s;
        }
    }
    RiskFactorVector {
        s_tau: log_s.iter().map(|x| x.exp()).collect(),
        run_max: log_max.iter().zip(&log_s).map(|(m, s)| m.max(*s).exp()).collect(),
        geo_partial: log_geo.iter().map(|g| (g / mt as f64).exp()).collect(),
    }
}

/// Outer scenario `index` of the stream `seed`. Pure in `(seed, index)`.
pub fn simulate_outer_at(model: &MarketModel, seed: RngSeed, index: u64) -> RiskFactorVector {
    outer_one(model, seed, index)
}

/// `count` real-world scenarios of `Z`, generated in parallel.
pub fn simulate_outer(model: &MarketModel, count: usize, seed: RngSeed) -> Result<Vec<RiskFactorVector>> {
    if count == 0 {
        return Err(domain("outer scenario count must be at least 1"));
    }
    Ok((0..count as u64)
        .into_par_iter()
        .map(|i| outer_one(model, seed, i))
        .collect())
}

/// `count` risk-neutral continuations of scenario `z` from `τ` to `T`.
///
/// Path `j` reads substream `j + 1` of stream `scenario_id`; substream 0 is
/// left to the outer scenario with the same index.
pub fn simulate_inner(
    model: &MarketModel,
    z: &RiskFactorVector,
    count: usize,
    seed: RngSeed,
    scenario_id: u64,
) -> Result<Vec<PathBundle>> {
    if count == 0 {
        return Err(domain("inner path count must be at least 1"));
    }
    model.check_scenario(z)?;
    let anchor = z.fingerprint();
    Ok((0..count as u64)
        .map(|j| inner_one(model, z, seed, scenario_id, j + 1, anchor))
        .collect())
}

fn inner_one(
    model: &MarketModel,
    z: &RiskFactorVector,
    seed: RngSeed,
    stream: u64,
    substream: u64,
    anchor: u64,
) -> PathBundle {
    let q = model.q();
    let m = model.steps();
    let mt = model.tau_index;
    let fixings = m - mt;
    let mut rng = seed.stream(stream, substream);
    let drift = vec![model.r_f; q];
    let mut log_s: Vec<f64> = z.s_tau.iter().map(|s| s.ln()).collect();
    let mut log_max: Vec<f64> = z.run_max.iter().map(|s| s.ln()).collect();
    let mut xi = vec![0.0; q];
    let mut prices = vec![0.0; q * fixings];
    for (k, l) in (mt + 1..=m).enumerate() {
        model.step(&mut rng, l, &drift, &mut log_s, &mut log_max, &mut xi);
        for i in 0..q {
            prices[i * fixings + k] = log_s[i].exp();
        }
    }
    let mut bridge_max: Vec<f64> = log_max.iter().map(|x| x.exp()).collect();
    // exp/ln round trips must not undercut the recorded maxima.
    for i in 0..q {
        let path_max = prices[i * fixings..(i + 1) * fixings]
            .iter()
            .fold(z.run_max[i], |a, &b| a.max(b));
        bridge_max[i] = bridge_max[i].max(path_max);
    }
    PathBundle {
        prices,
        fixings,
        bridge_max,
        lineage: SeedLineage {
            seed,
            stream,
            substream,
            anchor,
        },
    }
}

/// Parameters of the documented random-model generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub q: usize,
    pub seed: u64,
    #[serde(default = "default_drift_range")]
    pub drift_range: (f64, f64),
    #[serde(default = "default_vol_range")]
    pub vol_range: (f64, f64),
    /// Range of the loadings on the common market factor.
    #[serde(default = "default_loading_range")]
    pub loading_range: (f64, f64),
    /// Standard deviation of the two secondary factor loadings.
    #[serde(default = "default_sector_sd")]
    pub sector_sd: f64,
}

fn default_drift_range() -> (f64, f64) {
    (0.02, 0.15)
}
fn default_vol_range() -> (f64, f64) {
    (0.15, 0.35)
}
fn default_loading_range() -> (f64, f64) {
    (0.2, 0.7)
}
fn default_sector_sd() -> f64 {
    0.3
}

impl GeneratorSpec {
    pub fn new(q: usize, seed: u64) -> Self {
        GeneratorSpec {
            q,
            seed,
            drift_range: default_drift_range(),
            vol_range: default_vol_range(),
            loading_range: default_loading_range(),
            sector_sd: default_sector_sd(),
        }
    }

    /// Draws `(drifts, vols, correlation)`.
    ///
    /// Drifts and vols are uniform on their ranges. The correlation is the
    /// normalized Gram matrix `a aᵀ + F Fᵀ + ½ I`, with market loadings
    /// `a_i` uniform on `loading_range` and a `q × 2` sector block `F` of
    /// `N(0, sector_sd²)` entries, which is positive definite by construction.
    pub fn draw(&self) -> Result<(Vec<f64>, Vec<f64>, Matrix)> {
        let q = self.q;
        if q == 0 {
            return Err(domain("generator needs q >= 1"));
        }
        let (dl, dh) = self.drift_range;
        let (vl, vh) = self.vol_range;
        let (al, ah) = self.loading_range;
        if !(vl > 0.0 && vh >= vl && dh >= dl && ah >= al && self.sector_sd >= 0.0) {
            return Err(domain("generator ranges are inconsistent"));
        }
        let mut rng = RngSeed(self.seed).derive(crate::rng::tags::MODEL_GENERATOR).stream(0, 0);
        let drifts: Vec<f64> = (0..q).map(|_| dl + (dh - dl) * rng.random::<f64>()).collect();
        let vols: Vec<f64> = (0..q).map(|_| vl + (vh - vl) * rng.random::<f64>()).collect();
        let a: Vec<f64> = (0..q).map(|_| al + (ah - al) * rng.random::<f64>()).collect();
        let f: Vec<[f64; 2]> = (0..q)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                let y: f64 = rng.sample(StandardNormal);
                [self.sector_sd * x, self.sector_sd * y]
            })
            .collect();
        let gram = Matrix::from_fn(q, q, |i, j| {
            a[i] * a[j] + f[i][0] * f[j][0] + f[i][1] * f[j][1] + if i == j { 0.5 } else { 0.0 }
        });
        let corr = Matrix::from_fn(q, q, |i, j| {
            if i == j {
                1.0
            } else {
                gram[(i, j)] / (gram[(i, i)] * gram[(j, j)]).sqrt()
            }
        });
        Ok((drifts, vols, corr))
    }

    /// A full market model from the generator with the given common settings.
    pub fn build(&self, s0: f64, r_f: f64, maturity: f64, steps: usize, tau_index: usize) -> Result<MarketModel> {
        let (drifts, vols, corr) = self.draw()?;
        let cov = MarketModel::covariance_from_correlation(&vols, &corr)?;
        MarketModel::new(
            vec![s0; self.q],
            drifts,
            r_f,
            cov,
            MarketModel::uniform_grid(maturity, steps),
            tau_index,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_asset(var: f64, mu: f64) -> MarketModel {
        MarketModel::new(
            vec![100.0],
            vec![mu],
            0.05,
            Matrix::from_rows(&[vec![var]]).unwrap(),
            MarketModel::uniform_grid(1.0, 50),
            2,
        )
        .unwrap()
    }

    #[test]
    fn outer_invariant_and_determinism() {
        let m = one_asset(0.04, 0.1);
        let a = simulate_outer(&m, 3, RngSeed(7)).unwrap();
        assert_eq!(a.len(), 3);
        for z in &a {
            assert!(z.run_max[0] >= z.s_tau[0].max(100.0));
            assert!(z.geo_partial[0] > 0.0);
        }
        let b = simulate_outer(&m, 3, RngSeed(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn outer_scenario_independent_of_count() {
        let m = one_asset(0.04, 0.1);
        let a = simulate_outer(&m, 5, RngSeed(3)).unwrap();
        let b = simulate_outer(&m, 50, RngSeed(3)).unwrap();
        assert_eq!(a[..], b[..5]);
        assert_eq!(simulate_outer_at(&m, RngSeed(3), 4), a[4]);
    }

    #[test]
    fn zero_vol_limit_outer() {
        let m = one_asset(1e-18, 0.1);
        let z = &simulate_outer(&m, 1, RngSeed(1)).unwrap()[0];
        let expected = 100.0 * (0.1 * m.tau()).exp();
        assert!((z.s_tau[0] / expected - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_vol_limit_inner() {
        let m = one_asset(1e-18, 0.1);
        let z = &simulate_outer(&m, 1, RngSeed(1)).unwrap()[0];
        let paths = simulate_inner(&m, z, 1, RngSeed(2), 0).unwrap();
        let expected = z.s_tau[0] * (0.05 * (m.maturity() - m.tau())).exp();
        assert!((paths[0].terminal(0) / expected - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inner_max_is_cumulative() {
        let m = one_asset(0.09, 0.1);
        for z in simulate_outer(&m, 20, RngSeed(11)).unwrap() {
            for p in simulate_inner(&m, &z, 5, RngSeed(12), 0).unwrap() {
                assert!(p.bridge_max[0] >= z.run_max[0]);
                let discrete = p.asset_path(0).iter().cloned().fold(0.0, f64::max);
                assert!(p.bridge_max[0] >= discrete);
            }
        }
    }

    #[test]
    fn scenario_ids_separate_streams() {
        let m = one_asset(0.04, 0.1);
        let z = &simulate_outer(&m, 1, RngSeed(1)).unwrap()[0];
        let a = simulate_inner(&m, z, 3, RngSeed(5), 0).unwrap();
        let b = simulate_inner(&m, z, 3, RngSeed(5), 1).unwrap();
        for pa in &a {
            for pb in &b {
                assert_ne!(pa.prices, pb.prices);
            }
        }
    }

    #[test]
    fn bridge_sample_edges() {
        let just_below_one = 1.0 - f64::EPSILON;
        let v = bridge_max_sample(100.0, 105.0, 0.2, 0.02, just_below_one).unwrap();
        assert!((v - 105.0).abs() < 1e-6);
        assert!(bridge_max_sample(100.0, 100.0, 0.2, 0.02, 0.5).unwrap() > 100.0);
        assert!(bridge_max_sample(100.0, 100.0, 0.2, 0.02, 1.0).is_err());
        assert!(bridge_max_sample(-1.0, 100.0, 0.2, 0.02, 0.5).is_err());
        assert!(bridge_max_sample(100.0, 100.0, 0.0, 0.02, 0.5).is_err());
    }

    #[test]
    fn rejects_bad_models() {
        let cov = Matrix::from_rows(&[vec![0.04]]).unwrap();
        let grid = MarketModel::uniform_grid(1.0, 4);
        assert!(MarketModel::new(vec![100.0], vec![0.1], 0.05, cov.clone(), grid.clone(), 4).is_err());
        assert!(MarketModel::new(vec![100.0], vec![0.1], 0.05, cov.clone(), grid.clone(), 0).is_err());
        assert!(MarketModel::new(vec![0.0], vec![0.1], 0.05, cov, grid.clone(), 2).is_err());
        let zero_row = Matrix::from_rows(&[vec![0.04, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(MarketModel::new(vec![100.0; 2], vec![0.1; 2], 0.05, zero_row, grid, 2).is_err());
    }

    #[test]
    fn generator_is_reproducible_and_valid() {
        let g = GeneratorSpec::new(10, 2024);
        let m1 = g.build(100.0, 0.05, 1.0, 50, 2).unwrap();
        let m2 = g.build(100.0, 0.05, 1.0, 50, 2).unwrap();
        assert_eq!(m1, m2);
        let chol = m1.chol();
        let back = chol.matmul(&chol.transpose()).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let c = m1.cov()[(i, j)];
                assert!((back[(i, j)] - c).abs() <= 1e-10 * c.abs().max(1e-12));
            }
        }
    }
}
