//! TOML configuration shared by the library entry points and the CLI.
//!
//! Unknown keys are rejected. `apply_override("a.b.c", "v")` edits the
//! parsed table before it is deserialized, with `v` read as a TOML value
//! (falling back to a bare string).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    allocate_budget, batch_shape, BudgetConstants, BudgetStrategy, EstimatorConfig, GaussianToy, PortfolioProblem,
    Problem, SurfaceMethod,
};
use crate::linalg::Matrix;
use crate::market::{GeneratorSpec, MarketModel};
use crate::pricing::PortfolioSpec;
use crate::smoothers::{
    BasisSpec, Candidate, Family, HyperparameterGrid, KernelSpec, MlpArch, TrainConfig, DEFAULT_BANDWIDTH_CONSTANTS,
};

fn level() -> f64 {
    0.95
}

/// Top-level configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "level")]
    pub alpha: f64,
    #[serde(default = "level")]
    pub beta: f64,
    pub problem: ProblemConfig,
    /// Single estimator used by `estimate`, `fit` and `tune`.
    #[serde(default)]
    pub estimator: Option<EstimatorSpec>,
    #[serde(default)]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default)]
    pub reference: ReferenceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Toy {
        #[serde(default = "half")]
        rho: f64,
        #[serde(default = "unit")]
        noise_sd: f64,
    },
    Portfolio {
        market: MarketConfig,
        first: PortfolioConfig,
        second: PortfolioConfig,
    },
}

fn half() -> f64 {
    0.5
}
fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub s0: f64,
    pub r_f: f64,
    pub maturity: f64,
    pub steps: usize,
    pub tau_index: usize,
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    #[serde(default)]
    pub explicit: Option<ExplicitMarket>,
}

/// Market data given directly instead of drawn by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitMarket {
    pub drifts: Vec<f64>,
    pub vols: Vec<f64>,
    pub correlation: Vec<Vec<f64>>,
}

impl MarketConfig {
    pub fn build(&self) -> Result<MarketModel> {
        match (&self.generator, &self.explicit) {
            (Some(g), None) => g.build(self.s0, self.r_f, self.maturity, self.steps, self.tau_index),
            (None, Some(e)) => {
                let corr = Matrix::from_rows(&e.correlation)?;
                let cov = MarketModel::covariance_from_correlation(&e.vols, &corr)?;
                MarketModel::new(
                    vec![self.s0; e.vols.len()],
                    e.drifts.clone(),
                    self.r_f,
                    cov,
                    MarketModel::uniform_grid(self.maturity, self.steps),
                    self.tau_index,
                )
            }
            _ => Err(Error::Config(
                "market needs exactly one of [generator] or [explicit]".into(),
            )),
        }
    }
}

/// Per-asset override of strikes or barrier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetOverride {
    pub asset: usize,
    #[serde(default)]
    pub k_asian: Option<f64>,
    #[serde(default)]
    pub k_barrier: Option<f64>,
    #[serde(default)]
    pub barrier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioConfig {
    pub w: [f64; 3],
    pub k_asian: f64,
    pub k_barrier: f64,
    pub barrier: f64,
    #[serde(default)]
    pub overrides: Vec<AssetOverride>,
}

impl PortfolioConfig {
    pub fn build(&self, model: &MarketModel) -> Result<PortfolioSpec> {
        let q = model.q();
        let mut ka = vec![self.k_asian; q];
        let mut kb = vec![self.k_barrier; q];
        let mut b = vec![self.barrier; q];
        for o in &self.overrides {
            if o.asset >= q {
                return Err(Error::Config(format!("override for asset {} but q = {q}", o.asset)));
            }
            if let Some(v) = o.k_asian {
                ka[o.asset] = v;
            }
            if let Some(v) = o.k_barrier {
                kb[o.asset] = v;
            }
            if let Some(v) = o.barrier {
                b[o.asset] = v;
            }
        }
        PortfolioSpec::new(self.w, ka, kb, b, model)
    }
}

impl ProblemConfig {
    pub fn build(&self) -> Result<Problem> {
        match self {
            ProblemConfig::Toy { rho, noise_sd } => Ok(Problem::Toy(GaussianToy::new(*rho, *noise_sd)?)),
            ProblemConfig::Portfolio { market, first, second } => {
                let model = market.build()?;
                let first = first.build(&model)?;
                let second = second.build(&model)?;
                Ok(Problem::Portfolio(Box::new(PortfolioProblem { model, first, second })))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Batching on exact conditional losses.
    Batching,
    /// Standard nested simulation.
    Sns,
    /// Smoothing fitted and evaluated on the same scenarios.
    Coupled,
    /// Two-stage fit then batching on fresh scenarios.
    Decoupled,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Batching => "batching",
            EstimatorKind::Sns => "sns",
            EstimatorKind::Coupled => "coupled",
            EstimatorKind::Decoupled => "decoupled",
        }
    }

    fn default_strategy(self) -> BudgetStrategy {
        match self {
            EstimatorKind::Sns | EstimatorKind::Batching => BudgetStrategy::SnsOpt,
            EstimatorKind::Coupled => BudgetStrategy::SmoothFixedL,
            EstimatorKind::Decoupled => BudgetStrategy::Decoupled,
        }
    }
}

/// Optional settings of a tuning grid; unset entries take family defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub degrees: Option<Vec<u32>>,
    pub constants: Option<Vec<f64>>,
    pub kernel: Option<KernelSpec>,
    pub lambdas: Option<Vec<f64>>,
    pub length_scales: Option<Vec<f64>>,
    pub arch: Option<MlpArch>,
    pub train: Option<TrainConfig>,
    pub widths: Option<Vec<usize>>,
    pub learning_rates: Option<Vec<f64>>,
    pub cv_folds: Option<usize>,
    pub seed: Option<u64>,
    pub budget_seconds: Option<f64>,
    pub max_rows: Option<usize>,
}

/// Default KRR penalties.
pub const DEFAULT_LAMBDAS: [f64; 6] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
/// Default KRR length scales, as multiples of `√d`.
pub const DEFAULT_LENGTH_SCALE_FACTORS: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

impl GridConfig {
    /// Grid for `family` on `d`-dimensional inputs. `basis` is the linear
    /// base basis (hinges included).
    pub fn build(&self, family: Family, d: usize, basis: &BasisSpec) -> HyperparameterGrid {
        let mut grid = match family {
            Family::LinearRegression => {
                HyperparameterGrid::linear(basis, self.degrees.as_deref().unwrap_or(&[1, 2, 3, 4]))
            }
            Family::KernelSmoothing => {
                HyperparameterGrid::kernel(self.constants.as_deref().unwrap_or(&DEFAULT_BANDWIDTH_CONSTANTS))
            }
            Family::Krr => {
                let kernel = self.kernel.unwrap_or(KernelSpec::Gaussian { length_scale: 1.0 });
                let scales: Vec<f64> = self.length_scales.clone().unwrap_or_else(|| {
                    DEFAULT_LENGTH_SCALE_FACTORS.iter().map(|f| f * (d as f64).sqrt()).collect()
                });
                HyperparameterGrid::krr(&kernel, self.lambdas.as_deref().unwrap_or(&DEFAULT_LAMBDAS), &scales)
                    .with_max_rows(1000)
            }
            Family::Mlp => HyperparameterGrid::mlp(
                &self.arch.unwrap_or_default(),
                &self.train.unwrap_or_default(),
                self.widths.as_deref().unwrap_or(&[32, 64]),
                self.learning_rates.as_deref().unwrap_or(&[0.01]),
            )
            .with_folds(3)
            .with_max_rows(2000),
        };
        if let Some(k) = self.cv_folds {
            grid.cv_folds = k;
        }
        if let Some(s) = self.seed {
            grid.seed = s;
        }
        if self.budget_seconds.is_some() {
            grid.budget_seconds = self.budget_seconds;
        }
        if self.max_rows.is_some() {
            grid.max_rows = self.max_rows;
        }
        grid
    }
}

/// One estimator: kind, smoother, and sizing by budget or explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    /// Row name; keys the replication seeds.
    #[serde(default)]
    pub key: Option<String>,
    pub kind: EstimatorKind,
    #[serde(default)]
    pub family: Option<Family>,
    /// Use the exact surfaces (decoupled only).
    #[serde(default)]
    pub oracle: bool,
    /// Fixed hyperparameters; skips tuning.
    #[serde(default)]
    pub candidate: Option<Candidate>,
    #[serde(default)]
    pub grid: GridConfig,
    /// Linear base basis; defaults to the portfolio basis or plain powers.
    #[serde(default)]
    pub basis: Option<BasisSpec>,
    #[serde(default)]
    pub gamma: Option<u64>,
    #[serde(default)]
    pub strategy: Option<BudgetStrategy>,
    #[serde(default)]
    pub constants: BudgetConstants,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub h: Option<usize>,
    #[serde(default)]
    pub l: Option<usize>,
    #[serde(default)]
    pub m: Option<usize>,
}

/// Sizes of a resolved estimator row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sizing {
    /// Inner-sample budget actually spent (0 for exact batching).
    pub gamma: u64,
    pub m: usize,
    pub l: usize,
    pub k: usize,
    pub h: usize,
}

impl EstimatorSpec {
    pub fn key(&self) -> String {
        self.key.clone().unwrap_or_else(|| {
            let fam = self.family_label();
            match self.gamma {
                Some(g) => format!("{}-{fam}-{g}", self.kind.label()),
                None => format!("{}-{fam}", self.kind.label()),
            }
        })
    }

    pub fn family_label(&self) -> String {
        if matches!(self.kind, EstimatorKind::Batching | EstimatorKind::Sns) {
            "none".into()
        } else if self.oracle {
            "oracle".into()
        } else {
            self.family
                .map_or_else(|| "none".to_string(), |f| f.name().to_string())
        }
    }

    /// Resolves `k, h, l, m` and the spent budget.
    pub fn sizing(&self) -> Result<Sizing> {
        let (mut k, mut h, mut l, mut m) = (None, None, None, None);
        if let Some(g) = self.gamma {
            let a = allocate_budget(g, self.strategy.unwrap_or(self.kind.default_strategy()), &self.constants)?;
            k = Some(a.k);
            h = Some(a.h);
            l = Some(a.l);
            m = Some(a.m);
        } else if let (EstimatorKind::Batching | EstimatorKind::Decoupled, Some(n)) = (self.kind, self.constants.n) {
            let (bk, bh) = batch_shape(n, self.constants.c)?;
            k = Some(bk);
            h = Some(bh);
        }
        k = self.k.or(k);
        h = self.h.or(h);
        l = self.l.or(l).or(self.constants.l);
        m = self.m.or(m);
        let (k, h) = match (k, h) {
            (Some(k), Some(h)) if k > 0 && h > 0 => (k, h),
            _ => return Err(Error::Config(format!("estimator '{}' needs k and h (or a budget)", self.key()))),
        };
        let n = k * h;
        let (l, m, gamma) = match self.kind {
            EstimatorKind::Batching => (0, 0, 0),
            EstimatorKind::Sns | EstimatorKind::Coupled => {
                let l = l.ok_or_else(|| Error::Config(format!("estimator '{}' needs l", self.key())))?;
                (l, n, (n * l) as u64)
            }
            EstimatorKind::Decoupled if self.oracle => (0, 0, 0),
            EstimatorKind::Decoupled => {
                let l = l.ok_or_else(|| Error::Config(format!("estimator '{}' needs l", self.key())))?;
                let m = m.ok_or_else(|| Error::Config(format!("estimator '{}' needs m", self.key())))?;
                (l, m, (m * l) as u64)
            }
        };
        Ok(Sizing { gamma, m, l, k, h })
    }

    pub fn estimator_config(&self, alpha: f64, beta: f64, seed: u64) -> Result<EstimatorConfig> {
        let s = self.sizing()?;
        let cfg = EstimatorConfig {
            alpha,
            beta,
            k: s.k,
            h: s.h,
            m: s.m,
            l: s.l,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fitting method for coupled and decoupled rows.
    pub fn surface_method(&self, problem: &Problem) -> Result<SurfaceMethod> {
        if let Some(c) = &self.candidate {
            return Ok(SurfaceMethod::Fixed(c.clone()));
        }
        let family = self
            .family
            .ok_or_else(|| Error::Config(format!("estimator '{}' needs a smoother family", self.key())))?;
        let basis = self.basis.clone().unwrap_or_else(|| default_basis(problem));
        use crate::estimators::LossModel;
        Ok(SurfaceMethod::Tuned(self.grid.build(family, problem.dim(), &basis)))
    }
}

/// `{1, z, z²}` per coordinate, plus spot hinges at the strikes of both
/// portfolios for the portfolio problem.
pub fn default_basis(problem: &Problem) -> BasisSpec {
    match problem {
        Problem::Toy(_) => BasisSpec::polynomial(2),
        Problem::Portfolio(p) => {
            let q = p.model.q();
            let strikes: Vec<Vec<f64>> = (0..q)
                .map(|i| {
                    let mut v = Vec::new();
                    for s in [&p.first, &p.second] {
                        if s.w[1] != 0.0 {
                            v.push(s.k_asian[i]);
                        }
                        if s.w[2] != 0.0 {
                            v.push(s.k_barrier[i]);
                        }
                    }
                    v
                })
                .collect();
            BasisSpec::portfolio(&strikes)
        }
    }
}

/// How the ground-truth CoVaR of an experiment is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    /// Use this value as is.
    #[serde(default)]
    pub value: Option<f64>,
    /// First scenario count tried.
    #[serde(default = "default_n_start")]
    pub n_start: usize,
    /// Largest scenario count tried before giving up.
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_ref_reps")]
    pub replications: usize,
    /// Target half-width relative to the estimate.
    #[serde(default = "default_precision")]
    pub precision: f64,
    /// Batch shape constant `√k / h`.
    #[serde(default = "unit")]
    pub c: f64,
}

fn default_n_start() -> usize {
    250_000
}
fn default_n_max() -> usize {
    16_000_000
}
fn default_ref_reps() -> usize {
    10
}
fn default_precision() -> f64 {
    0.002
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            value: None,
            n_start: default_n_start(),
            n_max: default_n_max(),
            replications: default_ref_reps(),
            precision: default_precision(),
            c: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub replications: usize,
    pub rows: Vec<EstimatorSpec>,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Config> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `s`, applies `key=value` overrides, then deserializes.
    pub fn from_toml_with_overrides(s: &str, overrides: &[String]) -> Result<Config> {
        let mut table: toml::Table = s.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not of the form key=value")))?;
            apply_override(&mut table, k.trim(), v.trim())?;
        }
        Config::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Config> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::from_toml_with_overrides(&s, overrides)
    }
}

fn parse_value(v: &str) -> toml::Value {
    let doc = format!("v = {v}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(v.to_string())),
        Err(_) => toml::Value::String(v.to_string()),
    }
}

/// Sets dotted `path` in `table`, creating intermediate tables. Numeric
/// segments index into arrays.
pub fn apply_override(table: &mut toml::Table, path: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{path}'")));
    }
    let mut cur = table;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if last {
            cur.insert((*part).to_string(), parse_value(value));
            return Ok(());
        }
        let next = parts[i + 1];
        let entry = cur
            .entry((*part).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        // `rows.0.gamma` steps into the first element of an array of tables.
        let entry = match (entry, next.parse::<usize>()) {
            (toml::Value::Array(arr), Ok(idx)) => {
                let len = arr.len();
                let el = arr
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("override index {idx} out of range ({len}) in '{path}'")))?;
                if i + 2 == parts.len() {
                    *el = parse_value(value);
                    return Ok(());
                }
                return match el {
                    toml::Value::Table(t) => apply_override(t, &parts[i + 2..].join("."), value),
                    _ => Err(Error::Config(format!("'{path}' does not name a table"))),
                };
            }
            (e, _) => e,
        };
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("'{path}' does not name a table"))),
        };
    }
    Ok(())
}
