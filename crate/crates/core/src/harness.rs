//! Replicated experiments: ground truth, error metrics, rate fits and
//! result files.
//!
//! Replication `r` of the row keyed `key` runs with seed
//! `RngSeed(root).derive_str(key).derive(r)`, so a row's numbers do not depend
//! on which other rows are in the plan or in what order they run.
//!
//! `r_sd` is the population standard deviation (divisor `R`), which makes
//! `r_rmse² = r_bias² + r_sd²` exact. All three are relative to `|θ|`;
//! `r_bias` keeps its sign.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, EstimatorKind, EstimatorSpec, ProblemConfig, ReferenceConfig};
use crate::error::{Error, Result};
use crate::estimators::{
    batch_shape, batching_exact_covar, decoupled_covar, naive_smoothed_covar, naive_sns_covar, EstimateReport,
    EstimatorConfig, LossModel, PhaseTimings, Problem, SurfaceSource,
};
use crate::rng::RngSeed;

/// Runs one estimate of `spec` with the given seed.
pub fn run_spec(problem: &Problem, spec: &EstimatorSpec, alpha: f64, beta: f64, seed: u64) -> Result<EstimateReport> {
    let cfg = spec.estimator_config(alpha, beta, seed)?;
    match spec.kind {
        EstimatorKind::Batching => batching_exact_covar(problem, &cfg),
        EstimatorKind::Sns => naive_sns_covar(problem, &cfg),
        EstimatorKind::Coupled => naive_smoothed_covar(problem, &cfg, &spec.surface_method(problem)?),
        EstimatorKind::Decoupled if spec.oracle => decoupled_covar(problem, &cfg, &SurfaceSource::Oracle),
        EstimatorKind::Decoupled => {
            decoupled_covar(problem, &cfg, &SurfaceSource::Fit(spec.surface_method(problem)?))
        }
    }
}

/// Ground truth and how it was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub value: f64,
    /// `analytic`, `given` or `batching`.
    pub source: String,
    /// 95% half-width of the replication mean (0 unless estimated).
    pub half_width: f64,
    /// Replication standard deviation (divisor `R − 1`).
    pub spread: f64,
    pub n: usize,
    pub replications: usize,
}

/// Batching on exact conditional losses, growing `n` until the 95%
/// half-width of the mean over `cfg.replications` runs is below
/// `cfg.precision · |mean|`.
pub fn compute_reference<P: LossModel + ?Sized>(
    problem: &P,
    alpha: f64,
    beta: f64,
    cfg: &ReferenceConfig,
    seed: u64,
) -> Result<Reference> {
    if cfg.replications < 2 {
        return Err(Error::Config("reference needs at least 2 replications".into()));
    }
    if !(cfg.precision > 0.0) || cfg.n_start == 0 || cfg.n_max < cfg.n_start {
        return Err(Error::Config("reference needs precision > 0 and 0 < n_start <= n_max".into()));
    }
    let root = RngSeed(seed).derive_str("reference");
    let mut n = cfg.n_start;
    loop {
        let (k, h) = batch_shape(n, cfg.c)?;
        let mut values = Vec::with_capacity(cfg.replications);
        // Sequential over replications: each run is parallel inside and large
        // runs are memory bound.
        for r in 0..cfg.replications {
            let ec = EstimatorConfig {
                alpha,
                beta,
                k,
                h,
                m: 0,
                l: 0,
                seed: root.derive(r as u64).0,
            };
            values.push(batching_exact_covar(problem, &ec)?.covar_hat);
        }
        let rf = values.len() as f64;
        let mean = values.iter().sum::<f64>() / rf;
        let spread = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (rf - 1.0)).sqrt();
        let half_width = 1.96 * spread / rf.sqrt();
        let target = cfg.precision * mean.abs();
        if half_width <= target {
            return Ok(Reference {
                value: mean,
                source: "batching".into(),
                half_width,
                spread,
                n: k * h,
                replications: cfg.replications,
            });
        }
        if n >= cfg.n_max {
            return Err(Error::PrecisionUnreachable {
                half_width,
                target,
                n: k * h,
            });
        }
        // Spread shrinks like n^{-1/3}.
        let grow = (half_width / target).powi(3).clamp(2.0, 64.0);
        n = ((n as f64 * grow).ceil() as usize).min(cfg.n_max);
    }
}

/// Reference from the config: a given value, the analytic toy value, or
/// [`compute_reference`].
pub fn resolve_reference(config: &Config, problem: &Problem) -> Result<Reference> {
    let fixed = |value: f64, source: &str| Reference {
        value,
        source: source.into(),
        half_width: 0.0,
        spread: 0.0,
        n: 0,
        replications: 0,
    };
    if let Some(v) = config.reference.value {
        return Ok(fixed(v, "given"));
    }
    match (problem, &config.problem) {
        (Problem::Toy(t), ProblemConfig::Toy { .. }) => Ok(fixed(t.analytic_covar(config.alpha, config.beta), "analytic")),
        _ => compute_reference(problem, config.alpha, config.beta, &config.reference, config.seed),
    }
}

/// A fully resolved replicated study.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub problem: Problem,
    pub alpha: f64,
    pub beta: f64,
    pub replications: usize,
    pub root_seed: u64,
    pub reference_theta: f64,
    pub rows: Vec<EstimatorSpec>,
    /// Record wall-clock phase timings; off gives byte-stable output.
    pub timings: bool,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("experiment needs at least one replication".into()));
        }
        if !self.reference_theta.is_finite() || self.reference_theta == 0.0 {
            return Err(Error::Config("reference value must be finite and non-zero".into()));
        }
        let mut keys = std::collections::HashSet::new();
        for row in &self.rows {
            row.estimator_config(self.alpha, self.beta, 0)?;
            if !keys.insert(row.key()) {
                return Err(Error::Config(format!("duplicate row key '{}'", row.key())));
            }
        }
        Ok(())
    }

    /// Plan from `config.experiment`, with the reference resolved.
    pub fn from_config(config: &Config, timings: bool) -> Result<(ExperimentPlan, Reference)> {
        let exp = config
            .experiment
            .as_ref()
            .ok_or_else(|| Error::Config("missing [experiment] section".into()))?;
        let problem = config.problem.build()?;
        for row in &exp.rows {
            row.estimator_config(config.alpha, config.beta, 0)?;
        }
        let reference = resolve_reference(config, &problem)?;
        let plan = ExperimentPlan {
            problem,
            alpha: config.alpha,
            beta: config.beta,
            replications: exp.replications,
            root_seed: config.seed,
            reference_theta: reference.value,
            rows: exp.rows.clone(),
            timings,
        };
        plan.validate()?;
        Ok((plan, reference))
    }
}

/// Error metrics of one estimator row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub key: String,
    pub gamma: u64,
    pub m: usize,
    pub l: usize,
    pub k: usize,
    pub h: usize,
    pub family: String,
    pub coupling: String,
    pub r_bias: f64,
    pub r_sd: f64,
    pub r_rmse: f64,
    pub t_sim1: f64,
    pub t_tune: f64,
    pub t_fit: f64,
    pub t_sim2: f64,
    pub t_estimate: f64,
    pub mean_theta: f64,
    pub replications: usize,
    pub failures: usize,
    pub error: Option<String>,
}

/// `(r_bias, r_sd, r_rmse)` of `estimates` against `theta`.
pub fn relative_metrics(estimates: &[f64], theta: f64) -> (f64, f64, f64) {
    let n = estimates.len() as f64;
    let scale = theta.abs();
    let mean = estimates.iter().sum::<f64>() / n;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    let mse = estimates.iter().map(|e| (e - theta).powi(2)).sum::<f64>() / n;
    ((mean - theta) / scale, var.sqrt() / scale, mse.sqrt() / scale)
}

/// Seed of replication `r` of row `key`.
pub fn replication_seed(root: u64, key: &str, r: usize) -> u64 {
    RngSeed(root).derive_str(key).derive(r as u64).0
}

/// Runs every replication of one row.
pub fn run_row(plan: &ExperimentPlan, spec: &EstimatorSpec) -> MetricRow {
    let key = spec.key();
    let coupling = spec.kind.label().to_string();
    let family = spec.family_label();
    let sizing = match spec.sizing() {
        Ok(s) => s,
        Err(e) => {
            return MetricRow {
                key,
                gamma: 0,
                m: 0,
                l: 0,
                k: 0,
                h: 0,
                family,
                coupling,
                r_bias: f64::NAN,
                r_sd: f64::NAN,
                r_rmse: f64::NAN,
                t_sim1: 0.0,
                t_tune: 0.0,
                t_fit: 0.0,
                t_sim2: 0.0,
                t_estimate: 0.0,
                mean_theta: f64::NAN,
                replications: plan.replications,
                failures: plan.replications,
                error: Some(e.to_string()),
            }
        }
    };
    let results: Vec<Result<EstimateReport>> = (0..plan.replications)
        .into_par_iter()
        .map(|r| {
            run_spec(
                &plan.problem,
                spec,
                plan.alpha,
                plan.beta,
                replication_seed(plan.root_seed, &key, r),
            )
        })
        .collect();
    let mut estimates = Vec::new();
    let mut t = PhaseTimings::default();
    let mut error = None;
    for res in results {
        match res {
            Ok(rep) => {
                estimates.push(rep.covar_hat);
                t.sim1 += rep.timings.sim1;
                t.tune += rep.timings.tune;
                t.fit += rep.timings.fit;
                t.sim2 += rep.timings.sim2;
                t.estimate += rep.timings.estimate;
            }
            Err(e) => {
                error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    let ok = estimates.len();
    let (r_bias, r_sd, r_rmse) = if ok > 0 {
        relative_metrics(&estimates, plan.reference_theta)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    let avg = |x: f64| if plan.timings && ok > 0 { x / ok as f64 } else { 0.0 };
    MetricRow {
        key,
        gamma: sizing.gamma,
        m: sizing.m,
        l: sizing.l,
        k: sizing.k,
        h: sizing.h,
        family,
        coupling,
        r_bias,
        r_sd,
        r_rmse,
        t_sim1: avg(t.sim1),
        t_tune: avg(t.tune),
        t_fit: avg(t.fit),
        t_sim2: avg(t.sim2),
        t_estimate: avg(t.estimate),
        mean_theta: if ok > 0 { estimates.iter().sum::<f64>() / ok as f64 } else { f64::NAN },
        replications: plan.replications,
        failures: plan.replications - ok,
        error,
    }
}

/// Runs the rows in plan order, handing each to `sink` as it completes.
pub fn run_experiment(
    plan: &ExperimentPlan,
    mut sink: impl FnMut(&MetricRow) -> Result<()>,
) -> Result<Vec<MetricRow>> {
    plan.validate()?;
    let mut rows = Vec::with_capacity(plan.rows.len());
    for spec in &plan.rows {
        let row = run_row(plan, spec);
        sink(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

/// OLS fit of `log y` on `log x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub slope_se: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Log-log least-squares slope through `(x, y)` with its standard error.
pub fn rate_fit(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch(format!("{} x values, {} y values", xs.len(), ys.len())));
    }
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len();
    if n < 3 {
        return Err(Error::InsufficientPoints(n));
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::Domain("rate fit needs at least two distinct sizes".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    Ok(RateFit {
        slope,
        slope_se: (sse / (nf - 2.0) / sxx).sqrt(),
        intercept,
        points: n,
    })
}

/// Slope of `r_rmse` against the budget `Γ`, or against `n = k·h` when any
/// row has no inner budget.
pub fn rate_analysis(rows: &[MetricRow]) -> Result<RateFit> {
    let by_gamma = rows.iter().all(|r| r.gamma > 0);
    let xs: Vec<f64> = rows
        .iter()
        .map(|r| if by_gamma { r.gamma as f64 } else { (r.k * r.h) as f64 })
        .collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.r_rmse).collect();
    rate_fit(&xs, &ys)
}

/// Rate fits for every `(coupling, family)` group with at least three
/// distinct sizes.
pub fn ladder_slopes(rows: &[MetricRow]) -> Vec<(String, RateFit)> {
    let mut groups: Vec<(String, Vec<MetricRow>)> = Vec::new();
    for r in rows {
        let label = format!("{}/{}", r.coupling, r.family);
        match groups.iter_mut().find(|g| g.0 == label) {
            Some(g) => g.1.push(r.clone()),
            None => groups.push((label, vec![r.clone()])),
        }
    }
    groups
        .into_iter()
        .filter_map(|(label, g)| rate_analysis(&g).ok().map(|f| (label, f)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => Err(Error::Config(format!("unknown output format '{s}' (csv or json)"))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 15] = [
    "gamma", "m", "l", "k", "h", "family", "coupling", "r_bias", "r_sd", "r_rmse", "t_sim1", "t_tune", "t_fit",
    "t_sim2", "t_estimate",
];

/// Rounds to 6 significant digits.
pub fn sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn numeric_fields(r: &MetricRow) -> [f64; 8] {
    [r.r_bias, r.r_sd, r.r_rmse, r.t_sim1, r.t_tune, r.t_fit, r.t_sim2, r.t_estimate].map(sig6)
}

fn csv_record(r: &MetricRow) -> Vec<String> {
    let mut rec = vec![
        r.gamma.to_string(),
        r.m.to_string(),
        r.l.to_string(),
        r.k.to_string(),
        r.h.to_string(),
        r.family.clone(),
        r.coupling.clone(),
    ];
    rec.extend(numeric_fields(r).iter().map(|v| v.to_string()));
    rec
}

fn json_record(r: &MetricRow) -> serde_json::Value {
    let v = numeric_fields(r);
    let mut obj = serde_json::Map::new();
    obj.insert("gamma".into(), r.gamma.into());
    obj.insert("m".into(), r.m.into());
    obj.insert("l".into(), r.l.into());
    obj.insert("k".into(), r.k.into());
    obj.insert("h".into(), r.h.into());
    obj.insert("family".into(), r.family.clone().into());
    obj.insert("coupling".into(), r.coupling.clone().into());
    for (name, x) in CSV_COLUMNS[7..].iter().zip(v) {
        obj.insert((*name).into(), serde_json::Number::from_f64(x).map_or(serde_json::Value::Null, Into::into));
    }
    serde_json::Value::Object(obj)
}

fn io(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

/// Writes `rows` in `format`.
pub fn emit_results(rows: &[MetricRow], format: OutputFormat, out: impl Write) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(CSV_COLUMNS).map_err(io)?;
            for r in rows {
                w.write_record(csv_record(r)).map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        OutputFormat::Json => {
            let mut out = out;
            let v: Vec<serde_json::Value> = rows.iter().map(json_record).collect();
            serde_json::to_writer_pretty(&mut out, &v).map_err(io)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Result file that stays valid after every appended row.
pub struct ResultFile {
    path: PathBuf,
    format: OutputFormat,
    rows: Vec<MetricRow>,
    csv: Option<csv::Writer<File>>,
}

impl ResultFile {
    pub fn create(path: &Path, format: OutputFormat) -> Result<Self> {
        let mut f = ResultFile {
            path: path.to_path_buf(),
            format,
            rows: Vec::new(),
            csv: None,
        };
        match format {
            OutputFormat::Csv => {
                let mut w = csv::Writer::from_path(path).map_err(io)?;
                w.write_record(CSV_COLUMNS).map_err(io)?;
                w.flush()?;
                f.csv = Some(w);
            }
            OutputFormat::Json => f.rewrite()?,
        }
        Ok(f)
    }

    fn rewrite(&self) -> Result<()> {
        let tmp = self.path.with_extension("json.partial");
        emit_results(&self.rows, OutputFormat::Json, File::create(&tmp)?)?;
        std::fs::rename(&tmp, &self.path)?;
        Ok(())
    }

    pub fn push(&mut self, row: &MetricRow) -> Result<()> {
        self.rows.push(row.clone());
        match (self.format, self.csv.as_mut()) {
            (OutputFormat::Csv, Some(w)) => {
                w.write_record(csv_record(row)).map_err(io)?;
                w.flush()?;
                Ok(())
            }
            _ => self.rewrite(),
        }
    }
}

/// Aligned plain-text table of `rows`.
pub fn render_table(rows: &[MetricRow]) -> String {
    let header = [
        "key", "gamma", "m", "l", "k", "h", "r_bias", "r_sd", "r_rmse", "t_total", "fail",
    ];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        let total = r.t_sim1 + r.t_tune + r.t_fit + r.t_sim2 + r.t_estimate;
        cells.push(vec![
            r.key.clone(),
            r.gamma.to_string(),
            r.m.to_string(),
            r.l.to_string(),
            r.k.to_string(),
            r.h.to_string(),
            format!("{:.4}", r.r_bias),
            format!("{:.4}", r.r_sd),
            format!("{:.4}", r.r_rmse),
            format!("{total:.3}"),
            r.failures.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|j| cells.iter().map(|row| row[j].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
            .collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
    }
    s
}
