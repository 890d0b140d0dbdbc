//! `covar`: pricing, simulation, fitting and CoVaR estimation from TOML
//! configs.
//!
//! Exit codes: 0 success, 2 configuration or domain error, 3 runtime
//! failure, 4 unknown flag.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nested_covar::config::{Config, EstimatorKind, EstimatorSpec, Sizing};
use nested_covar::estimators::{
    decoupled_covar, fit_surfaces, two_level_sample, EstimateReport, LossModel, SurfaceMethod, SurfaceSource,
};
use nested_covar::harness::{
    compute_reference, ladder_slopes, render_table, run_experiment, run_spec, ExperimentPlan,
    OutputFormat, Reference, ResultFile,
};
use nested_covar::pricing::{
    barrier_uoc_price, bs_call_price, geometric_asian_call, heston_call_price, AsianFixings, HestonParams,
};
use nested_covar::rng::{tags, RngSeed};
use nested_covar::smoothers::{load_model_file, save_model_file, TuneOutcome};
use nested_covar::Error;

#[derive(Parser)]
#[command(name = "covar", version, about = "Nested Monte Carlo CoVaR estimation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; replaces `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "COVAR_THREADS")]
    threads: Option<usize>,
    /// Output file (directory for `fit`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Config edit `dotted.key=value`; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Report zero timings so output is byte-stable.
    #[arg(long, global = true)]
    no_timings: bool,
    /// Progress on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form option prices.
    Price {
        #[command(subcommand)]
        instrument: Instrument,
    },
    /// Outer scenarios with exact or inner-sampled conditional losses.
    Simulate {
        #[arg(long)]
        count: usize,
        /// Inner samples per scenario; exact losses when omitted.
        #[arg(long)]
        inner: Option<usize>,
    },
    /// Stage 1 only: fit both surfaces and save them to the `--out` directory.
    Fit,
    /// One estimate of the configured estimator.
    Estimate {
        /// Directory with `mu.cvsm` and `pi.cvsm` from `fit`.
        #[arg(long)]
        fitted: Option<PathBuf>,
    },
    /// Replicated study over the configured rows.
    Experiment,
    /// Ground-truth CoVaR.
    Reference,
    /// Cross-validation tables of both surfaces.
    Tune,
}

#[derive(Subcommand)]
enum Instrument {
    /// European call.
    Bs {
        #[arg(long)]
        s: f64,
        #[arg(long)]
        k: f64,
        #[arg(long, default_value_t = 0.0)]
        r: f64,
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        #[arg(long)]
        ttm: f64,
    },
    /// Up-and-out call.
    Barrier {
        #[arg(long)]
        s: f64,
        #[arg(long)]
        k: f64,
        #[arg(long)]
        b: f64,
        #[arg(long, default_value_t = 0.0)]
        r: f64,
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        ttm: f64,
    },
    /// Call under stochastic variance.
    Heston {
        #[arg(long)]
        s: f64,
        #[arg(long)]
        k: f64,
        #[arg(long, default_value_t = 0.0)]
        r: f64,
        #[arg(long)]
        ttm: f64,
        #[arg(long)]
        kappa: f64,
        #[arg(long)]
        theta: f64,
        #[arg(long)]
        sigma_v: f64,
        #[arg(long, allow_hyphen_values = true)]
        rho: f64,
        #[arg(long)]
        v0: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        lambda: f64,
    },
    /// Geometric average call on equally spaced fixings.
    Asian {
        #[arg(long)]
        s: f64,
        #[arg(long)]
        k: f64,
        #[arg(long, default_value_t = 0.0)]
        r: f64,
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        #[arg(long)]
        ttm: f64,
        #[arg(long)]
        fixings: usize,
    },
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::Domain(_)
            | Error::KnockedOut { .. }
            | Error::DimensionMismatch { .. }
            | Error::ShapeMismatch(_)
            | Error::InfeasibleBudget(_)
            | Error::VersionMismatch { .. }
            | Error::CorruptArtifact(_)
            | Error::EmptyInput => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: msg.into(),
    }
}

fn io_error(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 3,
        message: e.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                ErrorKind::UnknownArgument => 4,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    if let Some(n) = g.threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(io_error)?;
    }
    match &cli.command {
        Command::Price { instrument } => price(instrument),
        Command::Simulate { count, inner } => simulate(g, *count, *inner),
        Command::Fit => fit(g),
        Command::Estimate { fitted } => estimate(g, fitted.as_deref()),
        Command::Experiment => experiment(g),
        Command::Reference => reference(g),
        Command::Tune => tune_cmd(g),
    }
}

/// Rounds to 10 significant digits for display.
fn sig10(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.9e}").parse().expect("formatted float parses")
}

fn price(inst: &Instrument) -> CliResult<()> {
    let v = match *inst {
        Instrument::Bs { s, k, r, sigma, ttm } => bs_call_price(s, k, r, sigma, ttm)?,
        Instrument::Barrier { s, k, b, r, sigma, ttm } => match barrier_uoc_price(s, k, b, r, sigma, ttm) {
            Err(Error::KnockedOut { spot, barrier }) => {
                eprintln!("note: knocked out (spot {spot} >= barrier {barrier})");
                0.0
            }
            other => other?,
        },
        Instrument::Heston {
            s,
            k,
            r,
            ttm,
            kappa,
            theta,
            sigma_v,
            rho,
            v0,
            lambda,
        } => {
            let p = HestonParams {
                kappa,
                theta,
                sigma_v,
                rho,
                v0,
                lambda_h: lambda,
            };
            heston_call_price(s, &p, k, r, ttm)?
        }
        Instrument::Asian {
            s,
            k,
            r,
            sigma,
            ttm,
            fixings,
        } => {
            if fixings == 0 || !(ttm > 0.0) {
                return Err(config_error("asian needs --fixings >= 1 and --ttm > 0"));
            }
            let f = AsianFixings {
                known_log_sum: 0.0,
                known_count: 0,
                future_times: (1..=fixings).map(|i| ttm * i as f64 / fixings as f64).collect(),
            };
            geometric_asian_call(s, &f, 0.0, ttm, r, sigma, k)?
        }
    };
    println!("{}", sig10(v));
    Ok(())
}

fn load_config(g: &Global) -> CliResult<Config> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| config_error("this command needs --config <file>"))?;
    if !path.exists() {
        return Err(config_error(format!("config file not found: {}", path.display())));
    }
    let mut c = Config::load(path, &g.overrides)?;
    if let Some(s) = g.seed {
        c.seed = s;
    }
    Ok(c)
}

fn estimator(c: &Config) -> CliResult<EstimatorSpec> {
    c.estimator
        .clone()
        .ok_or_else(|| config_error("config has no [estimator] section"))
}

fn write_out(g: &Global, content: &str) -> CliResult<()> {
    match &g.out {
        Some(p) => std::fs::write(p, content).map_err(|e| io_error(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(content.as_bytes()).map_err(io_error)
        }
    }
}

fn to_json(v: &impl Serialize) -> CliResult<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(io_error)
}

fn simulate(g: &Global, count: usize, inner: Option<usize>) -> CliResult<()> {
    let c = load_config(g)?;
    let problem = c.problem.build()?;
    let d = problem.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("z{j}")).collect();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    match inner {
        Some(l) => {
            header.extend(["x_bar".to_string(), "y_bar".to_string()]);
            let (z, means) = two_level_sample(&problem, count, l, RngSeed(c.seed))?;
            for (i, (x, y)) in means.into_iter().enumerate() {
                let mut r = z.row(i).to_vec();
                r.extend([x, y]);
                rows.push(r);
            }
        }
        None => {
            header.extend(["mu".to_string(), "pi".to_string()]);
            let seed = RngSeed(c.seed).derive(tags::STAGE2_OUTER);
            for i in 0..count as u64 {
                let mut z = problem.outer(seed, i);
                let (x, y) = problem.exact(&z)?;
                z.extend([x, y]);
                rows.push(z);
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(io_error)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(io_error)?;
    }
    let bytes = w.into_inner().map_err(io_error)?;
    write_out(g, &String::from_utf8(bytes).map_err(io_error)?)
}

fn stage1_method(c: &Config, spec: &EstimatorSpec) -> CliResult<(nested_covar::estimators::EstimatorConfig, SurfaceMethod)> {
    let problem = c.problem.build()?;
    let method = spec.surface_method(&problem)?;
    let s = spec.sizing()?;
    if s.m == 0 || s.l == 0 {
        return Err(config_error("stage 1 needs m and l (set a budget or m/l explicitly)"));
    }
    let cfg = spec.estimator_config(c.alpha, c.beta, c.seed)?;
    Ok((cfg, method))
}

#[derive(Serialize)]
struct FitSummary<'a> {
    family: &'a str,
    m: usize,
    l: usize,
    mu: &'a serde_json::Value,
    pi: &'a serde_json::Value,
    t_sim1: f64,
    t_tune: f64,
    t_fit: f64,
}

fn fit(g: &Global) -> CliResult<()> {
    let c = load_config(g)?;
    let spec = estimator(&c)?;
    let dir = g
        .out
        .as_ref()
        .ok_or_else(|| config_error("fit needs --out <directory>"))?;
    let (cfg, method) = stage1_method(&c, &spec)?;
    let problem = c.problem.build()?;
    let f = fit_surfaces(&problem, &cfg, &method)?;
    std::fs::create_dir_all(dir).map_err(|e| io_error(format!("cannot create {}: {e}", dir.display())))?;
    save_model_file(&f.mu, &dir.join("mu.cvsm"))?;
    save_model_file(&f.pi, &dir.join("pi.cvsm"))?;
    let t = if g.no_timings { Default::default() } else { f.timings };
    let summary = FitSummary {
        family: f.mu.family.name(),
        m: cfg.m,
        l: cfg.l,
        mu: &f.mu.meta.hyperparameters,
        pi: &f.pi.meta.hyperparameters,
        t_sim1: t.sim1,
        t_tune: t.tune,
        t_fit: t.fit,
    };
    print!("{}", to_json(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct EstimateOutput {
    estimator: String,
    coupling: &'static str,
    family: String,
    sizing: Sizing,
    #[serde(flatten)]
    report: EstimateReport,
}

fn estimate(g: &Global, fitted: Option<&Path>) -> CliResult<()> {
    let c = load_config(g)?;
    let spec = estimator(&c)?;
    let problem = c.problem.build()?;
    let (mut report, sizing, family) = match fitted {
        Some(dir) => {
            if spec.kind != EstimatorKind::Decoupled {
                return Err(config_error("--fitted needs a decoupled estimator"));
            }
            let mu = load_model_file(&dir.join("mu.cvsm"))?;
            let pi = load_model_file(&dir.join("pi.cvsm"))?;
            // Only k and h matter here; Stage 1 is skipped.
            let mut online = spec.clone();
            online.oracle = true;
            let cfg = online.estimator_config(c.alpha, c.beta, c.seed)?;
            let family = mu.family.name().to_string();
            let r = decoupled_covar(&problem, &cfg, &SurfaceSource::Fitted(Box::new(mu), Box::new(pi)))?;
            (r, online.sizing()?, family)
        }
        None => (
            run_spec(&problem, &spec, c.alpha, c.beta, c.seed)?,
            spec.sizing()?,
            spec.family_label(),
        ),
    };
    report.concomitants = None;
    if g.no_timings {
        report.timings = Default::default();
    }
    let out = EstimateOutput {
        estimator: spec.key(),
        coupling: spec.kind.label(),
        family,
        sizing,
        report,
    };
    write_out(g, &to_json(&out)?)
}

fn output_format(g: &Global) -> OutputFormat {
    match g.format {
        Some(Format::Csv) => OutputFormat::Csv,
        Some(Format::Json) => OutputFormat::Json,
        None => match g.out.as_ref().and_then(|p| p.extension()).and_then(|e| e.to_str()) {
            Some("json") => OutputFormat::Json,
            _ => OutputFormat::Csv,
        },
    }
}

fn describe_reference(r: &Reference) -> String {
    match r.source.as_str() {
        "batching" => format!(
            "reference {:.6} (batching, n = {}, {} replications, half-width {:.3e})",
            r.value, r.n, r.replications, r.half_width
        ),
        src => format!("reference {:.6} ({src})", r.value),
    }
}

fn experiment(g: &Global) -> CliResult<()> {
    let c = load_config(g)?;
    let (plan, reference) = ExperimentPlan::from_config(&c, !g.no_timings)?;
    println!("{}", describe_reference(&reference));
    let mut file = match &g.out {
        Some(p) => Some(ResultFile::create(p, output_format(g))?),
        None => None,
    };
    let verbose = g.verbose > 0;
    let rows = run_experiment(&plan, |row| {
        if verbose {
            eprintln!("done {} (r_rmse {:.4}, {} failed)", row.key, row.r_rmse, row.failures);
        }
        match file.as_mut() {
            Some(f) => f.push(row),
            None => Ok(()),
        }
    })?;
    print!("{}", render_table(&rows));
    for (label, fit) in ladder_slopes(&rows) {
        println!(
            "slope {label}: {:.4} (se {:.4}, {} points)",
            fit.slope, fit.slope_se, fit.points
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| r.failures > 0).map(|r| r.key.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        for r in rows.iter().filter(|r| r.failures > 0) {
            eprintln!(
                "row {}: {} of {} replications failed: {}",
                r.key,
                r.failures,
                r.replications,
                r.error.as_deref().unwrap_or("")
            );
        }
        Err(Failure {
            code: 3,
            message: format!("{} row(s) had failures: {}", failed.len(), failed.join(", ")),
        })
    }
}

fn reference(g: &Global) -> CliResult<()> {
    let c = load_config(g)?;
    let problem = c.problem.build()?;
    // Estimated by batching even when a value or closed form is configured.
    let r = compute_reference(&problem, c.alpha, c.beta, &c.reference, c.seed)?;
    write_out(g, &to_json(&r)?)
}

#[derive(Serialize)]
struct TuneReport {
    mu: TuneOutcome,
    pi: TuneOutcome,
}

fn tune_cmd(g: &Global) -> CliResult<()> {
    let c = load_config(g)?;
    let spec = estimator(&c)?;
    let (cfg, method) = stage1_method(&c, &spec)?;
    if matches!(method, SurfaceMethod::Fixed(_)) {
        return Err(config_error("tune needs a family grid, not a fixed candidate"));
    }
    let problem = c.problem.build()?;
    let f = fit_surfaces(&problem, &cfg, &method)?;
    let [mu, pi] = f.tuning.ok_or_else(|| config_error("no tuning was run"))?;
    write_out(g, &to_json(&TuneReport { mu, pi })?)
}
