//! Subcommand implementations behind the `modinf` binary.
//!
//! Each command takes a validated [`Scenario`] and writes its artifacts to an
//! output directory. [`exit_code`] maps errors to the documented exit codes.

use crate::config::{ConfigError, Scenario, ScenarioConfig};
use crate::experiments::{self, ExperimentError, Report, ReportRow, RowContext, NEGATIVE_CONTROL_SUFFIX};
use crate::limits::{self, LimitError, LimitSummary, ModelVariant, TimePoint};
use crate::markov::MarkovError;
use crate::moments::{self, Integrator, MomentError};
use crate::sim::{Method, SampleBatch, SimError, Simulator};
use nalgebra::DMatrix;
use serde::Serialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_VERDICT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Limit(#[from] LimitError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Io { .. } | CliError::Config(ConfigError::Io { .. }) => EXIT_IO,
        CliError::Experiment(ExperimentError::IoFailure { .. }) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

/// Settings shared by all subcommands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub negative_control: bool,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn require_dir(out: &Path) -> Result<(), CliError> {
    if out.is_dir() {
        Ok(())
    } else {
        Err(CliError::Io {
            path: out.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        })
    }
}

/// Writes the exact configuration a run used, so it can be replayed.
pub fn write_effective_config(config: &ScenarioConfig, out: &Path) -> Result<PathBuf, CliError> {
    require_dir(out)?;
    let path = out.join("effective_config.toml");
    std::fs::write(&path, config.to_toml_string()).map_err(io(&path))?;
    Ok(path)
}

fn model_name(v: ModelVariant) -> String {
    v.to_string()
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TimeAnalytics {
    pub t: f64,
    pub rho: f64,
    pub sigma2: f64,
    /// Deviation-matrix part of `sigma2`, zero when `alpha > 1`.
    pub sigma2_modulation_term: f64,
    /// Poisson part of `sigma2`, zero when `alpha < 1`.
    pub sigma2_poisson_term: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_check: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Analytics {
    pub pi: Vec<f64>,
    pub deviation: Vec<Vec<f64>>,
    pub u: f64,
    pub uhat: f64,
    pub ucheck: f64,
    pub lambda_inf: f64,
    pub mu_inf: f64,
    pub gamma: f64,
    pub regime: limits::Regime,
    pub times: Vec<TimeAnalytics>,
    pub stationary: TimeAnalytics,
}

/// Closed-form quantities for the scenario; pure, no sampling.
pub fn analytics(scenario: &Scenario) -> Result<Analytics, CliError> {
    let cfg = &scenario.config;
    let spec = &scenario.spec;
    let analysis = scenario.generator.analyze()?;
    let limit = LimitSummary::new(&analysis, spec, cfg.alpha)?;
    let (lambda_inf, mu_inf) = limits::averaged_rates(&analysis.pi, spec);
    let u = limits::u_constant(&analysis, spec.lambda());
    let (uhat, ucheck) = limits::uhat_ucheck(&analysis, spec.lambda(), spec.mu());
    let at = |t: TimePoint| -> Result<TimeAnalytics, CliError> {
        let (v, c) = if spec.variant() == ModelVariant::ModelII {
            let m = limits::model2_matrices(&analysis, spec, cfg.alpha, t)?;
            (Some(matrix_rows(&m.v)), Some(matrix_rows(&m.c)))
        } else {
            (None, None)
        };
        let c_check = match (spec.uniform_mu(), cfg.offsets.is_empty()) {
            (Some(mu), false) => Some(matrix_rows(&limits::check_matrix(mu, u, lambda_inf, cfg.alpha, t, &cfg.offsets)?)),
            _ => None,
        };
        Ok(TimeAnalytics {
            t: t.as_f64(),
            rho: limit.rho(t),
            sigma2: limit.sigma2(t),
            sigma2_modulation_term: if limit.regime.modulation_term() { limit.sigma2_modulation(t) } else { 0.0 },
            sigma2_poisson_term: if limit.regime.poisson_term() { limit.rho(t) } else { 0.0 },
            v,
            c,
            c_check,
        })
    };
    Ok(Analytics {
        pi: analysis.pi.iter().copied().collect(),
        deviation: matrix_rows(&analysis.deviation),
        u,
        uhat,
        ucheck,
        lambda_inf,
        mu_inf,
        gamma: limits::gamma(cfg.alpha),
        regime: limit.regime,
        times: cfg.grid.iter().map(|&t| at(TimePoint::At(t))).collect::<Result<_, _>>()?,
        stationary: at(TimePoint::Stationary)?,
    })
}

/// `analyze`: writes `analysis.json`.
pub fn cmd_analyze(scenario: &Scenario, out: &Path) -> Result<Analytics, CliError> {
    require_dir(out)?;
    let a = analytics(scenario)?;
    let path = out.join("analysis.json");
    std::fs::write(&path, serde_json::to_string_pretty(&a).expect("analytics serialize")).map_err(io(&path))?;
    Ok(a)
}

fn simulator(scenario: &Scenario, idx: usize) -> Result<Simulator, CliError> {
    Ok(Simulator::new(
        scenario.generator.clone(),
        scenario.spec.clone(),
        scenario.scalings[idx],
        scenario.config.initial,
    )?)
}

/// `simulate`: one batch per `N`, written to `samples.csv` in long format.
pub fn cmd_simulate(scenario: &Scenario, out: &Path) -> Result<Vec<SampleBatch>, CliError> {
    require_dir(out)?;
    let cfg = &scenario.config;
    let path = out.join("samples.csv");
    let file = std::fs::File::create(&path).map_err(io(&path))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| CliError::Io { path: path.clone(), source: e.into() };
    let d = scenario.spec.dim();
    let typed = scenario.spec.variant() == ModelVariant::ModelII;
    let mut header: Vec<String> = ["N", "replication", "t", "count"].map(String::from).to_vec();
    if typed {
        header.extend((0..d).map(|j| format!("type{j}")));
    }
    w.write_record(&header).map_err(csv_err)?;
    let mut batches = Vec::new();
    for (i, sc) in scenario.scalings.iter().enumerate() {
        let batch = simulator(scenario, i)?.run_batch(&cfg.grid, cfg.replications, cfg.seed, cfg.method)?;
        for (r, row) in batch.counts.iter().enumerate() {
            for (k, &count) in row.iter().enumerate() {
                let mut rec = vec![sc.n_scale().to_string(), r.to_string(), batch.grid[k].to_string(), count.to_string()];
                if let Some(pt) = &batch.per_type {
                    rec.extend(pt[r][k].iter().map(u64::to_string));
                }
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        batches.push(batch);
    }
    w.flush().map_err(io(&path))?;
    Ok(batches)
}

/// One line of `moments.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    #[serde(rename = "N")]
    pub n: u64,
    pub t: f64,
    pub mean: f64,
    pub variance: f64,
    /// `N ρ(t)`.
    pub fluid_mean: f64,
    /// `N^{2γ} σ²(t)`.
    pub limit_variance: f64,
}

/// `moments`: exact means and variances per `N` and grid time, plus the
/// stationary values (`t = inf`), next to their large-`N` approximations.
pub fn cmd_moments(scenario: &Scenario, out: &Path) -> Result<Vec<MomentRow>, CliError> {
    require_dir(out)?;
    let cfg = &scenario.config;
    let analysis = scenario.generator.analyze()?;
    let limit = LimitSummary::new(&analysis, &scenario.spec, cfg.alpha)?;
    let mut rows = Vec::new();
    for sc in &scenario.scalings {
        let path = moments::moments(&scenario.generator, &scenario.spec, sc, cfg.initial, &cfg.grid, Integrator::Exponential)?;
        let stationary = moments::stationary_moments(&scenario.generator, &scenario.spec, sc, scenario.spec.variant())?;
        let n = sc.n();
        let scale = sc.normalizer().powi(2);
        for p in &path.points {
            let t = TimePoint::At(p.t);
            rows.push(MomentRow {
                n: sc.n_scale(),
                t: p.t,
                mean: p.mean,
                variance: p.variance,
                fluid_mean: n * limit.rho(t),
                limit_variance: scale * limit.sigma2(t),
            });
        }
        rows.push(MomentRow {
            n: sc.n_scale(),
            t: f64::INFINITY,
            mean: stationary.mean,
            variance: stationary.variance,
            fluid_mean: n * limit.rho_inf(),
            limit_variance: scale * limit.sigma2_inf(),
        });
    }
    let path = out.join("moments.csv");
    let file = std::fs::File::create(&path).map_err(io(&path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Io { path: path.clone(), source: e.into() })?;
    }
    w.flush().map_err(io(&path))?;
    Ok(rows)
}

/// Rows comparing a batch with the exact moment equations.
pub fn ode_rows(batch: &SampleBatch, ctx: &RowContext, path: &moments::MomentPath) -> Vec<ReportRow> {
    let r = batch.replications() as f64;
    let mut rows = Vec::new();
    for (k, pt) in path.points.iter().enumerate() {
        if pt.t == 0.0 {
            continue;
        }
        let col = batch.column(k);
        let var = experiments::sample_variance(&col);
        rows.push(ctx.row(pt.t, "ode_mean", experiments::mean(&col), pt.mean, (var / r).sqrt()));
        rows.push(ctx.row(pt.t, "ode_variance", var, pt.variance, experiments::variance_stderr(&col)));
    }
    rows
}

/// `clt`: LLN, CLT, moment-equation and (for 4+ scales) slope checks.
pub fn cmd_clt(scenario: &Scenario, opts: &RunOptions) -> Result<Report, CliError> {
    let cfg = &scenario.config;
    let spec = &scenario.spec;
    let tol = cfg.tolerances;
    let analysis = scenario.generator.analyze()?;
    let limit = LimitSummary::new(&analysis, spec, cfg.alpha)?;
    let mut report = Report::new(tol);
    let mut slope_points = Vec::new();
    let mut ode_slope_points = Vec::new();
    let t_last = cfg.grid[cfg.grid.len() - 1];

    for (i, sc) in scenario.scalings.iter().enumerate() {
        let ctx = RowContext {
            scenario_id: cfg.id.clone(),
            model: model_name(spec.variant()),
            alpha: cfg.alpha,
            n: sc.n_scale(),
        };
        let batch = simulator(scenario, i)?.run_batch(&cfg.grid, cfg.replications, cfg.seed, cfg.method)?;
        let rho: Vec<f64> = cfg.grid.iter().map(|&t| limit.rho(TimePoint::At(t))).collect();
        let rho_types: Option<Vec<Vec<f64>>> = cfg
            .grid
            .iter()
            .map(|&t| limit.rho_types(TimePoint::At(t)).map(|v| v.iter().copied().collect()))
            .collect();
        report.rows.extend(experiments::lln_check(&batch, &ctx, &rho, rho_types.as_deref())?);

        let ode = moments::moments(&scenario.generator, spec, sc, cfg.initial, &cfg.grid, Integrator::Exponential)?;
        report.rows.extend(ode_rows(&batch, &ctx, &ode));

        for (k, &t) in cfg.grid.iter().enumerate() {
            let sigma2 = limit.sigma2(TimePoint::At(t));
            if t == 0.0 || sigma2 <= 0.0 {
                continue;
            }
            let col = batch.column(k);
            let clt = experiments::clt_check(&col, &ctx, t, rho[k], sigma2, sc.gamma(), &tol)?;
            report.rows.extend(clt.rows);
            let ode_norm = ode.points[k].variance / sc.normalizer().powi(2);
            report.rows.push(ctx.row(t, "ode_asymptotic_variance", ode_norm, sigma2, 0.0));
            if let Some(types) = &rho_types {
                let m = limits::model2_matrices(&analysis, spec, cfg.alpha, TimePoint::At(t))?;
                report
                    .rows
                    .extend(experiments::type_covariance_rows(&batch, &ctx, k, &types[k], sc.gamma(), &m.c)?);
            }
            if opts.negative_control {
                let neg = RowContext { scenario_id: format!("{}{NEGATIVE_CONTROL_SUFFIX}", cfg.id), ..ctx.clone() };
                let wrong = experiments::clt_check(&col, &neg, t, rho[k], sigma2, 0.5, &tol)?;
                report.rows.extend(wrong.rows.into_iter().filter(|r| r.stat == "clt_variance"));
            }
        }
        let last = batch.grid.len() - 1;
        slope_points.push((sc.n(), experiments::sample_variance(&batch.column(last))));
        ode_slope_points.push((sc.n(), ode.points[last].variance));
    }

    if slope_points.len() >= 4 && t_last > 0.0 {
        let expected = experiments::expected_slope(cfg.alpha);
        let n_max = *cfg.n.iter().max().expect("nonempty");
        let ctx = RowContext { scenario_id: cfg.id.clone(), model: model_name(spec.variant()), alpha: cfg.alpha, n: n_max };
        let fit = experiments::variance_slope(&slope_points)?;
        report.rows.push(ctx.row(t_last, "variance_slope", fit.slope, expected, fit.stderr));
        let fit = experiments::variance_slope(&ode_slope_points)?;
        report.rows.push(ctx.row(t_last, "slope_from_moments", fit.slope, expected, fit.stderr));
    }
    Ok(report)
}

/// `cov`: joint counts at `t + s_1, …, t + s_K` on shared event-driven paths,
/// with `t` the first grid time. Needs a common service rate.
pub fn cmd_cov(scenario: &Scenario, _opts: &RunOptions) -> Result<Report, CliError> {
    let cfg = &scenario.config;
    let spec = &scenario.spec;
    let mu = spec.uniform_mu().ok_or_else(|| ConfigError::Invalid {
        field: "mu",
        message: "cross-time checks need identical service rates".into(),
    })?;
    if cfg.offsets.is_empty() {
        return Err(ConfigError::Invalid { field: "offsets", message: "at least one offset is required".into() }.into());
    }
    let t0 = cfg.grid[0];
    let times: Vec<f64> = cfg.offsets.iter().map(|s| t0 + s).collect();
    let analysis = scenario.generator.analyze()?;
    let (lambda_inf, _) = limits::averaged_rates(&analysis.pi, spec);
    let u = limits::u_constant(&analysis, spec.lambda());
    let theory = limits::check_matrix(mu, u, lambda_inf, cfg.alpha, TimePoint::At(t0), &cfg.offsets)?;
    let corr = DMatrix::from_fn(times.len(), times.len(), |a, b| {
        theory[(a, b)] / (theory[(a, a)] * theory[(b, b)]).sqrt()
    });
    let rho: Vec<f64> = times.iter().map(|&t| limits::rho_uniform(lambda_inf, mu, TimePoint::At(t))).collect();
    let mut report = Report::new(cfg.tolerances);
    for (i, sc) in scenario.scalings.iter().enumerate() {
        let ctx = RowContext {
            scenario_id: cfg.id.clone(),
            model: model_name(spec.variant()),
            alpha: cfg.alpha,
            n: sc.n_scale(),
        };
        let batch = simulator(scenario, i)?.run_batch(&times, cfg.replications, cfg.seed, Method::EventDriven)?;
        report.rows.extend(experiments::lln_check(&batch, &ctx, &rho, None)?);
        report
            .rows
            .extend(experiments::covariance_check(&batch, &ctx, t0, &rho, sc.gamma(), &theory, Some(&corr))?);
    }
    Ok(report)
}
