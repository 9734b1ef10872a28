//! Statistical checks of sample batches against theory, and report output.
//!
//! Every check produces [`ReportRow`]s holding both the empirical and the
//! theoretical number. Verdicts are recomputed from those rows alone by
//! [`evaluate`], so a report read back from CSV reproduces its own verdicts.
//!
//! No rate of convergence is known for these limits. The default bands in
//! [`Tolerances`] are engineering choices sized for `N ≤ 10⁴`, `R ≤ 10⁵`.

use crate::sim::SampleBatch;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),
    #[error("theoretical variance is zero; normalized samples are degenerate")]
    DegenerateVariance,
    #[error("slope fit needs at least 4 values of N, got {0}")]
    InsufficientPoints(usize),
    #[error("{got} replications is below the minimum of {need}")]
    TooFewReplications { got: usize, need: usize },
    #[error("cannot write {path}: {source}")]
    IoFailure { path: PathBuf, source: std::io::Error },
    #[error("malformed report: {0}")]
    Malformed(String),
}

/// Minimum replications for a CLT check.
pub const MIN_CLT_REPLICATIONS: usize = 1000;

/// Acceptance bands. All are overridable from the scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative band for variance ratios.
    pub variance: f64,
    /// Absolute band for fitted variance exponents.
    pub slope: f64,
    /// Asymptotic one-sample KS coefficient at the 1% level.
    pub ks_coefficient: f64,
    /// Multiplier applied to the KS critical distance.
    pub ks_allowance: f64,
    /// Relative slack added to the LLN standard-error band.
    pub lln_relative: f64,
    /// Standard errors allowed for mean comparisons.
    pub standard_errors: f64,
    /// Relative band for covariance entries.
    pub covariance: f64,
    /// Absolute band for correlations.
    pub correlation: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            variance: 0.15,
            slope: 0.15,
            ks_coefficient: 1.628,
            ks_allowance: 1.0,
            lln_relative: 0.02,
            standard_errors: 3.0,
            covariance: 0.15,
            correlation: 0.05,
        }
    }
}

/// One `(scenario, N, t, statistic)` record. CSV column order is fixed:
/// `scenario_id,model,alpha,N,t,stat,empirical,theory,stderr`.
///
/// For `clt_ks` rows `theory` holds the critical distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario_id: String,
    pub model: String,
    pub alpha: f64,
    #[serde(rename = "N")]
    pub n: u64,
    pub t: f64,
    pub stat: String,
    pub empirical: f64,
    pub theory: f64,
    pub stderr: f64,
}

/// Identifies the scenario a set of rows belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct RowContext {
    pub scenario_id: String,
    pub model: String,
    pub alpha: f64,
    pub n: u64,
}

impl RowContext {
    pub fn row(&self, t: f64, stat: impl Into<String>, empirical: f64, theory: f64, stderr: f64) -> ReportRow {
        ReportRow {
            scenario_id: self.scenario_id.clone(),
            model: self.model.clone(),
            alpha: self.alpha,
            n: self.n,
            t,
            stat: stat.into(),
            empirical,
            theory,
            stderr,
        }
    }
}

/// Suffix marking scenarios that are expected to fail.
pub const NEGATIVE_CONTROL_SUFFIX: &str = "-negative-control";

/// Outcome of one gated check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub scenario_id: String,
    pub check: String,
    #[serde(rename = "N")]
    pub n: u64,
    pub t: f64,
    pub passed: bool,
    /// Negative controls succeed by failing.
    pub expect_fail: bool,
    /// Largest violation margin seen, as a fraction of the allowed band (`≤ 1` passes).
    pub worst: f64,
}

impl CheckOutcome {
    pub fn ok(&self) -> bool {
        self.passed != self.expect_fail
    }
}

// ---- basic statistics ----

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the sample variance from the fourth central moment.
pub fn variance_stderr(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    ((m4 - m2 * m2).max(0.0) / n).sqrt()
}

pub fn sample_covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the sample covariance, from the variance of the centred products.
pub fn covariance_stderr(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    (sample_variance(&prods) / xs.len() as f64).sqrt()
}

/// CDF of `Normal(0, variance)`.
pub fn normal_cdf(x: f64, variance: f64) -> f64 {
    0.5 * erfc(-x / (2.0 * variance).sqrt())
}

/// Kolmogorov–Smirnov distance between the empirical law of `samples` and `cdf`.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Two-sample KS distance; ties are handled by stepping over distinct values.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Critical distance `c √((n+m)/(nm))` for a two-sample KS test.
pub fn ks_two_sample_critical(coefficient: f64, n: usize, m: usize) -> f64 {
    coefficient * ((n + m) as f64 / (n * m) as f64).sqrt()
}

// ---- checks ----

/// Per-grid-point LLN rows: `mean/N` against `ρ(t)`, for totals and
/// optionally per type.
pub fn lln_check(
    batch: &SampleBatch,
    ctx: &RowContext,
    rho: &[f64],
    rho_types: Option<&[Vec<f64>]>,
) -> Result<Vec<ReportRow>, ExperimentError> {
    if rho.len() != batch.grid.len() {
        return Err(ExperimentError::ScenarioMismatch(format!(
            "{} theory values for {} grid points",
            rho.len(),
            batch.grid.len()
        )));
    }
    let n = ctx.n as f64;
    let r = batch.replications() as f64;
    let se = |col: &[f64]| if col.len() > 1 { (sample_variance(col) / r).sqrt() / n } else { 0.0 };
    let mut rows = Vec::new();
    for (k, &t) in batch.grid.iter().enumerate() {
        let col = batch.column(k);
        rows.push(ctx.row(t, "lln_mean", mean(&col) / n, rho[k], se(&col)));
        if let Some(types) = rho_types {
            for (j, rho_j) in types[k].iter().enumerate() {
                let col = batch.type_column(k, j).ok_or_else(|| {
                    ExperimentError::ScenarioMismatch("per-type theory for a batch without types".into())
                })?;
                rows.push(ctx.row(t, format!("lln_mean_type{j}"), mean(&col) / n, *rho_j, se(&col)));
            }
        }
    }
    Ok(rows)
}

/// Normalizes counts as `(M − Nρ) / N^γ`.
pub fn normalize(counts: &[f64], n: f64, rho: f64, gamma: f64) -> Vec<f64> {
    let scale = n.powf(gamma);
    counts.iter().map(|&m| (m - n * rho) / scale).collect()
}

/// Result of a one-time CLT check.
#[derive(Debug, Clone, PartialEq)]
pub struct CltOutcome {
    pub ks: f64,
    pub ks_critical: f64,
    pub variance_ratio: f64,
    pub rows: Vec<ReportRow>,
}

/// CLT rows at one time: normalized variance against `σ²`, and KS distance
/// against the fully specified `Normal(0, σ²)`.
pub fn clt_check(
    counts: &[f64],
    ctx: &RowContext,
    t: f64,
    rho: f64,
    sigma2: f64,
    gamma: f64,
    tol: &Tolerances,
) -> Result<CltOutcome, ExperimentError> {
    if counts.len() < MIN_CLT_REPLICATIONS {
        return Err(ExperimentError::TooFewReplications { got: counts.len(), need: MIN_CLT_REPLICATIONS });
    }
    if sigma2 <= 0.0 {
        return Err(ExperimentError::DegenerateVariance);
    }
    let z = normalize(counts, ctx.n as f64, rho, gamma);
    let r = z.len() as f64;
    let var = sample_variance(&z);
    let ks = ks_one_sample(&z, |x| normal_cdf(x, sigma2));
    let ks_critical = tol.ks_allowance * tol.ks_coefficient / r.sqrt();
    let rows = vec![
        ctx.row(t, "clt_mean", mean(&z), 0.0, (var / r).sqrt()),
        ctx.row(t, "clt_variance", var, sigma2, variance_stderr(&z)),
        ctx.row(t, "clt_ks", ks, ks_critical, 0.0),
    ];
    Ok(CltOutcome { ks, ks_critical, variance_ratio: var / sigma2, rows })
}

/// Least-squares line through `(ln N, ln Var)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

pub fn variance_slope(points: &[(f64, f64)]) -> Result<SlopeFit, ExperimentError> {
    if points.len() < 4 {
        return Err(ExperimentError::InsufficientPoints(points.len()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let stderr = (rss / (points.len() as f64 - 2.0) / sxx).sqrt();
    Ok(SlopeFit { slope, stderr, intercept })
}

/// The slope exponent `max(1, 2 − α)`.
pub fn expected_slope(alpha: f64) -> f64 {
    (2.0 - alpha).max(1.0)
}

/// Cross-time covariance rows for a batch observed at `t + s_1, …, t + s_K`.
///
/// `cov_k_l` rows compare normalized covariances with `theory`. When
/// `correlation_theory` is given, `corr_k_l` rows compare correlations too.
pub fn covariance_check(
    batch: &SampleBatch,
    ctx: &RowContext,
    t: f64,
    rho: &[f64],
    gamma: f64,
    theory: &nalgebra::DMatrix<f64>,
    correlation_theory: Option<&nalgebra::DMatrix<f64>>,
) -> Result<Vec<ReportRow>, ExperimentError> {
    let k = batch.grid.len();
    if theory.shape() != (k, k) || rho.len() != k {
        return Err(ExperimentError::ScenarioMismatch(format!(
            "theory is {:?} for {} observation times",
            theory.shape(),
            k
        )));
    }
    let n = ctx.n as f64;
    let z: Vec<Vec<f64>> = (0..k).map(|i| normalize(&batch.column(i), n, rho[i], gamma)).collect();
    let mut rows = Vec::new();
    for a in 0..k {
        for b in 0..=a {
            let c = sample_covariance(&z[a], &z[b]);
            rows.push(ctx.row(t, format!("cov_{a}_{b}"), c, theory[(a, b)], covariance_stderr(&z[a], &z[b])));
            if let (Some(corr), true) = (correlation_theory, a != b) {
                let r = c / (sample_variance(&z[a]) * sample_variance(&z[b])).sqrt();
                let se = (1.0 - r * r) / (z[a].len() as f64).sqrt();
                rows.push(ctx.row(t, format!("corr_{a}_{b}"), r, corr[(a, b)], se));
            }
        }
    }
    Ok(rows)
}

/// Per-type covariance rows (`typecov_j_k`) at grid point `k`, normalized by `N^{2γ}`.
pub fn type_covariance_rows(
    batch: &SampleBatch,
    ctx: &RowContext,
    k: usize,
    rho_types: &[f64],
    gamma: f64,
    theory: &nalgebra::DMatrix<f64>,
) -> Result<Vec<ReportRow>, ExperimentError> {
    let d = rho_types.len();
    let n = ctx.n as f64;
    let t = batch.grid[k];
    let cols = (0..d)
        .map(|j| batch.type_column(k, j).map(|c| normalize(&c, n, rho_types[j], gamma)))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| ExperimentError::ScenarioMismatch("batch carries no per-type counts".into()))?;
    let mut rows = Vec::new();
    for a in 0..d {
        for b in 0..=a {
            let c = sample_covariance(&cols[a], &cols[b]);
            rows.push(ctx.row(t, format!("typecov_{a}_{b}"), c, theory[(a, b)], covariance_stderr(&cols[a], &cols[b])));
        }
    }
    Ok(rows)
}

// ---- verdicts ----

/// Band test for one covariance-type family: every entry within
/// `max(band·|theory|, band·max diagonal)`.
fn matrix_band(rows: &[&ReportRow], prefix: &str, band: f64) -> f64 {
    let max_diag = rows
        .iter()
        .filter(|r| {
            let idx: Vec<&str> = r.stat[prefix.len()..].split('_').collect();
            idx.len() == 2 && idx[0] == idx[1]
        })
        .map(|r| r.theory.abs())
        .fold(0.0, f64::max);
    rows.iter()
        .map(|r| (r.empirical - r.theory).abs() / (band * r.theory.abs()).max(band * max_diag))
        .fold(0.0, f64::max)
}

fn family(stat: &str) -> Option<&'static str> {
    let families = [
        ("lln_mean", "lln"),
        ("clt_variance", "clt_variance"),
        ("clt_ks", "clt_ks"),
        ("variance_slope", "variance_slope"),
        ("cov_", "covariance"),
        ("corr_", "correlation"),
        ("typecov_", "type_covariance"),
        ("ode_mean", "ode_consistency"),
        ("ode_variance", "ode_consistency"),
        ("ode_asymptotic", "asymptotic_band"),
    ];
    families.iter().find(|(p, _)| stat.starts_with(p)).map(|&(_, f)| f)
}

/// Recomputes every verdict from rows alone.
///
/// LLN checks are grouped over all grid times of an `(scenario, N)` pair;
/// every other check is grouped per `(scenario, N, t)`. Rows whose statistic
/// is not gated (for example `clt_mean`) are ignored.
pub fn evaluate(rows: &[ReportRow], tol: &Tolerances) -> Vec<CheckOutcome> {
    let mut groups: BTreeMap<(String, &'static str, u64, u64), Vec<&ReportRow>> = BTreeMap::new();
    for row in rows {
        if let Some(f) = family(&row.stat) {
            let t_key = if f == "lln" { 0 } else { row.t.to_bits() };
            groups.entry((row.scenario_id.clone(), f, row.n, t_key)).or_default().push(row);
        }
    }
    groups
        .into_iter()
        .map(|((scenario_id, check, n, t_key), rows)| {
            let worst = match check {
                "lln" => rows
                    .iter()
                    .map(|r| {
                        let allowed = tol.standard_errors * r.stderr + tol.lln_relative * r.theory.abs();
                        margin(r.empirical - r.theory, allowed)
                    })
                    .fold(0.0, f64::max),
                "clt_variance" | "asymptotic_band" => rows
                    .iter()
                    .map(|r| margin(r.empirical / r.theory - 1.0, tol.variance))
                    .fold(0.0, f64::max),
                "clt_ks" => rows.iter().map(|r| margin(r.empirical, r.theory)).fold(0.0, f64::max),
                "variance_slope" => rows.iter().map(|r| margin(r.empirical - r.theory, tol.slope)).fold(0.0, f64::max),
                "covariance" => matrix_band(&rows, "cov_", tol.covariance),
                "type_covariance" => matrix_band(&rows, "typecov_", tol.covariance),
                "correlation" => rows
                    .iter()
                    .map(|r| margin(r.empirical - r.theory, tol.correlation))
                    .fold(0.0, f64::max),
                "ode_consistency" => rows
                    .iter()
                    .map(|r| margin(r.empirical - r.theory, tol.standard_errors * r.stderr))
                    .fold(0.0, f64::max),
                _ => unreachable!(),
            };
            let t = if check == "lln" { rows[0].t } else { f64::from_bits(t_key) };
            CheckOutcome {
                expect_fail: scenario_id.ends_with(NEGATIVE_CONTROL_SUFFIX),
                scenario_id,
                check: check.to_string(),
                n,
                t,
                passed: worst <= 1.0,
                worst,
            }
        })
        .collect()
}

fn margin(diff: f64, allowed: f64) -> f64 {
    if allowed > 0.0 {
        diff.abs() / allowed
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

// ---- reports ----

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub all_ok: bool,
    pub tolerances: Tolerances,
    pub note: String,
    pub checks: Vec<CheckOutcome>,
}

const TOLERANCE_NOTE: &str = "Limit theorems give no convergence rate; tolerance bands are engineering choices.";

impl Report {
    pub fn new(tolerances: Tolerances) -> Self {
        Self { rows: Vec::new(), tolerances }
    }

    pub fn checks(&self) -> Vec<CheckOutcome> {
        evaluate(&self.rows, &self.tolerances)
    }

    /// True when every check passes, and every negative control fails.
    pub fn all_ok(&self) -> bool {
        self.checks().iter().all(CheckOutcome::ok)
    }

    pub fn summary(&self) -> Summary {
        let checks = self.checks();
        Summary {
            all_ok: checks.iter().all(CheckOutcome::ok),
            tolerances: self.tolerances,
            note: TOLERANCE_NOTE.to_string(),
            checks,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::IoFailure { path: path.to_path_buf(), source }
}

/// Writes `rows` as CSV; an empty slice yields the header line only.
pub fn write_rows_csv(rows: &[ReportRow], path: &Path) -> Result<(), ExperimentError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| ExperimentError::IoFailure { path: path.to_path_buf(), source: e.into() };
    w.write_record(["scenario_id", "model", "alpha", "N", "t", "stat", "empirical", "theory", "stderr"])
        .map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ReportRow>, ExperimentError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| ExperimentError::Malformed(e.to_string()))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| ExperimentError::Malformed(e.to_string()))
}

/// Writes `<dir>/<stem>.csv` and `<dir>/<stem>.json`. The directory must exist.
pub fn emit_report(report: &Report, dir: &Path, stem: &str) -> Result<Summary, ExperimentError> {
    if !dir.is_dir() {
        return Err(ExperimentError::IoFailure {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        });
    }
    write_rows_csv(&report.rows, &dir.join(format!("{stem}.csv")))?;
    let summary = report.summary();
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&json_path, text).map_err(io_err(&json_path))?;
    Ok(summary)
}
