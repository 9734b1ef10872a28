//! Closed-form limit quantities under the `(N, α)` scaling.
//!
//! Arrival rates are multiplied by `N` and the background generator by
//! `N^α`. The centred count `(M − Nρ(t)) / N^γ` with `γ = max(1 − α/2, ½)`
//! has a Normal limit. Its variance is made of a *modulation* part, present
//! when `α ≤ 1` and built from the deviation matrix, and a *Poisson* part,
//! present when `α ≥ 1`. At `α = 1` both parts are summed.

use crate::markov::ChainAnalysis;
use crate::quadrature;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LimitError {
    #[error("{what} has length {got}, expected {expected}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid {what}[{index}] = {value}")]
    InvalidRate { what: &'static str, index: usize, value: f64 },
    #[error("scaling exponent alpha must be finite and > 0, got {0}")]
    InvalidAlpha(f64),
    #[error("scale N must be >= 1")]
    InvalidScale,
    #[error("time must be finite and nonnegative, got {0}")]
    InvalidTime(f64),
    #[error("cross-time covariance needs s <= t, got s = {s}, t = {t}")]
    OrderViolation { s: f64, t: f64 },
    #[error("offsets must be nonnegative and nondecreasing")]
    UnsortedOffsets,
    #[error("service rates must be identical across states")]
    NonUniformRates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    /// Every job in the system leaves at the hazard rate of the current state.
    #[serde(rename = "I")]
    ModelI,
    /// A job's service rate is fixed by the state seen on arrival.
    #[serde(rename = "II")]
    ModelII,
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelVariant::ModelI => f.write_str("I"),
            ModelVariant::ModelII => f.write_str("II"),
        }
    }
}

/// Per-state arrival and service rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    lambda: DVector<f64>,
    mu: DVector<f64>,
    variant: ModelVariant,
}

impl ModelSpec {
    /// Arrival rates must be nonnegative, service rates positive.
    ///
    /// An all-zero arrival vector is accepted; it describes an empty system.
    pub fn new(lambda: Vec<f64>, mu: Vec<f64>, variant: ModelVariant) -> Result<Self, LimitError> {
        if mu.len() != lambda.len() {
            return Err(LimitError::DimensionMismatch {
                what: "mu",
                expected: lambda.len(),
                got: mu.len(),
            });
        }
        if lambda.is_empty() {
            return Err(LimitError::DimensionMismatch { what: "lambda", expected: 1, got: 0 });
        }
        for (index, &value) in lambda.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(LimitError::InvalidRate { what: "lambda", index, value });
            }
        }
        for (index, &value) in mu.iter().enumerate() {
            if !value.is_finite() || value <= 0.0 {
                return Err(LimitError::InvalidRate { what: "mu", index, value });
            }
        }
        Ok(Self { lambda: DVector::from_vec(lambda), mu: DVector::from_vec(mu), variant })
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }
    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }
    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }
    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn with_variant(&self, variant: ModelVariant) -> Self {
        Self { variant, ..self.clone() }
    }

    /// The common service rate, if all states share one.
    pub fn uniform_mu(&self) -> Option<f64> {
        let m0 = self.mu[0];
        self.mu.iter().all(|&m| m == m0).then_some(m0)
    }

    pub fn check_dim(&self, analysis: &ChainAnalysis) -> Result<(), LimitError> {
        if analysis.dim() != self.dim() {
            return Err(LimitError::DimensionMismatch {
                what: "lambda",
                expected: analysis.dim(),
                got: self.dim(),
            });
        }
        Ok(())
    }
}

/// Normalization exponent `γ(α) = max(1 − α/2, ½)`.
pub fn gamma(alpha: f64) -> f64 {
    (1.0 - alpha / 2.0).max(0.5)
}

/// Scale `N` and switching exponent `α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    n_scale: u64,
    alpha: f64,
}

impl Scaling {
    pub fn new(n_scale: u64, alpha: f64) -> Result<Self, LimitError> {
        if n_scale == 0 {
            return Err(LimitError::InvalidScale);
        }
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(LimitError::InvalidAlpha(alpha));
        }
        Ok(Self { n_scale, alpha })
    }

    pub fn n_scale(&self) -> u64 {
        self.n_scale
    }
    pub fn n(&self) -> f64 {
        self.n_scale as f64
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn gamma(&self) -> f64 {
        gamma(self.alpha)
    }
    /// Factor `N^α` applied to the background generator.
    pub fn switching_factor(&self) -> f64 {
        self.n().powf(self.alpha)
    }
    /// `N^γ`, the CLT normalization.
    pub fn normalizer(&self) -> f64 {
        self.n().powf(self.gamma())
    }
    pub fn regime(&self) -> Regime {
        Regime::of(self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// `α < 1`: modulation dominates, variance grows like `N^{2−α}`.
    SlowSwitching,
    /// `α = 1`: both contributions are of order `N`.
    Critical,
    /// `α > 1`: the queue behaves like M/M/∞, variance grows like `N`.
    FastSwitching,
}

impl Regime {
    pub fn of(alpha: f64) -> Self {
        if alpha < 1.0 {
            Regime::SlowSwitching
        } else if alpha > 1.0 {
            Regime::FastSwitching
        } else {
            Regime::Critical
        }
    }
    /// Indicator `1{α ≤ 1}` of the deviation-matrix term.
    pub fn modulation_term(self) -> bool {
        self != Regime::FastSwitching
    }
    /// Indicator `1{α ≥ 1}` of the Poisson term.
    pub fn poisson_term(self) -> bool {
        self != Regime::SlowSwitching
    }
}

/// A finite time or the stationary regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TimePoint {
    At(f64),
    Stationary,
}

impl TimePoint {
    /// `1 − e^{−rate·t}`, equal to 1 in the stationary regime.
    fn saturation(self, rate: f64) -> f64 {
        match self {
            TimePoint::At(t) => -(-rate * t).exp_m1(),
            TimePoint::Stationary => 1.0,
        }
    }

    fn check(self) -> Result<Self, LimitError> {
        match self {
            TimePoint::At(t) if !t.is_finite() || t < 0.0 => Err(LimitError::InvalidTime(t)),
            _ => Ok(self),
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            TimePoint::At(t) => t,
            TimePoint::Stationary => f64::INFINITY,
        }
    }
}

impl From<f64> for TimePoint {
    fn from(t: f64) -> Self {
        if t.is_infinite() {
            TimePoint::Stationary
        } else {
            TimePoint::At(t)
        }
    }
}

/// Time-average arrival and departure rates `(λ_∞, μ_∞) = (πᵀΛ1, πᵀ𝓜1)`.
pub fn averaged_rates(pi: &DVector<f64>, spec: &ModelSpec) -> (f64, f64) {
    (pi.dot(spec.lambda()), pi.dot(spec.mu()))
}

/// Fluid mean `ρ(t) = (1 − e^{−μt}) λ_∞ / μ` for a common service rate.
pub fn rho_uniform(lambda_inf: f64, mu: f64, t: TimePoint) -> f64 {
    t.saturation(mu) * lambda_inf / mu
}

/// `πᵀ diag(a) D diag(b) 1`.
fn bilinear(analysis: &ChainAnalysis, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let left = analysis.pi.component_mul(a);
    (left.transpose() * &analysis.deviation * b)[(0, 0)]
}

/// `U = πᵀΛDΛ1`.
pub fn u_constant(analysis: &ChainAnalysis, lambda: &DVector<f64>) -> f64 {
    bilinear(analysis, lambda, lambda)
}

/// `(Û, Ǔ) = (πᵀ𝓜DΛ1 + πᵀΛD𝓜1, πᵀ𝓜D𝓜1)`.
pub fn uhat_ucheck(analysis: &ChainAnalysis, lambda: &DVector<f64>, mu: &DVector<f64>) -> (f64, f64) {
    let uhat = bilinear(analysis, mu, lambda) + bilinear(analysis, lambda, mu);
    (uhat, bilinear(analysis, mu, mu))
}

/// CLT variance for a common service rate `μ`:
/// `σ²(t) = U(1 − e^{−2μt})/μ · 1{α≤1} + ρ(t) · 1{α≥1}`.
pub fn sigma2_uniform(u: f64, lambda_inf: f64, mu: f64, alpha: f64, t: TimePoint) -> f64 {
    let regime = Regime::of(alpha);
    let mut v = 0.0;
    if regime.modulation_term() {
        v += u * t.saturation(2.0 * mu) / mu;
    }
    if regime.poisson_term() {
        v += rho_uniform(lambda_inf, mu, t);
    }
    v
}

/// Constants of the Model I limit.
#[derive(Debug, Clone)]
pub struct ModelIConstants {
    pub lambda_inf: f64,
    pub mu_inf: f64,
    pub u: f64,
    pub uhat: f64,
    pub ucheck: f64,
    pi: DVector<f64>,
    lambda: DVector<f64>,
    mu: DVector<f64>,
    deviation: DMatrix<f64>,
}

impl ModelIConstants {
    /// Stationary fluid level `λ_∞ / μ_∞`.
    pub fn rho_stationary(&self) -> f64 {
        self.lambda_inf / self.mu_inf
    }

    pub fn rho(&self, t: TimePoint) -> f64 {
        self.rho_stationary() * t.saturation(self.mu_inf)
    }

    /// Modulation variance `σ_m²(t)` in closed form via
    /// `G_{m,n}(t) = e^{−mμ_∞t} − e^{−nμ_∞t}`.
    pub fn sigma2_modulation(&self, t: TimePoint) -> f64 {
        let mu = self.mu_inf;
        let rho = self.rho_stationary();
        match t {
            TimePoint::Stationary => (self.u - rho * self.uhat + rho * rho * self.ucheck) / mu,
            TimePoint::At(t) => {
                let e1 = (-mu * t).exp();
                let e2 = (-2.0 * mu * t).exp();
                let g02 = -(-2.0 * mu * t).exp_m1();
                let g12 = e1 - e2;
                self.u / mu * g02
                    + self.uhat * rho / mu * (2.0 * g12 - g02)
                    + self.ucheck * rho * rho / mu * (g02 - 4.0 * g12 + 2.0 * mu * t * e2)
            }
        }
    }

    /// The same quantity by adaptive quadrature of
    /// `2∫₀ᵗ e^{−2μ_∞(t−s)} πᵀ(Λ − ρ(s)𝓜) D (Λ − ρ(s)𝓜) 1 ds`.
    pub fn sigma2_modulation_quadrature(&self, t: f64) -> f64 {
        let rho = self.rho_stationary();
        let mu_inf = self.mu_inf;
        let integrand = |s: f64| {
            let r = rho * -(-mu_inf * s).exp_m1();
            let drift = &self.lambda - &self.mu * r;
            let form = (self.pi.component_mul(&drift).transpose() * &self.deviation * &drift)[(0, 0)];
            2.0 * (-2.0 * mu_inf * (t - s)).exp() * form
        };
        quadrature::integrate_scalar(integrand, 0.0, t, 1e-12)
    }
}

/// Constants of the Model II limit.
#[derive(Debug, Clone)]
pub struct ModelIIConstants {
    /// Stationary per-type fluid levels `π_k λ_k / μ_k`.
    pub rho_types: DVector<f64>,
    pub mu: DVector<f64>,
    /// Symmetrized deviation matrix `D̄_jk = π_j D_jk + π_k D_kj`.
    pub dbar: DMatrix<f64>,
    lambda: DVector<f64>,
}

#[derive(Debug, Clone)]
enum Constants {
    ModelI(ModelIConstants),
    ModelII(ModelIIConstants),
}

/// Fluid means and CLT variances of the total count as functions of time.
#[derive(Debug, Clone)]
pub struct LimitSummary {
    pub alpha: f64,
    pub regime: Regime,
    constants: Constants,
}

impl LimitSummary {
    /// Limit for the variant named in `spec`.
    pub fn new(analysis: &ChainAnalysis, spec: &ModelSpec, alpha: f64) -> Result<Self, LimitError> {
        match spec.variant() {
            ModelVariant::ModelI => model1_limits(analysis, spec, alpha),
            ModelVariant::ModelII => model2_limits(analysis, spec, alpha),
        }
    }

    pub fn model1(&self) -> Option<&ModelIConstants> {
        match &self.constants {
            Constants::ModelI(c) => Some(c),
            Constants::ModelII(_) => None,
        }
    }

    pub fn model2(&self) -> Option<&ModelIIConstants> {
        match &self.constants {
            Constants::ModelII(c) => Some(c),
            Constants::ModelI(_) => None,
        }
    }

    /// Fluid mean `ρ(t)` of `M^{(N)}(t) / N`.
    pub fn rho(&self, t: TimePoint) -> f64 {
        match &self.constants {
            Constants::ModelI(c) => c.rho(t),
            Constants::ModelII(c) => c
                .rho_types
                .iter()
                .zip(c.mu.iter())
                .map(|(r, &m)| r * t.saturation(m))
                .sum(),
        }
    }

    /// Per-type fluid means; `None` for Model I.
    pub fn rho_types(&self, t: TimePoint) -> Option<DVector<f64>> {
        self.model2()
            .map(|c| c.rho_types.zip_map(&c.mu, |r, m| r * t.saturation(m)))
    }

    /// The deviation-matrix part `σ_m²(t)` of the variance.
    pub fn sigma2_modulation(&self, t: TimePoint) -> f64 {
        match &self.constants {
            Constants::ModelI(c) => c.sigma2_modulation(t),
            Constants::ModelII(c) => v_matrix(c, t).sum(),
        }
    }

    /// CLT variance `σ²(t)` of the total count.
    pub fn sigma2(&self, t: TimePoint) -> f64 {
        let mut v = 0.0;
        if self.regime.modulation_term() {
            v += self.sigma2_modulation(t);
        }
        if self.regime.poisson_term() {
            v += self.rho(t);
        }
        v
    }

    pub fn rho_inf(&self) -> f64 {
        self.rho(TimePoint::Stationary)
    }

    pub fn sigma2_inf(&self) -> f64 {
        self.sigma2(TimePoint::Stationary)
    }
}

fn check_alpha(alpha: f64) -> Result<(), LimitError> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(LimitError::InvalidAlpha(alpha));
    }
    Ok(())
}

/// Model I limits: `ρ^I = λ_∞/μ_∞`, `ρ^I(t) = ρ^I(1 − e^{−μ_∞t})` and the
/// variance built from `U`, `Û` and `Ǔ`.
///
/// The variant stored in `spec` is not consulted, so the same rates can be
/// evaluated under both models.
pub fn model1_limits(analysis: &ChainAnalysis, spec: &ModelSpec, alpha: f64) -> Result<LimitSummary, LimitError> {
    spec.check_dim(analysis)?;
    check_alpha(alpha)?;
    let (lambda_inf, mu_inf) = averaged_rates(&analysis.pi, spec);
    let u = u_constant(analysis, spec.lambda());
    let (uhat, ucheck) = uhat_ucheck(analysis, spec.lambda(), spec.mu());
    Ok(LimitSummary {
        alpha,
        regime: Regime::of(alpha),
        constants: Constants::ModelI(ModelIConstants {
            lambda_inf,
            mu_inf,
            u,
            uhat,
            ucheck,
            pi: analysis.pi.clone(),
            lambda: spec.lambda().clone(),
            mu: spec.mu().clone(),
            deviation: analysis.deviation.clone(),
        }),
    })
}

/// Model II limits for the total count.
pub fn model2_limits(analysis: &ChainAnalysis, spec: &ModelSpec, alpha: f64) -> Result<LimitSummary, LimitError> {
    spec.check_dim(analysis)?;
    check_alpha(alpha)?;
    Ok(LimitSummary {
        alpha,
        regime: Regime::of(alpha),
        constants: Constants::ModelII(model2_constants(analysis, spec)),
    })
}

fn model2_constants(analysis: &ChainAnalysis, spec: &ModelSpec) -> ModelIIConstants {
    let d = spec.dim();
    let pi = &analysis.pi;
    let dev = &analysis.deviation;
    let dbar = DMatrix::from_fn(d, d, |j, k| pi[j] * dev[(j, k)] + pi[k] * dev[(k, j)]);
    let rho_types = DVector::from_fn(d, |k, _| pi[k] * spec.lambda()[k] / spec.mu()[k]);
    ModelIIConstants { rho_types, mu: spec.mu().clone(), dbar, lambda: spec.lambda().clone() }
}

fn v_matrix(c: &ModelIIConstants, t: TimePoint) -> DMatrix<f64> {
    let d = c.mu.len();
    DMatrix::from_fn(d, d, |j, k| {
        let rate = c.mu[j] + c.mu[k];
        c.lambda[j] * c.lambda[k] * c.dbar[(j, k)] / rate * t.saturation(rate)
    })
}

/// The Model II matrices at one time point.
#[derive(Debug, Clone)]
pub struct Model2Matrices {
    pub dbar: DMatrix<f64>,
    /// Modulation covariance `V(t)`.
    pub v: DMatrix<f64>,
    /// Limit covariance `C(t)` of the per-type counts.
    pub c: DMatrix<f64>,
    /// Per-type fluid means `ρ_k^{II}(t)`.
    pub rho_types: DVector<f64>,
}

pub fn model2_matrices(
    analysis: &ChainAnalysis,
    spec: &ModelSpec,
    alpha: f64,
    t: TimePoint,
) -> Result<Model2Matrices, LimitError> {
    spec.check_dim(analysis)?;
    check_alpha(alpha)?;
    let t = t.check()?;
    let consts = model2_constants(analysis, spec);
    let regime = Regime::of(alpha);
    let v = v_matrix(&consts, t);
    let rho_types = consts.rho_types.zip_map(&consts.mu, |r, m| r * t.saturation(m));
    let mut c = if regime.modulation_term() { v.clone() } else { DMatrix::zeros(v.nrows(), v.ncols()) };
    if regime.poisson_term() {
        for k in 0..c.nrows() {
            c[(k, k)] += rho_types[k];
        }
    }
    Ok(Model2Matrices { dbar: consts.dbar, v, c, rho_types })
}

/// Variance of the total Model II count: `ΣΣ V_jk · 1{α≤1} + Σ ρ_k · 1{α≥1}`.
pub fn model2_total_variance(v: &DMatrix<f64>, rho_types: &DVector<f64>, alpha: f64) -> f64 {
    let regime = Regime::of(alpha);
    let mut total = 0.0;
    if regime.modulation_term() {
        total += v.sum();
    }
    if regime.poisson_term() {
        total += rho_types.sum();
    }
    total
}

/// Large-`N` covariance of `M^{(N)}(s)` and `M^{(N)}(t)` for `s ≤ t` and a
/// common service rate:
/// `Nρ(s)e^{−μ(t−s)} + N^{2−α} e^{−μ(t−s)}(1 − e^{−2μs}) U / μ`.
pub fn cov_cross_time(
    scaling: &Scaling,
    lambda_inf: f64,
    mu: f64,
    u: f64,
    s: f64,
    t: f64,
) -> Result<f64, LimitError> {
    TimePoint::At(s).check()?;
    TimePoint::At(t).check()?;
    if s > t {
        return Err(LimitError::OrderViolation { s, t });
    }
    let n = scaling.n();
    let lag = (-mu * (t - s)).exp();
    let poisson = n * rho_uniform(lambda_inf, mu, TimePoint::At(s)) * lag;
    let modulation = n.powf(2.0 - scaling.alpha()) * lag * -(-2.0 * mu * s).exp_m1() * u / mu;
    Ok(poisson + modulation)
}

/// Large-`N` variance `Nρ(t) + N^{2−α}(1 − e^{−2μt})U/μ`.
pub fn variance_asymptotic(scaling: &Scaling, lambda_inf: f64, mu: f64, u: f64, t: f64) -> Result<f64, LimitError> {
    cov_cross_time(scaling, lambda_inf, mu, u, t, t)
}

/// Limit covariance `Č(t)` of the normalized counts at `t + s_1, …, t + s_K`.
pub fn check_matrix(
    mu: f64,
    u: f64,
    lambda_inf: f64,
    alpha: f64,
    t: TimePoint,
    offsets: &[f64],
) -> Result<DMatrix<f64>, LimitError> {
    check_alpha(alpha)?;
    let t = t.check()?;
    if offsets.iter().any(|&s| !s.is_finite() || s < 0.0) || offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(LimitError::UnsortedOffsets);
    }
    let regime = Regime::of(alpha);
    let k = offsets.len();
    let at = |s: f64| match t {
        TimePoint::At(t) => TimePoint::At(t + s),
        TimePoint::Stationary => TimePoint::Stationary,
    };
    Ok(DMatrix::from_fn(k, k, |a, b| {
        let (hi, lo) = if a >= b { (offsets[a], offsets[b]) } else { (offsets[b], offsets[a]) };
        let lag = (-mu * (hi - lo)).exp();
        let mut v = 0.0;
        if regime.modulation_term() {
            v += u / mu * at(lo).saturation(2.0 * mu) * lag;
        }
        if regime.poisson_term() {
            v += lambda_inf / mu * at(lo).saturation(mu) * lag;
        }
        v
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::Generator;
    use approx::assert_abs_diff_eq;

    fn two_state(q: f64) -> ChainAnalysis {
        Generator::symmetric_two_state(q).unwrap().analyze().unwrap()
    }

    #[test]
    fn gamma_branches() {
        assert_eq!(gamma(0.5), 0.75);
        assert_eq!(gamma(1.0), 0.5);
        assert_eq!(gamma(3.0), 0.5);
        assert_eq!(Regime::of(1.0), Regime::Critical);
        assert!(Regime::Critical.modulation_term() && Regime::Critical.poisson_term());
    }

    #[test]
    fn averaged_rates_examples() {
        let spec = ModelSpec::new(vec![3.0], vec![2.0], ModelVariant::ModelI).unwrap();
        assert_eq!(averaged_rates(&DVector::from_element(1, 1.0), &spec), (3.0, 2.0));
        let spec = ModelSpec::new(vec![1.0, 3.0], vec![1.0, 4.0], ModelVariant::ModelI).unwrap();
        let (l, m) = averaged_rates(&DVector::from_vec(vec![2.0 / 3.0, 1.0 / 3.0]), &spec);
        assert_abs_diff_eq!(l, 5.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m, 2.0, epsilon = 1e-15);
        let (l, _) = averaged_rates(&DVector::from_vec(vec![0.5, 0.5]), &spec);
        assert_eq!(l, 2.0);
    }

    #[test]
    fn rho_uniform_examples() {
        assert_eq!(rho_uniform(2.0, 1.0, TimePoint::At(0.0)), 0.0);
        assert_abs_diff_eq!(rho_uniform(2.0, 1.0, TimePoint::At(2f64.ln())), 1.0, epsilon = 1e-15);
        assert_eq!(rho_uniform(2.0, 4.0, TimePoint::Stationary), 0.5);
    }

    #[test]
    fn u_constants() {
        let a = two_state(1.3);
        let lambda = DVector::from_vec(vec![1.0, 3.0]);
        assert_abs_diff_eq!(u_constant(&a, &lambda), 4.0 / (8.0 * 1.3), epsilon = 1e-14);
        assert_abs_diff_eq!(u_constant(&a, &DVector::from_vec(vec![2.0, 2.0])), 0.0, epsilon = 1e-14);
        let one = Generator::new(DMatrix::zeros(1, 1)).unwrap().analyze().unwrap();
        assert_eq!(u_constant(&one, &DVector::from_element(1, 5.0)), 0.0);
        assert_eq!(uhat_ucheck(&one, &DVector::from_element(1, 5.0), &DVector::from_element(1, 2.0)), (0.0, 0.0));
    }

    #[test]
    fn uhat_ucheck_by_hand() {
        // π = (½, ½), D = ¼[[1,-1],[-1,1]], Λ = diag(1,3), 𝓜 = diag(1,2):
        // πᵀ𝓜DΛ1 = (½,1)·(−½,½) = ¼, πᵀΛD𝓜1 = (½,3/2)·(−¼,¼) = ¼, πᵀ𝓜D𝓜1 = ⅛.
        let a = two_state(1.0);
        let (uh, uc) = uhat_ucheck(&a, &DVector::from_vec(vec![1.0, 3.0]), &DVector::from_vec(vec![1.0, 2.0]));
        assert_abs_diff_eq!(uh, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(uc, 0.125, epsilon = 1e-14);
        let (uh, uc) = uhat_ucheck(&a, &DVector::from_vec(vec![1.0, 3.0]), &DVector::from_vec(vec![2.0, 2.0]));
        assert_abs_diff_eq!(uh, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(uc, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn sigma2_uniform_examples() {
        assert_eq!(sigma2_uniform(0.7, 2.0, 4.0, 2.0, TimePoint::Stationary), 0.5);
        assert_eq!(sigma2_uniform(0.5, 2.0, 1.0, 0.5, TimePoint::Stationary), 0.5);
        assert_eq!(sigma2_uniform(0.5, 2.0, 1.0, 1.0, TimePoint::Stationary), 2.5);
    }

    #[test]
    fn model1_examples() {
        let a = two_state(1.0);
        let spec = ModelSpec::new(vec![1.0, 3.0], vec![1.0, 2.0], ModelVariant::ModelI).unwrap();
        let lim = model1_limits(&a, &spec, 0.5).unwrap();
        let c = lim.model1().unwrap();
        assert_abs_diff_eq!(c.rho_stationary(), 4.0 / 3.0, epsilon = 1e-14);
        assert_eq!(c.sigma2_modulation(TimePoint::At(0.0)), 0.0);
        // (U − ρÛ + ρ²Ǔ)/μ_∞ with ρ = 4/3, μ_∞ = 3/2.
        let expected = (0.5 - 4.0 / 3.0 * 0.5 + 16.0 / 9.0 * 0.125) / 1.5;
        assert_abs_diff_eq!(lim.sigma2_inf(), expected, epsilon = 1e-14);
        for &t in &[0.05, 0.5, 1.0, 2.0, 7.0] {
            let closed = c.sigma2_modulation(TimePoint::At(t));
            assert_abs_diff_eq!(closed, c.sigma2_modulation_quadrature(t), epsilon = 1e-9);
        }
    }

    #[test]
    fn model1_uniform_reduces_to_sigma2_uniform() {
        let a = two_state(0.6);
        let spec = ModelSpec::new(vec![1.0, 3.0], vec![1.5, 1.5], ModelVariant::ModelI).unwrap();
        let u = u_constant(&a, spec.lambda());
        for alpha in [0.5, 1.0, 2.0] {
            let lim = model1_limits(&a, &spec, alpha).unwrap();
            for t in [TimePoint::At(0.3), TimePoint::At(2.0), TimePoint::Stationary] {
                assert_abs_diff_eq!(lim.sigma2(t), sigma2_uniform(u, 2.0, 1.5, alpha, t), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn model2_examples() {
        let one = Generator::new(DMatrix::zeros(1, 1)).unwrap().analyze().unwrap();
        let spec = ModelSpec::new(vec![2.0], vec![4.0], ModelVariant::ModelII).unwrap();
        let m = model2_matrices(&one, &spec, 2.0, TimePoint::Stationary).unwrap();
        assert_eq!(m.v[(0, 0)], 0.0);
        assert_eq!(m.c[(0, 0)], 0.5);
        assert_eq!(model2_total_variance(&m.v, &m.rho_types, 2.0), 0.5);

        let a = two_state(1.0);
        let spec = ModelSpec::new(vec![1.0, 3.0], vec![1.0, 2.0], ModelVariant::ModelII).unwrap();
        let m0 = model2_matrices(&a, &spec, 0.5, TimePoint::At(0.0)).unwrap();
        assert_eq!(m0.v.amax(), 0.0);
        assert_eq!(m0.c.amax(), 0.0);
        // D̄ = D here, so V_jk = λ_jλ_k D_jk / (μ_j + μ_k).
        let m = model2_matrices(&a, &spec, 0.5, TimePoint::Stationary).unwrap();
        assert_abs_diff_eq!(m.v[(0, 0)], 0.25 / 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m.v[(0, 1)], -0.75 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m.v[(1, 1)], 2.25 / 4.0, epsilon = 1e-14);
        assert_eq!(m.v, m.v.transpose());
        let m1 = model2_matrices(&a, &spec, 1.0, TimePoint::At(1.0)).unwrap();
        let total = model2_total_variance(&m1.v, &m1.rho_types, 1.0);
        assert_abs_diff_eq!(total, m1.v.sum() + m1.rho_types.sum(), epsilon = 1e-14);
    }

    #[test]
    fn cross_time_examples() {
        let sc = Scaling::new(100, 0.5).unwrap();
        let (l, mu, u) = (2.0, 1.0, 0.5);
        assert_eq!(cov_cross_time(&sc, l, mu, u, 0.0, 3.0).unwrap(), 0.0);
        assert!(matches!(cov_cross_time(&sc, l, mu, u, 2.0, 1.0), Err(LimitError::OrderViolation { .. })));
        let t = 1.7;
        let direct = 100.0 * rho_uniform(l, mu, TimePoint::At(t))
            + 100f64.powf(1.5) * (1.0 - (-2.0 * mu * t).exp()) * u / mu;
        assert_abs_diff_eq!(variance_asymptotic(&sc, l, mu, u, t).unwrap(), direct, epsilon = 1e-9);
    }

    #[test]
    fn check_matrix_examples() {
        let c = check_matrix(1.0, 0.5, 2.0, 0.5, TimePoint::At(1.3), &[0.0]).unwrap();
        assert_abs_diff_eq!(c[(0, 0)], sigma2_uniform(0.5, 2.0, 1.0, 0.5, TimePoint::At(1.3)), epsilon = 1e-15);
        let c = check_matrix(1.0, 0.5, 2.0, 2.0, TimePoint::Stationary, &[0.0, 2f64.ln()]).unwrap();
        assert_abs_diff_eq!(c[(0, 1)] / (c[(0, 0)] * c[(1, 1)]).sqrt(), 0.5, epsilon = 1e-15);
        assert!(matches!(
            check_matrix(1.0, 0.5, 2.0, 2.0, TimePoint::Stationary, &[1.0, 0.0]),
            Err(LimitError::UnsortedOffsets)
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(vec![1.0], vec![0.0], ModelVariant::ModelI).is_err());
        assert!(ModelSpec::new(vec![-1.0], vec![1.0], ModelVariant::ModelI).is_err());
        assert!(ModelSpec::new(vec![1.0, 2.0], vec![1.0], ModelVariant::ModelI).is_err());
        assert!(Scaling::new(0, 1.0).is_err());
        assert!(Scaling::new(10, 0.0).is_err());
        assert_eq!(Scaling::new(16, 0.5).unwrap().normalizer(), 8.0);
    }
}
