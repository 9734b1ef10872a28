//! Exact finite-`N` first and second moments.
//!
//! Differentiating the probability generating function at `z = 1` gives a
//! closed linear system for the state probabilities `p`, the partial means
//! `m_j = E[M 1{J=j}]` and the second factorial moments `s_j = E[M(M−1) 1{J=j}]`.
//! All of them are row vectors with `x' = x B` for a block upper-triangular
//! `B`. The default integrator propagates `x` with `exp(BΔ)` between grid
//! points. Fixed-step RK4 is available as an independent check.

use crate::limits::{ModelSpec, ModelVariant, Scaling};
use crate::markov::{Generator, MarkovError};
use crate::sim::InitialState;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Upper bound on RK4 steps for a single call.
pub const MAX_RK4_STEPS: u64 = 20_000_000;

#[derive(Debug, Error)]
pub enum MomentError {
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error("generator has {generator} states but the rates have {rates}")]
    DimensionMismatch { generator: usize, rates: usize },
    #[error("fixed initial state {0} is out of range")]
    InvalidInitialState(usize),
    #[error("grid must be nonempty, finite, nonnegative and sorted")]
    InvalidGrid,
    #[error("RK4 would need {steps} steps (limit {limit}); N^alpha / N is too extreme for fixed steps")]
    StiffnessFailure { steps: u64, limit: u64 },
    #[error("singular linear system for {0}")]
    SingularSystem(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Integrator {
    /// Exact propagation with the matrix exponential.
    #[default]
    Exponential,
    /// Classical RK4 with the resolving step, halved `halvings` times.
    Rk4 { halvings: u32 },
}

/// Moments at one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPoint {
    pub t: f64,
    /// Background state probabilities.
    pub p: DVector<f64>,
    pub mean: f64,
    pub variance: f64,
    /// Per-type means (Model II).
    pub type_means: Option<DVector<f64>>,
    /// Covariance of the per-type counts (Model II).
    pub type_cov: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentPath {
    pub variant: ModelVariant,
    pub points: Vec<MomentPoint>,
}

impl MomentPath {
    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean).collect()
    }
    pub fn variances(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.variance).collect()
    }
}

/// Moments in the stationary regime.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryMoments {
    pub mean: f64,
    pub variance: f64,
    pub type_means: Option<DVector<f64>>,
    pub type_cov: Option<DMatrix<f64>>,
}

/// Layout of the moment vector `x`.
struct Layout {
    d: usize,
    typed: bool,
}

impl Layout {
    fn len(&self) -> usize {
        let d = self.d;
        if self.typed {
            d + d * d + d * d * (d + 1) / 2
        } else {
            3 * d
        }
    }
    fn p(&self) -> usize {
        0
    }
    /// Offset of `m` (Model I) or `m_k` (Model II).
    fn m(&self, k: usize) -> usize {
        self.d * (1 + k)
    }
    fn s_model1(&self) -> usize {
        2 * self.d
    }
    /// Offset of `s_jk`, stored once for `j ≤ k`.
    fn s(&self, j: usize, k: usize) -> usize {
        let (j, k) = if j <= k { (j, k) } else { (k, j) };
        let d = self.d;
        d + d * d + d * pair_index(d, j, k)
    }
}

/// Position of the pair `(j, k)`, `j ≤ k`, in row-major upper-triangular order.
fn pair_index(d: usize, j: usize, k: usize) -> usize {
    j * d - j * j.saturating_sub(1) / 2 - j + k
}

struct System {
    layout: Layout,
    b: DMatrix<f64>,
    x0: DVector<f64>,
    lambda: DVector<f64>,
    mu: DVector<f64>,
}

fn validate(
    g: &Generator,
    spec: &ModelSpec,
    initial: InitialState,
) -> Result<DVector<f64>, MomentError> {
    let d = g.dim();
    if spec.dim() != d {
        return Err(MomentError::DimensionMismatch { generator: d, rates: spec.dim() });
    }
    match initial {
        InitialState::Stationary => Ok(g.analyze()?.pi),
        InitialState::Fixed(i) if i < d => Ok(DVector::from_fn(d, |j, _| if j == i { 1.0 } else { 0.0 })),
        InitialState::Fixed(i) => Err(MomentError::InvalidInitialState(i)),
    }
}

fn check_grid(grid: &[f64]) -> Result<(), MomentError> {
    let bad = grid.iter().any(|&t| !t.is_finite() || t < 0.0);
    if grid.is_empty() || bad || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(MomentError::InvalidGrid);
    }
    Ok(())
}

fn add_block(b: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>) {
    let mut view = b.view_mut((row, col), block.shape());
    view += block;
}

fn build(g: &Generator, spec: &ModelSpec, scaling: &Scaling, p0: DVector<f64>, variant: ModelVariant) -> System {
    let d = g.dim();
    let n = scaling.n();
    let a = g.rates() * scaling.switching_factor();
    let lambda = spec.lambda().clone();
    let mu = spec.mu().clone();
    let layout = Layout { d, typed: variant == ModelVariant::ModelII };
    let len = layout.len();
    let mut b = DMatrix::zeros(len, len);
    let eye = DMatrix::<f64>::identity(d, d);
    add_block(&mut b, layout.p(), layout.p(), &a);
    match variant {
        ModelVariant::ModelI => {
            let lam = DMatrix::from_diagonal(&lambda);
            let mm = DMatrix::from_diagonal(&mu);
            let (m, s) = (layout.m(0), layout.s_model1());
            add_block(&mut b, 0, m, &(&lam * n));
            add_block(&mut b, m, m, &(&a - &mm));
            add_block(&mut b, m, s, &(&lam * (2.0 * n)));
            add_block(&mut b, s, s, &(&a - &mm * 2.0));
        }
        ModelVariant::ModelII => {
            for k in 0..d {
                let mk = layout.m(k);
                b[(k, mk + k)] += n * lambda[k];
                add_block(&mut b, mk, mk, &(&a - &eye * mu[k]));
            }
            for j in 0..d {
                for k in j..d {
                    let s = layout.s(j, k);
                    add_block(&mut b, s, s, &(&a - &eye * (mu[j] + mu[k])));
                    // m_k E_j feeds column j, m_j E_k feeds column k.
                    b[(layout.m(k) + j, s + j)] += n * lambda[j];
                    b[(layout.m(j) + k, s + k)] += n * lambda[k];
                }
            }
        }
    }
    let mut x0 = DVector::zeros(len);
    x0.rows_mut(0, d).copy_from(&p0);
    System { layout, b, x0, lambda, mu }
}

impl System {
    fn readout(&self, t: f64, x: &DVector<f64>) -> MomentPoint {
        let l = &self.layout;
        let d = l.d;
        let p = x.rows(l.p(), d).into_owned();
        if !l.typed {
            let m = x.rows(l.m(0), d).sum();
            let s = x.rows(l.s_model1(), d).sum();
            return MomentPoint { t, p, mean: m, variance: s + m - m * m, type_means: None, type_cov: None };
        }
        let means = DVector::from_fn(d, |k, _| x.rows(l.m(k), d).sum());
        let cov = DMatrix::from_fn(d, d, |j, k| {
            let s = x.rows(l.s(j, k), d).sum();
            let diag = if j == k { means[k] } else { 0.0 };
            s + diag - means[j] * means[k]
        });
        MomentPoint { t, p, mean: means.sum(), variance: cov.sum(), type_means: Some(means), type_cov: Some(cov) }
    }

    fn rk4_step_size(&self, g: &Generator, scaling: &Scaling, halvings: u32) -> f64 {
        let max_q = (0..g.dim()).map(|i| g.exit_rate(i)).fold(0.0, f64::max);
        let max_l = self.lambda.max();
        let max_mu = self.mu.max();
        let mut h = 1.0 / (20.0 * max_mu);
        if max_q > 0.0 {
            h = h.min(1.0 / (20.0 * scaling.switching_factor() * max_q));
        }
        if max_l > 0.0 {
            h = h.min(1.0 / (20.0 * scaling.n() * max_l));
        }
        h / 2f64.powi(halvings as i32)
    }

    fn run(&self, g: &Generator, scaling: &Scaling, grid: &[f64], integrator: Integrator) -> Result<Vec<MomentPoint>, MomentError> {
        check_grid(grid)?;
        let mut x = self.x0.clone();
        let mut t = 0.0;
        let mut out = Vec::with_capacity(grid.len());
        match integrator {
            Integrator::Exponential => {
                for &target in grid {
                    let dt = target - t;
                    if dt > 0.0 {
                        let step = (&self.b * dt).exp();
                        x = (x.transpose() * step).transpose();
                    }
                    t = target;
                    out.push(self.readout(t, &x));
                }
            }
            Integrator::Rk4 { halvings } => {
                let h = self.rk4_step_size(g, scaling, halvings);
                let steps = (grid[grid.len() - 1] / h).ceil() as u64 + grid.len() as u64;
                if steps > MAX_RK4_STEPS {
                    return Err(MomentError::StiffnessFailure { steps, limit: MAX_RK4_STEPS });
                }
                let bt = self.b.transpose();
                for &target in grid {
                    let dt = target - t;
                    if dt > 0.0 {
                        let n = (dt / h).ceil().max(1.0) as usize;
                        let step = dt / n as f64;
                        for _ in 0..n {
                            let k1 = &bt * &x;
                            let k2 = &bt * (&x + &k1 * (0.5 * step));
                            let k3 = &bt * (&x + &k2 * (0.5 * step));
                            let k4 = &bt * (&x + &k3 * step);
                            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0);
                        }
                    }
                    t = target;
                    out.push(self.readout(t, &x));
                }
            }
        }
        Ok(out)
    }
}

fn moments_variant(
    g: &Generator,
    spec: &ModelSpec,
    scaling: &Scaling,
    initial: InitialState,
    grid: &[f64],
    integrator: Integrator,
    variant: ModelVariant,
) -> Result<MomentPath, MomentError> {
    let p0 = validate(g, spec, initial)?;
    let system = build(g, spec, scaling, p0, variant);
    Ok(MomentPath { variant, points: system.run(g, scaling, grid, integrator)? })
}

/// Mean and variance of the Model I count at each grid time, starting empty.
pub fn moments_model1(
    g: &Generator,
    spec: &ModelSpec,
    scaling: &Scaling,
    initial: InitialState,
    grid: &[f64],
    integrator: Integrator,
) -> Result<MomentPath, MomentError> {
    moments_variant(g, spec, scaling, initial, grid, integrator, ModelVariant::ModelI)
}

/// Per-type means and covariance plus totals for Model II.
pub fn moments_model2(
    g: &Generator,
    spec: &ModelSpec,
    scaling: &Scaling,
    initial: InitialState,
    grid: &[f64],
    integrator: Integrator,
) -> Result<MomentPath, MomentError> {
    moments_variant(g, spec, scaling, initial, grid, integrator, ModelVariant::ModelII)
}

/// Dispatches on `spec.variant()`.
pub fn moments(
    g: &Generator,
    spec: &ModelSpec,
    scaling: &Scaling,
    initial: InitialState,
    grid: &[f64],
    integrator: Integrator,
) -> Result<MomentPath, MomentError> {
    moments_variant(g, spec, scaling, initial, grid, integrator, spec.variant())
}

/// Solves the row system `x M = rhs`.
fn solve_row(m: DMatrix<f64>, rhs: DVector<f64>, what: &'static str) -> Result<DVector<f64>, MomentError> {
    m.transpose().lu().solve(&rhs).ok_or(MomentError::SingularSystem(what))
}

/// Stationary moments from the time-derivative-free equations.
pub fn stationary_moments(
    g: &Generator,
    spec: &ModelSpec,
    scaling: &Scaling,
    variant: ModelVariant,
) -> Result<StationaryMoments, MomentError> {
    let pi = validate(g, spec, InitialState::Stationary)?;
    let d = g.dim();
    let n = scaling.n();
    let a = g.rates() * scaling.switching_factor();
    let lambda = spec.lambda();
    let mu = spec.mu();
    match variant {
        ModelVariant::ModelI => {
            let mm = DMatrix::from_diagonal(mu);
            let m = solve_row(&mm - &a, pi.component_mul(lambda) * n, "first moment")?;
            let s = solve_row(&mm * 2.0 - &a, m.component_mul(lambda) * (2.0 * n), "second moment")?;
            let (m1, s1) = (m.sum(), s.sum());
            Ok(StationaryMoments { mean: m1, variance: s1 + m1 - m1 * m1, type_means: None, type_cov: None })
        }
        ModelVariant::ModelII => {
            let eye = DMatrix::<f64>::identity(d, d);
            let mut ms = Vec::with_capacity(d);
            for k in 0..d {
                let mut rhs = DVector::zeros(d);
                rhs[k] = n * lambda[k] * pi[k];
                ms.push(solve_row(&eye * mu[k] - &a, rhs, "first moment")?);
            }
            let means = DVector::from_fn(d, |k, _| ms[k].sum());
            let mut cov = DMatrix::zeros(d, d);
            for j in 0..d {
                for k in j..d {
                    let mut rhs = DVector::zeros(d);
                    rhs[j] += n * lambda[j] * ms[k][j];
                    rhs[k] += n * lambda[k] * ms[j][k];
                    let s = solve_row(&eye * (mu[j] + mu[k]) - &a, rhs, "second moment")?.sum();
                    let diag = if j == k { means[k] } else { 0.0 };
                    cov[(j, k)] = s + diag - means[j] * means[k];
                    cov[(k, j)] = cov[(j, k)];
                }
            }
            Ok(StationaryMoments {
                mean: means.sum(),
                variance: cov.sum(),
                type_means: Some(means),
                type_cov: Some(cov),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limits::ModelVariant::{ModelI, ModelII};
    use approx::assert_relative_eq;

    fn chain() -> Generator {
        Generator::symmetric_two_state(1.0).unwrap()
    }

    fn hetero(variant: ModelVariant) -> ModelSpec {
        ModelSpec::new(vec![1.0, 3.0], vec![1.0, 2.0], variant).unwrap()
    }

    #[test]
    fn pair_layout_is_dense() {
        for d in 1..6 {
            let mut seen = vec![];
            for j in 0..d {
                for k in j..d {
                    seen.push(pair_index(d, j, k));
                }
            }
            assert_eq!(seen, (0..d * (d + 1) / 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_state_is_poisson() {
        let g = Generator::from_rows(&[vec![0.0]]).unwrap();
        let sc = Scaling::new(10, 0.5).unwrap();
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.25).collect();
        for variant in [ModelI, ModelII] {
            let spec = ModelSpec::new(vec![2.0], vec![1.5], variant).unwrap();
            let path = moments(&g, &spec, &sc, InitialState::Stationary, &grid, Integrator::Exponential).unwrap();
            for pt in &path.points {
                let exact = 10.0 * 2.0 / 1.5 * -(-1.5 * pt.t).exp_m1();
                assert!((pt.mean - exact).abs() < 1e-9, "{variant:?} t={}", pt.t);
                assert!((pt.variance - pt.mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn probability_is_conserved() {
        let g = Generator::from_rows(&[vec![-1.0, 1.0, 0.0], vec![0.5, -1.0, 0.5], vec![2.0, 0.0, -2.0]]).unwrap();
        let spec = ModelSpec::new(vec![1.0, 0.0, 2.0], vec![1.0, 0.5, 3.0], ModelII).unwrap();
        let sc = Scaling::new(50, 1.2).unwrap();
        let grid = [0.0, 0.01, 0.5, 3.0, 10.0];
        let path = moments(&g, &spec, &sc, InitialState::Fixed(1), &grid, Integrator::Exponential).unwrap();
        for pt in &path.points {
            assert!((pt.p.sum() - 1.0).abs() < 1e-9);
            assert!(pt.p.min() > -1e-12);
            assert!(pt.type_means.as_ref().unwrap().min() > -1e-12);
            let c = pt.type_cov.as_ref().unwrap();
            assert_eq!(c, &c.transpose());
        }
        assert_eq!(path.points[0].mean, 0.0);
    }

    #[test]
    fn rk4_agrees_with_exponential_and_converges() {
        let sc = Scaling::new(20, 1.0).unwrap();
        let grid = [0.3, 1.0];
        for variant in [ModelI, ModelII] {
            let spec = hetero(variant);
            let exact = moments(&chain(), &spec, &sc, InitialState::Stationary, &grid, Integrator::Exponential).unwrap();
            let coarse = moments(&chain(), &spec, &sc, InitialState::Stationary, &grid, Integrator::Rk4 { halvings: 0 }).unwrap();
            let fine = moments(&chain(), &spec, &sc, InitialState::Stationary, &grid, Integrator::Rk4 { halvings: 1 }).unwrap();
            for k in 0..grid.len() {
                let (e, c, f) = (&exact.points[k], &coarse.points[k], &fine.points[k]);
                assert!((c.variance - f.variance).abs() < 1e-8, "{variant:?} step halving");
                assert!((c.mean - f.mean).abs() < 1e-8);
                assert!((f.variance - e.variance).abs() < 1e-8);
                assert!((f.mean - e.mean).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rk4_refuses_extreme_scaling() {
        let sc = Scaling::new(10_000, 2.0).unwrap();
        let spec = hetero(ModelI);
        let r = moments(&chain(), &spec, &sc, InitialState::Stationary, &[1.0], Integrator::Rk4 { halvings: 0 });
        assert!(matches!(r, Err(MomentError::StiffnessFailure { .. })));
    }

    #[test]
    fn models_coincide_for_uniform_service() {
        let g = Generator::from_rows(&[vec![-1.0, 0.7, 0.3], vec![0.2, -0.4, 0.2], vec![1.0, 1.0, -2.0]]).unwrap();
        let sc = Scaling::new(200, 0.7).unwrap();
        let grid = [0.2, 1.0, 4.0];
        let s1 = ModelSpec::new(vec![1.0, 3.0, 0.5], vec![1.3, 1.3, 1.3], ModelI).unwrap();
        let a = moments_model1(&g, &s1, &sc, InitialState::Stationary, &grid, Integrator::Exponential).unwrap();
        let b = moments_model2(&g, &s1, &sc, InitialState::Stationary, &grid, Integrator::Exponential).unwrap();
        for (x, y) in a.points.iter().zip(&b.points) {
            assert!((x.mean - y.mean).abs() < 1e-7);
            assert!((x.variance - y.variance).abs() < 1e-7);
        }
    }

    #[test]
    fn reference_variances() {
        // Symmetric two-state chain, λ = (1, 3), μ = 1, t = 1, α = ½.
        let spec = ModelSpec::new(vec![1.0, 3.0], vec![1.0, 1.0], ModelI).unwrap();
        let var = |n: u64| {
            let sc = Scaling::new(n, 0.5).unwrap();
            moments(&chain(), &spec, &sc, InitialState::Stationary, &[1.0], Integrator::Exponential).unwrap().points[0].variance
        };
        assert_relative_eq!(var(100), 531.385, max_relative = 1e-5);
        assert_relative_eq!(var(10_000), 442_147.27, max_relative = 1e-6);
    }

    #[test]
    fn stationary_matches_long_transient() {
        let sc = Scaling::new(300, 0.8).unwrap();
        for variant in [ModelI, ModelII] {
            let spec = hetero(variant);
            let st = stationary_moments(&chain(), &spec, &sc, variant).unwrap();
            let tr = moments(&chain(), &spec, &sc, InitialState::Stationary, &[60.0], Integrator::Exponential).unwrap();
            let pt = &tr.points[0];
            assert_relative_eq!(st.mean, pt.mean, max_relative = 1e-7);
            assert_relative_eq!(st.variance, pt.variance, max_relative = 1e-7);
            if let (Some(a), Some(b)) = (&st.type_cov, &pt.type_cov) {
                assert!((a - b).amax() < 1e-7 * b.amax());
            }
        }
        let g = Generator::from_rows(&[vec![0.0]]).unwrap();
        let spec = ModelSpec::new(vec![2.0], vec![4.0], ModelI).unwrap();
        let st = stationary_moments(&g, &spec, &sc, ModelI).unwrap();
        assert_relative_eq!(st.mean, 150.0, max_relative = 1e-12);
        assert_relative_eq!(st.variance, 150.0, max_relative = 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        let sc = Scaling::new(10, 1.0).unwrap();
        let spec = hetero(ModelI);
        let bad_grid = moments(&chain(), &spec, &sc, InitialState::Stationary, &[1.0, 0.0], Integrator::Exponential);
        assert!(matches!(bad_grid, Err(MomentError::InvalidGrid)));
        let bad_state = moments(&chain(), &spec, &sc, InitialState::Fixed(5), &[1.0], Integrator::Exponential);
        assert!(matches!(bad_state, Err(MomentError::InvalidInitialState(5))));
        let one = ModelSpec::new(vec![1.0], vec![1.0], ModelI).unwrap();
        let mismatch = moments(&chain(), &one, &sc, InitialState::Stationary, &[1.0], Integrator::Exponential);
        assert!(matches!(mismatch, Err(MomentError::DimensionMismatch { .. })));
    }
}
