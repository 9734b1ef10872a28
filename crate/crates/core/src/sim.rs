//! Monte Carlo sampling of the scaled queue.
//!
//! Two routes are provided. [`Simulator::simulate_event_driven`] runs the full
//! continuous-time chain with competing exponential clocks. The
//! conditional-Poisson route samples only the background path and then draws
//! the count from a Poisson law whose parameter is a piecewise-exponential
//! integral over that path.

use crate::limits::{LimitError, ModelSpec, ModelVariant, Scaling};
use crate::markov::{Generator, MarkovError};
use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Limit(#[from] LimitError),
    #[error("generator has {generator} states but the rates have {rates}")]
    DimensionMismatch { generator: usize, rates: usize },
    #[error("fixed initial state {0} is out of range")]
    InvalidInitialState(usize),
    #[error("observation grid must be nonempty, finite, nonnegative and sorted")]
    InvalidGrid,
    #[error("horizon must be finite and positive, got {0}")]
    InvalidHorizon(f64),
    #[error("at least one replication is required")]
    NoReplications,
}

/// How the background chain is started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    #[default]
    Stationary,
    Fixed(usize),
}

/// A right-continuous piecewise-constant background trajectory on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundPath {
    jump_times: Vec<f64>,
    states: Vec<usize>,
    horizon: f64,
}

impl BackgroundPath {
    /// Segment start times; the first is always 0.
    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }
    pub fn states(&self) -> &[usize] {
        &self.states
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn jumps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn state_at(&self, t: f64) -> usize {
        let idx = self.jump_times.partition_point(|&s| s <= t);
        self.states[idx.saturating_sub(1)]
    }

    /// `(start, end, state)` for every segment, with the last one ending at the horizon.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        (0..self.states.len()).map(move |i| {
            let end = self.jump_times.get(i + 1).copied().unwrap_or(self.horizon);
            (self.jump_times[i], end, self.states[i])
        })
    }

    /// Total time spent in each state.
    pub fn occupation(&self, dim: usize) -> Vec<f64> {
        let mut occ = vec![0.0; dim];
        for (a, b, i) in self.segments() {
            occ[i] += b - a;
        }
        occ
    }
}

/// Counts observed at the grid times in a single replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub counts: Vec<u64>,
    /// `per_type[k][j]`: jobs of arrival type `j` at grid point `k` (Model II only).
    pub per_type: Option<Vec<Vec<u64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    EventDriven,
    /// Independent Poisson draws per grid time given one shared path.
    /// Marginals are exact; the joint law across grid times is not.
    ConditionalPoisson,
}

/// `R` replications observed on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub grid: Vec<f64>,
    /// `counts[r][k]`.
    pub counts: Vec<Vec<u64>>,
    /// `per_type[r][k][j]`.
    pub per_type: Option<Vec<Vec<Vec<u64>>>>,
    pub master_seed: u64,
    pub method: Method,
}

impl SampleBatch {
    pub fn replications(&self) -> usize {
        self.counts.len()
    }

    /// Column `k` of the count matrix as floats.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.counts.iter().map(|row| row[k] as f64).collect()
    }

    /// Type-`j` counts at grid point `k`.
    pub fn type_column(&self, k: usize, j: usize) -> Option<Vec<f64>> {
        self.per_type
            .as_ref()
            .map(|pt| pt.iter().map(|rep| rep[k][j] as f64).collect())
    }
}

/// Deterministic per-replication stream: ChaCha8 keyed by the master seed,
/// with the replication index as stream id.
pub fn replication_rng(master_seed: u64, replication: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replication);
    rng
}

fn check_grid(grid: &[f64]) -> Result<(), SimError> {
    let bad_point = grid.iter().any(|&t| !t.is_finite() || t < 0.0);
    if grid.is_empty() || bad_point || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(SimError::InvalidGrid);
    }
    Ok(())
}

fn poisson_draw<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("finite positive Poisson mean");
    let x: f64 = d.sample(rng);
    x as u64
}

/// A fully specified scenario ready for sampling.
#[derive(Debug, Clone)]
pub struct Simulator {
    generator: Generator,
    spec: ModelSpec,
    scaling: Scaling,
    initial: InitialState,
    pi: DVector<f64>,
    pi_dist: WeightedIndex<f64>,
    jump_dist: Vec<Option<WeightedIndex<f64>>>,
}

impl Simulator {
    pub fn new(
        generator: Generator,
        spec: ModelSpec,
        scaling: Scaling,
        initial: InitialState,
    ) -> Result<Self, SimError> {
        let d = generator.dim();
        if spec.dim() != d {
            return Err(SimError::DimensionMismatch { generator: d, rates: spec.dim() });
        }
        if let InitialState::Fixed(i) = initial {
            if i >= d {
                return Err(SimError::InvalidInitialState(i));
            }
        }
        let pi = generator.analyze()?.pi;
        let pi_dist = WeightedIndex::new(pi.iter().copied()).expect("positive stationary distribution");
        let jump_dist = (0..d)
            .map(|i| {
                let w: Vec<f64> = (0..d).map(|j| if i == j { 0.0 } else { generator.rate(i, j) }).collect();
                WeightedIndex::new(w).ok()
            })
            .collect();
        Ok(Self { generator, spec, scaling, initial, pi, pi_dist, jump_dist })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }
    pub fn scaling(&self) -> &Scaling {
        &self.scaling
    }
    pub fn stationary(&self) -> &DVector<f64> {
        &self.pi
    }

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self.initial {
            InitialState::Stationary => self.pi_dist.sample(rng),
            InitialState::Fixed(i) => i,
        }
    }

    fn next_state<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> usize {
        self.jump_dist[from].as_ref().expect("state with positive exit rate").sample(rng)
    }

    /// Samples the sped-up background chain on `[0, horizon]`.
    pub fn sample_background<R: Rng + ?Sized>(&self, horizon: f64, rng: &mut R) -> Result<BackgroundPath, SimError> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(SimError::InvalidHorizon(horizon));
        }
        let speed = self.scaling.switching_factor();
        let mut state = self.initial_state(rng);
        let mut t = 0.0;
        let mut jump_times = vec![0.0];
        let mut states = vec![state];
        loop {
            let rate = speed * self.generator.exit_rate(state);
            if rate <= 0.0 {
                break;
            }
            let e: f64 = Exp1.sample(rng);
            t += e / rate;
            if t > horizon {
                break;
            }
            state = self.next_state(state, rng);
            jump_times.push(t);
            states.push(state);
        }
        Ok(BackgroundPath { jump_times, states, horizon })
    }

    /// Exact simulation of the job count, recorded at each grid time.
    pub fn simulate_event_driven<R: Rng + ?Sized>(&self, grid: &[f64], rng: &mut R) -> Result<Replication, SimError> {
        check_grid(grid)?;
        let d = self.spec.dim();
        let n = self.scaling.n();
        let speed = self.scaling.switching_factor();
        let lambda = self.spec.lambda();
        let mu = self.spec.mu();
        let typed = self.spec.variant() == ModelVariant::ModelII;

        let mut state = self.initial_state(rng);
        let mut t = 0.0;
        let mut total: u64 = 0;
        let mut by_type = vec![0u64; if typed { d } else { 0 }];
        let mut counts = Vec::with_capacity(grid.len());
        let mut per_type = Vec::with_capacity(if typed { grid.len() } else { 0 });
        let mut next_obs = 0;

        while next_obs < grid.len() {
            let arrival = n * lambda[state];
            let departure = if typed {
                by_type.iter().zip(mu.iter()).map(|(&m, &r)| m as f64 * r).sum()
            } else {
                total as f64 * mu[state]
            };
            let switch = speed * self.generator.exit_rate(state);
            let rate = arrival + departure + switch;
            let next = if rate > 0.0 {
                let e: f64 = Exp1.sample(rng);
                t + e / rate
            } else {
                f64::INFINITY
            };
            while next_obs < grid.len() && grid[next_obs] < next {
                counts.push(total);
                if typed {
                    per_type.push(by_type.clone());
                }
                next_obs += 1;
            }
            if next_obs == grid.len() {
                break;
            }
            t = next;
            let mut u = rng.random::<f64>() * rate;
            if u < arrival {
                total += 1;
                if typed {
                    by_type[state] += 1;
                }
                continue;
            }
            u -= arrival;
            if u < departure {
                total -= 1;
                if typed {
                    let mut k = 0;
                    // Pick the departing type proportionally to M_k μ_k.
                    loop {
                        let r = by_type[k] as f64 * mu[k];
                        if u < r || k + 1 == d {
                            break;
                        }
                        u -= r;
                        k += 1;
                    }
                    while by_type[k] == 0 {
                        k -= 1;
                    }
                    by_type[k] -= 1;
                }
                continue;
            }
            state = self.next_state(state, rng);
        }
        Ok(Replication { counts, per_type: typed.then_some(per_type) })
    }

    /// Model I Poisson parameter `ψ = ∫₀ᵗ λ_{J(s)} exp(−∫ₛᵗ μ_{J(r)} dr) ds`,
    /// by one backward sweep over the segments of `path` inside `[0, t]`.
    pub fn psi(&self, path: &BackgroundPath, t: f64) -> f64 {
        let lambda = self.spec.lambda();
        let mu = self.spec.mu();
        let segs: Vec<_> = path.segments().filter(|&(a, _, _)| a < t).collect();
        let mut tail: f64 = 0.0;
        let mut psi = 0.0;
        for &(a, b, i) in segs.iter().rev() {
            let len = b.min(t) - a;
            psi += lambda[i] * (-tail).exp() * -(-mu[i] * len).exp_m1() / mu[i];
            tail += mu[i] * len;
        }
        psi
    }

    /// Model II Poisson parameters per arrival type:
    /// `φ_k = ∫₀ᵗ 1{J(s)=k} λ_k e^{−μ_k(t−s)} ds`. Their sum is `φ`.
    pub fn phi_by_type(&self, path: &BackgroundPath, t: f64) -> Vec<f64> {
        let lambda = self.spec.lambda();
        let mu = self.spec.mu();
        let mut phi = vec![0.0; self.spec.dim()];
        for (a, b, i) in path.segments().filter(|&(a, _, _)| a < t) {
            let b = b.min(t);
            phi[i] += lambda[i] / mu[i] * (-mu[i] * (t - b)).exp() * -(-mu[i] * (b - a)).exp_m1();
        }
        phi
    }

    /// Draws the count at time `t` given a background path covering `[0, t]`.
    fn conditional_draw<R: Rng + ?Sized>(&self, path: &BackgroundPath, t: f64, rng: &mut R) -> (u64, Option<Vec<u64>>) {
        let n = self.scaling.n();
        match self.spec.variant() {
            ModelVariant::ModelI => (poisson_draw(n * self.psi(path, t), rng), None),
            ModelVariant::ModelII => {
                let types: Vec<u64> = self.phi_by_type(path, t).iter().map(|&p| poisson_draw(n * p, rng)).collect();
                (types.iter().sum(), Some(types))
            }
        }
    }

    /// One conditional-Poisson sample of `M^{(N)}(t)` with per-type counts for Model II.
    pub fn simulate_conditional_poisson<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<(u64, Option<Vec<u64>>), SimError> {
        check_grid(&[t])?;
        if t == 0.0 {
            let types = (self.spec.variant() == ModelVariant::ModelII).then(|| vec![0; self.spec.dim()]);
            return Ok((0, types));
        }
        let path = self.sample_background(t, rng)?;
        Ok(self.conditional_draw(&path, t, rng))
    }

    fn conditional_replication<R: Rng + ?Sized>(&self, grid: &[f64], rng: &mut R) -> Result<Replication, SimError> {
        check_grid(grid)?;
        let horizon = grid[grid.len() - 1];
        let typed = self.spec.variant() == ModelVariant::ModelII;
        let path = if horizon > 0.0 { Some(self.sample_background(horizon, rng)?) } else { None };
        let mut counts = Vec::with_capacity(grid.len());
        let mut per_type = Vec::new();
        for &t in grid {
            let (total, types) = match &path {
                Some(p) if t > 0.0 => self.conditional_draw(p, t, rng),
                _ => (0, typed.then(|| vec![0; self.spec.dim()])),
            };
            counts.push(total);
            if let Some(types) = types {
                per_type.push(types);
            }
        }
        Ok(Replication { counts, per_type: typed.then_some(per_type) })
    }

    /// `replications` independent runs, in parallel on the current rayon pool.
    /// Replication `r` always uses [`replication_rng`]`(master_seed, r)`, so the
    /// batch does not depend on the thread count.
    pub fn run_batch(
        &self,
        grid: &[f64],
        replications: usize,
        master_seed: u64,
        method: Method,
    ) -> Result<SampleBatch, SimError> {
        check_grid(grid)?;
        if replications == 0 {
            return Err(SimError::NoReplications);
        }
        let reps: Vec<Replication> = (0..replications)
            .into_par_iter()
            .map(|r| {
                let mut rng = replication_rng(master_seed, r as u64);
                match method {
                    Method::EventDriven => self.simulate_event_driven(grid, &mut rng),
                    Method::ConditionalPoisson => self.conditional_replication(grid, &mut rng),
                }
            })
            .collect::<Result<_, _>>()?;
        let typed = self.spec.variant() == ModelVariant::ModelII;
        let mut counts = Vec::with_capacity(replications);
        let mut per_type = Vec::with_capacity(if typed { replications } else { 0 });
        for rep in reps {
            counts.push(rep.counts);
            if let Some(pt) = rep.per_type {
                per_type.push(pt);
            }
        }
        Ok(SampleBatch { grid: grid.to_vec(), counts, per_type: typed.then_some(per_type), master_seed, method })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limits::ModelVariant::{ModelI, ModelII};

    fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    fn sd(xs: &[f64]) -> f64 {
        let m = mean(xs);
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    }

    fn two_state(variant: ModelVariant, n: u64, alpha: f64) -> Simulator {
        Simulator::new(
            Generator::symmetric_two_state(1.0).unwrap(),
            ModelSpec::new(vec![1.0, 3.0], vec![1.0, 2.0], variant).unwrap(),
            Scaling::new(n, alpha).unwrap(),
            InitialState::Stationary,
        )
        .unwrap()
    }

    fn single_state(lambda: f64, mu: f64, n: u64) -> Simulator {
        Simulator::new(
            Generator::from_rows(&[vec![0.0]]).unwrap(),
            ModelSpec::new(vec![lambda], vec![mu], ModelI).unwrap(),
            Scaling::new(n, 1.0).unwrap(),
            InitialState::Stationary,
        )
        .unwrap()
    }

    #[test]
    fn single_state_path_is_one_segment() {
        let sim = single_state(1.0, 1.0, 10);
        let path = sim.sample_background(5.0, &mut replication_rng(1, 0)).unwrap();
        assert_eq!(path.segments().collect::<Vec<_>>(), vec![(0.0, 5.0, 0)]);
        assert!(sim.sample_background(0.0, &mut replication_rng(1, 0)).is_err());
    }

    #[test]
    fn jump_intensity_scales_with_n_alpha() {
        // Symmetric chain: Σ π_i q_i = 1, so E[#jumps on [0,1]] = N^α.
        let sim = two_state(ModelI, 100, 0.5);
        let jumps: Vec<f64> = (0..4000)
            .map(|r| sim.sample_background(1.0, &mut replication_rng(7, r)).unwrap().jumps() as f64)
            .collect();
        let m = mean(&jumps);
        assert!((m - 10.0).abs() < 3.0 * sd(&jumps) / 4000f64.sqrt(), "mean jumps {m}");
    }

    #[test]
    fn occupancy_approaches_stationary() {
        let sim = Simulator::new(
            Generator::from_rows(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap(),
            ModelSpec::new(vec![1.0, 1.0], vec![1.0, 1.0], ModelI).unwrap(),
            Scaling::new(1, 1.0).unwrap(),
            InitialState::Fixed(1),
        )
        .unwrap();
        let fracs: Vec<f64> = (0..400)
            .map(|r| sim.sample_background(200.0, &mut replication_rng(3, r)).unwrap().occupation(2)[0] / 200.0)
            .collect();
        let m = mean(&fracs);
        assert!((m - 2.0 / 3.0).abs() < 3.0 * sd(&fracs) / 20.0 + 1e-3, "occupancy {m}");
    }

    #[test]
    fn zero_arrivals_give_zero_counts() {
        let sim = Simulator::new(
            Generator::symmetric_two_state(1.0).unwrap(),
            ModelSpec::new(vec![0.0, 0.0], vec![1.0, 2.0], ModelII).unwrap(),
            Scaling::new(50, 0.5).unwrap(),
            InitialState::Stationary,
        )
        .unwrap();
        for method in [Method::EventDriven, Method::ConditionalPoisson] {
            let b = sim.run_batch(&[0.0, 0.5, 2.0], 20, 1, method).unwrap();
            assert!(b.counts.iter().flatten().all(|&c| c == 0));
        }
    }

    #[test]
    fn mm_infinity_transient_mean() {
        let sim = single_state(2.0, 1.5, 200);
        let t: f64 = 0.8;
        let expect = 200.0 * 2.0 / 1.5 * (1.0 - (-1.5f64 * t).exp());
        for method in [Method::EventDriven, Method::ConditionalPoisson] {
            let b = sim.run_batch(&[t], 2000, 11, method).unwrap();
            let col = b.column(0);
            assert!((mean(&col) - expect).abs() < 3.0 * sd(&col) / 2000f64.sqrt(), "{method:?}");
        }
    }

    #[test]
    fn constant_path_parameters() {
        let sim = single_state(2.0, 1.5, 1);
        let path = sim.sample_background(3.0, &mut replication_rng(0, 0)).unwrap();
        let exact = 2.0 / 1.5 * (1.0 - (-1.5f64 * 1.2).exp());
        assert!((sim.psi(&path, 1.2) - exact).abs() < 1e-14);
        assert!((sim.phi_by_type(&path, 1.2)[0] - exact).abs() < 1e-14);
    }

    #[test]
    fn psi_equals_phi_for_uniform_service() {
        let sim = Simulator::new(
            Generator::from_rows(&[vec![-1.0, 0.5, 0.5], vec![2.0, -3.0, 1.0], vec![0.2, 0.3, -0.5]]).unwrap(),
            ModelSpec::new(vec![1.0, 4.0, 0.5], vec![0.7, 0.7, 0.7], ModelI).unwrap(),
            Scaling::new(30, 1.0).unwrap(),
            InitialState::Stationary,
        )
        .unwrap();
        let path = sim.sample_background(4.0, &mut replication_rng(5, 2)).unwrap();
        assert!(path.jumps() > 10);
        let phi: f64 = sim.phi_by_type(&path, 3.3).iter().sum();
        assert!((sim.psi(&path, 3.3) - phi).abs() < 1e-12);
    }

    #[test]
    fn batches_are_reproducible_and_start_empty() {
        let sim = two_state(ModelII, 40, 0.5);
        let grid = [0.0, 0.3, 1.0];
        let a = sim.run_batch(&grid, 50, 99, Method::EventDriven).unwrap();
        let b = sim.run_batch(&grid, 50, 99, Method::EventDriven).unwrap();
        assert_eq!(a, b);
        assert!(a.counts.iter().all(|row| row[0] == 0));
        let c = sim.run_batch(&grid, 50, 100, Method::EventDriven).unwrap();
        assert_ne!(a.counts, c.counts);
        let one = sim.run_batch(&[0.0], 1, 0, Method::EventDriven).unwrap();
        assert_eq!(one.counts, vec![vec![0]]);
    }

    #[test]
    fn per_type_counts_sum_to_totals() {
        let sim = two_state(ModelII, 60, 1.0);
        for method in [Method::EventDriven, Method::ConditionalPoisson] {
            let b = sim.run_batch(&[0.2, 1.0, 3.0], 100, 4, method).unwrap();
            let pt = b.per_type.as_ref().unwrap();
            for (r, row) in b.counts.iter().enumerate() {
                for (k, &c) in row.iter().enumerate() {
                    assert_eq!(pt[r][k].iter().sum::<u64>(), c);
                }
            }
        }
        assert!(two_state(ModelI, 10, 1.0).run_batch(&[1.0], 3, 0, Method::EventDriven).unwrap().per_type.is_none());
    }

    #[test]
    fn invalid_inputs() {
        let sim = two_state(ModelI, 10, 1.0);
        assert!(matches!(sim.run_batch(&[1.0, 0.5], 3, 0, Method::EventDriven), Err(SimError::InvalidGrid)));
        assert!(matches!(sim.run_batch(&[], 3, 0, Method::EventDriven), Err(SimError::InvalidGrid)));
        assert!(matches!(sim.run_batch(&[1.0], 0, 0, Method::EventDriven), Err(SimError::NoReplications)));
        let bad = Simulator::new(
            Generator::symmetric_two_state(1.0).unwrap(),
            ModelSpec::new(vec![1.0, 3.0], vec![1.0, 2.0], ModelI).unwrap(),
            Scaling::new(10, 1.0).unwrap(),
            InitialState::Fixed(2),
        );
        assert!(matches!(bad, Err(SimError::InvalidInitialState(2))));
    }
}
