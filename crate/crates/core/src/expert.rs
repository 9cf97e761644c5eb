//! Expert policy via Lagrangian dual descent.
//!
//! For every network the expert alternates between maximizing the
//! instantaneous Lagrangian over transmit powers and a projected
//! subgradient step on the per-receiver multipliers. The stored primal
//! iterates form the empirical expert distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::netgen::{check_power, rates_unchecked, sample_fading_with, FadingSample, NetworkConfig, NetworkState};
use crate::seed::{derive_seed, rng_from_seed, Rng};

const LN_2: f64 = std::f64::consts::LN_2;

/// Channel seen by the per-step Lagrangian maximization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubproblemGains {
    /// The fading realization of the current step.
    #[default]
    Instantaneous,
    /// The long-term gains; iterates then depend on `h` and `λ` only.
    LongTerm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub t_total: usize,
    pub t_burn: usize,
    pub eta_dual: f64,
    /// Primal step in units of `p_max` (ascent runs on `x / p_max`).
    pub eta_primal: f64,
    pub primal_steps: usize,
    pub n_restarts: usize,
    pub buffer_capacity: usize,
    pub subproblem_gains: SubproblemGains,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            t_total: 1000,
            t_burn: 200,
            eta_dual: 0.2,
            eta_primal: 0.05,
            primal_steps: 50,
            n_restarts: 4,
            buffer_capacity: 500,
            subproblem_gains: SubproblemGains::Instantaneous,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.t_total <= self.t_burn {
            return bad("t_total must exceed t_burn");
        }
        if self.buffer_capacity == 0 || self.buffer_capacity > self.t_total - self.t_burn {
            return bad("buffer capacity must be in 1..=t_total - t_burn");
        }
        if !(self.eta_dual > 0.0 && self.eta_primal > 0.0) {
            return bad("step sizes must be positive");
        }
        if self.n_restarts == 0 {
            return bad("n_restarts must be at least 1");
        }
        Ok(())
    }
}

/// Nonnegative multipliers, one per receiver constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    lambdas: Vec<f64>,
}

impl DualState {
    pub fn zeros(n: usize) -> Self {
        Self { lambdas: vec![0.0; n] }
    }

    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Contract("multipliers must be finite and nonnegative".into()));
        }
        Ok(Self { lambdas })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.lambdas
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Average instantaneous rate per receiver over the post-burn-in iterations.
    pub running_rates: Vec<f64>,
    pub f_min: f64,
    pub satisfied_fraction: f64,
    pub violated: Vec<usize>,
}

impl FeasibilityReport {
    pub fn new(running_rates: Vec<f64>, f_min: f64) -> Self {
        let violated: Vec<usize> = running_rates
            .iter()
            .enumerate()
            .filter(|(_, r)| **r < f_min)
            .map(|(i, _)| i)
            .collect();
        let n = running_rates.len().max(1) as f64;
        Self {
            satisfied_fraction: 1.0 - violated.len() as f64 / n,
            running_rates,
            f_min,
            violated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertBuffer {
    pub network_id: usize,
    /// `B x N` power vectors in temporal order.
    pub samples: Matrix,
    pub final_lambdas: Vec<f64>,
    pub report: FeasibilityReport,
}

impl ExpertBuffer {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn n(&self) -> usize {
        self.samples.cols()
    }

    pub fn row(&self, b: usize) -> &[f64] {
        self.samples.row(b)
    }

    /// A uniformly drawn stored iterate.
    pub fn sample_uniform(&self, rng: &mut impl rand::Rng) -> &[f64] {
        self.samples.row(rng.random_range(0..self.samples.rows()))
    }

    /// Time average of the stored iterates.
    pub fn mean_row(&self) -> Vec<f64> {
        // rounding can push the mean of equal entries past them; keep it inside the column range
        let mut means = self.samples.column_means();
        for (c, m) in means.iter_mut().enumerate() {
            let col = (0..self.len()).map(|r| self.samples[(r, c)]);
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            *m = m.clamp(lo, hi);
        }
        means
    }
}

/// `mean(r) + Σ λ_i (r_i − f_min)`.
pub fn lagrangian_value(lambdas: &DualState, rates: &[f64], f_min: f64) -> f64 {
    let n = rates.len() as f64;
    let mean: f64 = rates.iter().sum::<f64>() / n;
    let slack: f64 = lambdas.as_slice().iter().zip(rates).map(|(l, r)| l * (r - f_min)).sum();
    mean + slack
}

/// `λ ← max(0, λ − η (r − f_min))`.
pub fn dual_update(lambdas: &DualState, rates: &[f64], eta: f64, f_min: f64) -> DualState {
    DualState {
        lambdas: lambdas
            .as_slice()
            .iter()
            .zip(rates)
            .map(|(l, r)| (l - eta * (r - f_min)).max(0.0))
            .collect(),
    }
}

/// Lagrangian and its gradient with respect to normalized powers `u = x / p_max`.
struct Subproblem<'a> {
    gains: &'a Matrix,
    weights: Vec<f64>,
    lambdas: &'a DualState,
    noise: f64,
    p_max: f64,
    f_min: f64,
}

impl Subproblem<'_> {
    fn value(&self, u: &[f64]) -> f64 {
        let x: Vec<f64> = u.iter().map(|v| v * self.p_max).collect();
        lagrangian_value(self.lambdas, &rates_unchecked(&x, self.gains, self.noise), self.f_min)
    }

    fn gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        let n = u.len();
        let g = self.gains;
        let x: Vec<f64> = u.iter().map(|v| v * self.p_max).collect();
        // per receiver: D_i = noise + interference, T_i = D_i + signal
        let mut coupling = vec![0.0; n];
        let mut own = vec![0.0; n];
        for i in 0..n {
            let mut interference = 0.0;
            for j in 0..n {
                if j != i {
                    interference += x[j] * g[(j, i)];
                }
            }
            let d = self.noise + interference;
            let signal = x[i] * g[(i, i)];
            let t = d + signal;
            own[i] = self.weights[i] * g[(i, i)] / t;
            coupling[i] = self.weights[i] * signal / (d * t);
        }
        let grad: Vec<f64> = (0..n)
            .map(|j| {
                let mut cross = 0.0;
                for i in 0..n {
                    if i != j {
                        cross += coupling[i] * g[(j, i)];
                    }
                }
                self.p_max * (own[j] - cross) / LN_2
            })
            .collect();
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite Lagrangian gradient".into()));
        }
        Ok(grad)
    }

    /// Projected gradient ascent on the unit box with step halving on
    /// non-improving moves. Returns the terminal point and its value.
    fn ascend(&self, mut u: Vec<f64>, eta0: f64, steps: usize) -> Result<(Vec<f64>, f64)> {
        let mut value = self.value(&u);
        let mut eta = eta0;
        for _ in 0..steps {
            let grad = self.gradient(&u)?;
            let mut moved = false;
            for _ in 0..60 {
                let cand: Vec<f64> = u
                    .iter()
                    .zip(&grad)
                    .map(|(v, d)| (v + eta * d).clamp(0.0, 1.0))
                    .collect();
                if cand == u {
                    break;
                }
                let cand_value = self.value(&cand);
                if cand_value >= value {
                    u = cand;
                    value = cand_value;
                    moved = true;
                    eta = (eta * 2.0).min(eta0);
                    break;
                }
                eta *= 0.5;
            }
            if !moved {
                break;
            }
        }
        Ok((u, value))
    }
}

/// Best-of-restarts projected gradient ascent on the instantaneous Lagrangian.
///
/// Starts, in order: `x_init`, all-off, full power, then uniform random
/// points; the first `n_restarts` are used.
pub fn maximize_lagrangian(
    lambdas: &DualState,
    fading: &FadingSample,
    x_init: &[f64],
    expert: &ExpertConfig,
    network: &NetworkConfig,
    rng: &mut impl rand::Rng,
) -> Result<Vec<f64>> {
    let n = fading.gains.rows();
    check_power(x_init, n, network.p_max)?;
    if lambdas.as_slice().len() != n {
        return Err(Error::Contract("one multiplier per receiver required".into()));
    }
    let problem = Subproblem {
        gains: &fading.gains,
        weights: lambdas.as_slice().iter().map(|l| l + 1.0 / n as f64).collect(),
        lambdas,
        noise: network.noise_power(),
        p_max: network.p_max,
        f_min: network.f_min,
    };

    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in 0..expert.n_restarts {
        let start: Vec<f64> = match r {
            0 => x_init.iter().map(|x| x / network.p_max).collect(),
            1 => vec![0.0; n],
            2 => vec![1.0; n],
            _ => (0..n).map(|_| rng.random::<f64>()).collect(),
        };
        let (u, value) = problem.ascend(start, expert.eta_primal, expert.primal_steps)?;
        if best.as_ref().is_none_or(|(_, b)| value > *b) {
            best = Some((u, value));
        }
    }
    let (u, _) = best.expect("at least one restart");
    Ok(u.iter()
        .map(|v| (v * network.p_max).clamp(0.0, network.p_max))
        .collect())
}

/// Runs dual descent on one network and keeps the last `B` primal iterates.
pub fn run_expert(
    state: &NetworkState,
    network_id: usize,
    expert: &ExpertConfig,
    network: &NetworkConfig,
    seed: u64,
) -> Result<ExpertBuffer> {
    expert.validate()?;
    state.check()?;
    let n = state.n();
    let mut fading_rng: Rng = rng_from_seed(derive_seed(seed, "expert/fading", 0));
    let mut restart_rng: Rng = rng_from_seed(derive_seed(seed, "expert/restarts", 0));

    let keep_from = expert.t_total - expert.buffer_capacity;
    let mut samples = Vec::with_capacity(expert.buffer_capacity * n);
    let mut rate_sum = vec![0.0; n];
    let mut lambdas = DualState::zeros(n);
    let mut x = vec![network.p_max; n];
    let long_term = FadingSample {
        gains: state.gains.clone(),
    };

    for t in 0..expert.t_total {
        let fading = sample_fading_with(state, &mut fading_rng);
        let seen = match expert.subproblem_gains {
            SubproblemGains::Instantaneous => &fading,
            SubproblemGains::LongTerm => &long_term,
        };
        x = maximize_lagrangian(&lambdas, seen, &x, expert, network, &mut restart_rng)?;
        let rates = rates_unchecked(&x, &fading.gains, network.noise_power());
        lambdas = dual_update(&lambdas, &rates, expert.eta_dual, network.f_min);
        if t >= expert.t_burn {
            rate_sum.iter_mut().zip(&rates).for_each(|(s, r)| *s += r);
        }
        if t >= keep_from {
            samples.extend_from_slice(&x);
        }
    }

    let window = (expert.t_total - expert.t_burn) as f64;
    let running = rate_sum.into_iter().map(|s| s / window).collect();
    Ok(ExpertBuffer {
        network_id,
        samples: Matrix::from_vec(expert.buffer_capacity, n, samples)?,
        final_lambdas: lambdas.lambdas,
        report: FeasibilityReport::new(running, network.f_min),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgen::{generate_network, sample_fading};

    fn toy_config(f_min: f64) -> NetworkConfig {
        NetworkConfig {
            n_pairs: 2,
            f_min,
            ..NetworkConfig::default()
        }
    }

    /// Two pairs whose cross links are as strong as their direct links.
    fn crushing_pair() -> NetworkState {
        NetworkState::from_gains(Matrix::filled(2, 2, 1e-7)).unwrap()
    }

    #[test]
    fn lagrangian_hand_values() {
        let zero = DualState::zeros(2);
        assert!((lagrangian_value(&zero, &[1.0, 0.2], 0.6) - 0.6).abs() < 1e-15);
        let l = DualState::new(vec![3.0, 7.0]).unwrap();
        assert!((lagrangian_value(&l, &[0.6, 0.6], 0.6) - 0.6).abs() < 1e-15);
        let l = DualState::new(vec![0.0, 1.0]).unwrap();
        let v = lagrangian_value(&l, &[1.0, 0.2], 0.6);
        assert!((v - 0.2).abs() < 1e-15, "{v}");
    }

    #[test]
    fn dual_update_cases() {
        let l = DualState::new(vec![0.3, 0.0]).unwrap();
        assert_eq!(dual_update(&l, &[0.6, 0.6], 0.5, 0.6), l);
        let z = DualState::zeros(2);
        assert_eq!(dual_update(&z, &[1.0, 2.0], 0.5, 0.6), z);
        let l = DualState::new(vec![0.5]).unwrap();
        let next = dual_update(&l, &[0.1], 0.5, 0.6);
        assert!((next.as_slice()[0] - 0.75).abs() < 1e-15);
        assert!(DualState::new(vec![-0.1]).is_err());
    }

    #[test]
    fn single_user_goes_full_power() {
        let cfg = NetworkConfig::default();
        let state = NetworkState::from_gains(Matrix::filled(1, 1, 1e-9)).unwrap();
        let fading = sample_fading(&state, 1);
        let x = maximize_lagrangian(
            &DualState::zeros(1),
            &fading,
            &[0.0],
            &ExpertConfig::default(),
            &cfg,
            &mut rng_from_seed(0),
        )
        .unwrap();
        assert_eq!(x, vec![cfg.p_max]);
    }

    #[test]
    fn best_of_restarts_beats_corner_starts() {
        let cfg = toy_config(0.0);
        let fading = FadingSample {
            gains: crushing_pair().gains,
        };
        let lambdas = DualState::zeros(2);
        let x = maximize_lagrangian(
            &lambdas,
            &fading,
            &[cfg.p_max * 0.3, cfg.p_max * 0.6],
            &ExpertConfig::default(),
            &cfg,
            &mut rng_from_seed(1),
        )
        .unwrap();
        let score = |x: &[f64]| lagrangian_value(&lambdas, &rates_unchecked(x, &fading.gains, cfg.noise_power()), 0.0);
        assert!(score(&x) >= score(&[cfg.p_max; 2]));
        assert!(score(&x) >= score(&[0.0; 2]));
    }

    #[test]
    fn ascent_dominates_grid_search() {
        // asymmetric toy instance with moderate interference
        let cfg = toy_config(0.5);
        let gains = Matrix::from_rows(&[vec![2e-8, 3e-10], vec![8e-10, 6e-9]]).unwrap();
        let fading = FadingSample { gains };
        let lambdas = DualState::new(vec![0.2, 0.9]).unwrap();
        let x = maximize_lagrangian(
            &lambdas,
            &fading,
            &[0.0, 0.0],
            &ExpertConfig::default(),
            &cfg,
            &mut rng_from_seed(2),
        )
        .unwrap();
        let score = |x: &[f64]| {
            lagrangian_value(
                &lambdas,
                &rates_unchecked(x, &fading.gains, cfg.noise_power()),
                cfg.f_min,
            )
        };
        let mut grid_best = f64::NEG_INFINITY;
        for a in 0..=10 {
            for b in 0..=10 {
                let p = [cfg.p_max * a as f64 / 10.0, cfg.p_max * b as f64 / 10.0];
                grid_best = grid_best.max(score(&p));
            }
        }
        assert!(score(&x) >= grid_best - 1e-6, "{} < {}", score(&x), grid_best);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = NetworkConfig::default();
        let state = generate_network(
            &NetworkConfig {
                n_pairs: 5,
                ..cfg.clone()
            },
            3,
        )
        .unwrap();
        let fading = sample_fading(&state, 4);
        let lambdas = DualState::new(vec![0.1, 0.0, 2.0, 0.5, 0.3]).unwrap();
        let problem = Subproblem {
            gains: &fading.gains,
            weights: lambdas.as_slice().iter().map(|l| l + 0.2).collect(),
            lambdas: &lambdas,
            noise: cfg.noise_power(),
            p_max: cfg.p_max,
            f_min: 0.6,
        };
        let u = vec![0.3, 0.7, 0.5, 0.9, 0.2];
        let grad = problem.gradient(&u).unwrap();
        for j in 0..5 {
            let h = 1e-7;
            let mut up = u.clone();
            up[j] += h;
            let mut dn = u.clone();
            dn[j] -= h;
            let fd = (problem.value(&up) - problem.value(&dn)) / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() <= 1e-5 * fd.abs().max(1.0),
                "{j}: {fd} vs {}",
                grad[j]
            );
        }
    }

    #[test]
    fn buffer_contract_and_inactive_constraints() {
        let cfg = NetworkConfig {
            n_pairs: 6,
            f_min: 0.0,
            ..NetworkConfig::default()
        };
        let state = generate_network(&cfg, 11).unwrap();
        let expert = ExpertConfig {
            t_total: 120,
            t_burn: 20,
            buffer_capacity: 80,
            ..ExpertConfig::default()
        };
        let buf = run_expert(&state, 0, &expert, &cfg, 5).unwrap();
        assert_eq!(buf.samples.shape(), (80, 6));
        assert!(buf.samples.as_slice().iter().all(|x| (0.0..=cfg.p_max).contains(x)));
        assert!(buf.final_lambdas.iter().all(|l| *l == 0.0));
        assert_eq!(buf.report.satisfied_fraction, 1.0);
        assert_eq!(buf, run_expert(&state, 0, &expert, &cfg, 5).unwrap());
    }

    #[test]
    fn invalid_expert_configs() {
        let mut e = ExpertConfig::default();
        e.t_burn = e.t_total;
        assert!(e.validate().is_err());
        let mut e = ExpertConfig::default();
        e.buffer_capacity = e.t_total;
        assert!(e.validate().is_err());
        let mut e = ExpertConfig::default();
        e.eta_dual = 0.0;
        assert!(e.validate().is_err());
    }
}
