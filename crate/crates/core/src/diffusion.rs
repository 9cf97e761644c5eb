//! Denoising diffusion over power allocations: noise schedules, forward
//! corruption, the weighted DDPM loss and the reverse sampling chain.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gnn::{forward, predict_noise_batch, BoundParams, GnnParams, GraphBatch};
use crate::matrix::Matrix;
use crate::netgen::Gso;
use crate::seed::{rng_from_seed, sha256_hex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Per-step quantities for `k = 0..=K`; index 0 of `beta`, `alpha` and
/// `sigma` is a placeholder (`0`, `1`, `0`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Serializable identity of a schedule; arrays are recomputed on load and
/// checked against `hash`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub hash: String,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidConfig("diffusion needs at least one step".into()));
    }
    let k_f = steps as f64;
    let mut beta = vec![0.0; steps + 1];
    match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 2e-2);
            for (k, b) in beta.iter_mut().enumerate().skip(1) {
                *b = if steps == 1 {
                    lo
                } else {
                    lo + (hi - lo) * (k - 1) as f64 / (k_f - 1.0)
                };
            }
        }
        ScheduleKind::Cosine => {
            let f = |k: usize| {
                let t = (k as f64 / k_f + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (t * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            let f0 = f(0);
            for k in 1..=steps {
                let prev = f(k - 1) / f0;
                let cur = f(k) / f0;
                beta[k] = (1.0 - cur / prev).clamp(0.0, MAX_BETA);
            }
        }
    }
    let mut alpha = vec![1.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    let mut sigma = vec![0.0; steps + 1];
    for k in 1..=steps {
        alpha[k] = 1.0 - beta[k];
        alpha_bar[k] = alpha_bar[k - 1] * alpha[k];
        let posterior = (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k]) * beta[k];
        sigma[k] = posterior.sqrt();
    }
    Ok(NoiseSchedule {
        kind,
        steps,
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// `K`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigma[k]
    }

    pub fn descriptor(&self) -> ScheduleDescriptor {
        let mut bytes = Vec::with_capacity(16 * (self.steps + 1));
        for v in self.beta.iter().chain(&self.alpha_bar) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        ScheduleDescriptor {
            kind: self.kind,
            steps: self.steps,
            hash: sha256_hex(&bytes),
        }
    }

    pub fn from_descriptor(d: &ScheduleDescriptor) -> Result<Self> {
        let s = make_schedule(d.kind, d.steps)?;
        if s.descriptor().hash != d.hash {
            return Err(Error::Integrity("noise schedule hash mismatch".into()));
        }
        Ok(s)
    }
}

/// Which ratio the log-SNR weight is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrDefinition {
    /// `ᾱ_k / (1 − ᾱ_k)` of the forward marginal.
    Marginal,
    /// `α_k² / σ_k²` with the sampler's per-step variance.
    StepRatio,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LossWeighting {
    /// Every timestep weighs 1.
    #[default]
    Uniform,
    /// `clamp(log SNR(k), min, max)`.
    ClampedLogSnr { snr: SnrDefinition, min: f64, max: f64 },
}

impl LossWeighting {
    /// Marginal log-SNR clamped to `[0.01, 5]`.
    pub fn clamped_log_snr() -> Self {
        LossWeighting::ClampedLogSnr {
            snr: SnrDefinition::Marginal,
            min: 0.01,
            max: 5.0,
        }
    }

    pub fn weight(&self, k: usize, schedule: &NoiseSchedule) -> f64 {
        match *self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::ClampedLogSnr { snr, min, max } => {
                let ratio = match snr {
                    SnrDefinition::Marginal => {
                        let ab = schedule.alpha_bar(k);
                        ab / (1.0 - ab)
                    }
                    SnrDefinition::StepRatio => {
                        let s = schedule.sigma(k);
                        schedule.alpha(k).powi(2) / (s * s)
                    }
                };
                let w = ratio.ln();
                if w.is_nan() {
                    min
                } else {
                    w.clamp(min, max)
                }
            }
        }
    }
}

/// `[0, p_max] → [−1/2, 1/2]`.
pub fn to_diffusion_space(x: &[f64], p_max: f64) -> Vec<f64> {
    x.iter().map(|v| v / p_max - 0.5).collect()
}

/// Inverse affine map followed by projection onto `[0, p_max]`.
pub fn from_diffusion_space(y: &[f64], p_max: f64) -> Vec<f64> {
    y.iter().map(|v| ((v + 0.5) * p_max).clamp(0.0, p_max)).collect()
}

/// `√ᾱ_k x0 + √(1 − ᾱ_k) ε`.
pub fn q_sample(x0: &[f64], k: usize, eps: &[f64], schedule: &NoiseSchedule) -> Vec<f64> {
    let ab = schedule.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// One training example set: expert signals in diffusion space with their
/// timesteps, noise and conditioning graphs.
pub struct DiffusionBatch<'a> {
    pub gsos: Vec<&'a Gso>,
    pub graph: Vec<usize>,
    pub x0: Vec<Vec<f64>>,
    pub steps: Vec<usize>,
    pub eps: Vec<Vec<f64>>,
}

impl DiffusionBatch<'_> {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    fn check(&self, schedule: &NoiseSchedule) -> Result<()> {
        let n = self.x0.len();
        if self.graph.len() != n || self.steps.len() != n || self.eps.len() != n || n == 0 {
            return Err(Error::Contract("diffusion batch fields disagree in length".into()));
        }
        if let Some(k) = self.steps.iter().find(|k| **k == 0 || **k > schedule.steps()) {
            return Err(Error::Contract(format!(
                "timestep {k} outside 1..={}",
                schedule.steps()
            )));
        }
        if self.eps.iter().flatten().any(|e| !e.is_finite()) {
            return Err(Error::Contract("non-finite noise".into()));
        }
        Ok(())
    }
}

/// Records the weighted DDPM loss `mean_s ω(k_s) ‖ε_θ(x_k, k; H) − ε‖²` on `tape`.
pub fn ddpm_loss_on_tape(
    tape: &mut Tape,
    params: &GnnParams,
    bound: &BoundParams,
    batch: &DiffusionBatch<'_>,
    schedule: &NoiseSchedule,
    weighting: &LossWeighting,
) -> Result<Var> {
    batch.check(schedule)?;
    let noisy: Vec<Vec<f64>> = batch
        .x0
        .iter()
        .zip(&batch.steps)
        .zip(&batch.eps)
        .map(|((x0, &k), e)| q_sample(x0, k, e, schedule))
        .collect();
    let signals: Vec<(usize, &[f64], usize)> = batch
        .graph
        .iter()
        .zip(&noisy)
        .zip(&batch.steps)
        .map(|((&g, x), &k)| (g, x.as_slice(), k))
        .collect();
    let graph_batch = GraphBatch::new(&batch.gsos, &signals)?;
    let pred = forward(tape, params, bound, &graph_batch)?;

    let mut weights = Vec::with_capacity(graph_batch.n_rows());
    let mut target = Vec::with_capacity(graph_batch.n_rows());
    for (&k, e) in batch.steps.iter().zip(&batch.eps) {
        let w = weighting.weight(k, schedule);
        weights.extend(std::iter::repeat_n(w, e.len()));
        target.extend_from_slice(e);
    }
    let rows = target.len();
    let loss = tape.weighted_sq_err(pred, Matrix::from_vec(rows, 1, target)?, weights, batch.len() as f64)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Numerical("non-finite diffusion loss".into()));
    }
    Ok(loss)
}

pub fn ddpm_loss(
    batch: &DiffusionBatch<'_>,
    params: &GnnParams,
    schedule: &NoiseSchedule,
    weighting: &LossWeighting,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let loss = ddpm_loss_on_tape(&mut tape, params, &bound, batch, schedule, weighting)?;
    Ok(tape.scalar(loss))
}

/// Reverse update `(x_k − β_k/√(1−ᾱ_k) ε̂)/√α_k + σ_k w`; `w = None` adds no noise.
pub fn ddpm_update(x_k: &[f64], eps_hat: &[f64], k: usize, schedule: &NoiseSchedule, w: Option<&[f64]>) -> Vec<f64> {
    let coef = schedule.beta(k) / (1.0 - schedule.alpha_bar(k)).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alpha(k).sqrt();
    let sigma = schedule.sigma(k);
    x_k.iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (x, e))| {
            let mean = inv_sqrt_alpha * (x - coef * e);
            match w {
                Some(w) => mean + sigma * w[i],
                None => mean,
            }
        })
        .collect()
}

fn standard_normals(n: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// One reverse step from `x_k`; the final step (`k = 1`) is noise-free.
pub fn ddpm_step(
    x_k: &[f64],
    k: usize,
    gso: &Gso,
    params: &GnnParams,
    schedule: &NoiseSchedule,
    rng: &mut impl rand::Rng,
) -> Result<Vec<f64>> {
    if k == 0 || k > schedule.steps() {
        return Err(Error::Contract(format!(
            "reverse step {k} outside 1..={}",
            schedule.steps()
        )));
    }
    let eps_hat = crate::gnn::predict_noise(x_k, k, gso, params)?;
    let w = (k > 1).then(|| standard_normals(x_k.len(), rng));
    Ok(ddpm_update(x_k, &eps_hat, k, schedule, w.as_deref()))
}

/// Runs independent reverse chains on one graph, one per seed, and returns
/// the final diffusion-space signals (no projection).
///
/// Chains are evaluated together but each draws only from its own seeded
/// stream, so a chain's output does not depend on the others.
pub fn sample_chains(gso: &Gso, params: &GnnParams, schedule: &NoiseSchedule, seeds: &[u64]) -> Result<Vec<Vec<f64>>> {
    let n = gso.n();
    let mut rngs: Vec<_> = seeds.iter().map(|&s| rng_from_seed(s)).collect();
    let mut xs: Vec<Vec<f64>> = rngs.iter_mut().map(|r| standard_normals(n, r)).collect();
    for k in (1..=schedule.steps()).rev() {
        let signals: Vec<(usize, &[f64], usize)> = xs.iter().map(|x| (0, x.as_slice(), k)).collect();
        let batch = GraphBatch::new(&[gso], &signals)?;
        let eps_hat = predict_noise_batch(params, &batch)?;
        xs = xs
            .iter()
            .zip(&eps_hat)
            .zip(rngs.iter_mut())
            .map(|((x, e), rng)| {
                let w = (k > 1).then(|| standard_normals(n, rng));
                ddpm_update(x, e, k, schedule, w.as_deref())
            })
            .collect();
        if xs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("reverse chain diverged at step {k}")));
        }
    }
    Ok(xs)
}

/// Power allocations from independent reverse chains, projected onto `[0, p_max]^N`.
pub fn sample_policies(
    gso: &Gso,
    params: &GnnParams,
    schedule: &NoiseSchedule,
    p_max: f64,
    seeds: &[u64],
) -> Result<Vec<Vec<f64>>> {
    Ok(sample_chains(gso, params, schedule, seeds)?
        .iter()
        .map(|y| from_diffusion_space(y, p_max))
        .collect())
}

pub fn sample_policy(
    gso: &Gso,
    params: &GnnParams,
    schedule: &NoiseSchedule,
    p_max: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(sample_policies(gso, params, schedule, p_max, &[seed])?.remove(0))
}
