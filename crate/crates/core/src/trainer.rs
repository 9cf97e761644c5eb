//! Noise-predictor training: Adam, cosine warm restarts, validation
//! rollouts and best-checkpoint selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::diffusion::{
    ddpm_loss_on_tape, to_diffusion_space, DiffusionBatch, LossWeighting, NoiseSchedule, ScheduleDescriptor,
};
use crate::error::{Error, Result};
use crate::eval::{horizon_metrics, rollout, GdmMode, PolicySource, RolloutReport, RolloutSeeds};
use crate::expert::ExpertBuffer;
use crate::gnn::{GnnConfig, GnnParams};
use crate::netgen::{Gso, NetworkConfig, NetworkState};
use crate::seed::{derive_seed, rng_from_seed};

pub const LR_MIN: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_graphs: usize,
    pub signals_per_graph: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// First warm-restart period, in epochs.
    pub restart_period: f64,
    pub restart_mult: f64,
    pub validate_every: usize,
    /// Rollout length of each validation run.
    pub val_steps: usize,
    pub val_mode: GdmMode,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub weighting: LossWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 2000,
            batch_graphs: 8,
            signals_per_graph: 64,
            lr_init: 1e-2,
            lr_min: LR_MIN,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            restart_period: 250.0,
            restart_mult: 2.0,
            validate_every: 100,
            val_steps: 200,
            val_mode: GdmMode::PerStep,
            grad_clip: Some(1.0),
            weighting: LossWeighting::default(),
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self {
            max_epochs: 10_000,
            batch_graphs: 16,
            signals_per_graph: 250,
            validate_every: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.max_epochs,
            self.batch_graphs,
            self.signals_per_graph,
            self.validate_every,
            self.val_steps,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidConfig("training counts must be at least 1".into()));
        }
        if !(self.lr_init > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return Err(Error::InvalidConfig(
                "need 0 <= lr_min <= lr_init and lr_init > 0".into(),
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig(
                "Adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if !(self.restart_period > 0.0 && self.restart_mult >= 1.0) {
            return Err(Error::InvalidConfig(
                "restart period must be positive and multiplier >= 1".into(),
            ));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidConfig("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters are left untouched on error.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != grads.len() || state.v.len() != grads.len() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    let t = state.t + 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    let mut next = params.to_vec();
    for i in 0..grads.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grads[i] * grads[i];
        next[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
    }
    if next.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("non-finite parameter after Adam update".into()));
    }
    params.copy_from_slice(&next);
    *state = AdamState { m, v, t };
    Ok(())
}

/// Cosine decay with warm restarts at a (possibly fractional) epoch.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let mut t = epoch.max(0.0);
    let mut period = cfg.restart_period;
    while t >= period {
        t -= period;
        period *= cfg.restart_mult;
    }
    cfg.lr_min + (cfg.lr_init - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t / period).cos()) / 2.0
}

/// Shuffled mini-batches covering every graph exactly once.
pub fn epoch_batches(n_graphs: usize, batch: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_graphs).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Scales `grads` in place so the global norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub mean_rate: f64,
    pub p5_rate: f64,
    pub satisfaction: f64,
}

impl ValidationMetrics {
    /// Higher 5th percentile wins, then higher mean.
    fn beats(&self, other: &Self) -> bool {
        (self.p5_rate, self.mean_rate) > (other.p5_rate, other.mean_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngDescriptor {
    pub algorithm: String,
    pub seed: u64,
    pub stream: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub params: GnnParams,
    pub schedule: ScheduleDescriptor,
    pub train: TrainConfig,
    pub epoch: usize,
    pub validation: Option<ValidationMetrics>,
    pub rng: RngDescriptor,
}

const CHECKPOINT_FORMAT: &str = "diffalloc.checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn gnn_config(&self) -> &GnnConfig {
        &self.params.config
    }

    /// Rebuilds the schedule and verifies it against the stored hash.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_descriptor(&self.schedule)
    }

    pub fn check(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        self.params.check()?;
        self.schedule()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        ckpt.check()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub struct TrainGraph<'a> {
    pub gso: &'a Gso,
    pub buffer: &'a ExpertBuffer,
}

pub struct ValGraph<'a> {
    pub network_id: usize,
    pub state: &'a NetworkState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub validation: Option<ValidationMetrics>,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("epoch,loss,lr,val_mean_rate,val_p5,val_feas_frac\n");
    for r in rows {
        let v = r
            .validation
            .map(|v| format!("{},{},{}", v.mean_rate, v.p5_rate, v.satisfaction))
            .unwrap_or_else(|| ",,".into());
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.lr, v));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub trace: Vec<TraceRow>,
    /// Set when a non-finite loss or update stopped training early.
    pub diverged: Option<String>,
}

/// Rollouts of arbitrary sources on the validation networks, pooled into one metric bundle.
pub fn validate_with<'s>(
    val: &[ValGraph<'_>],
    network: &NetworkConfig,
    steps: usize,
    seed: u64,
    source: impl Fn(usize) -> PolicySource<'s>,
) -> Result<(ValidationMetrics, Vec<RolloutReport>)> {
    let reports = val
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let seeds = RolloutSeeds {
                fading: derive_seed(seed, "validate/fading", g.network_id as u64),
                policy: derive_seed(seed, "validate/policy", g.network_id as u64),
            };
            rollout(&source(i), g.state, g.network_id, network, steps, seeds)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = horizon_metrics(&reports, network.f_min, steps)?;
    Ok((
        ValidationMetrics {
            mean_rate: m.mean_rate,
            p5_rate: m.p5_rate,
            satisfaction: m.satisfaction,
        },
        reports,
    ))
}

/// GDM validation metrics for a set of parameters.
pub fn validate(
    params: &GnnParams,
    schedule: &NoiseSchedule,
    val: &[ValGraph<'_>],
    network: &NetworkConfig,
    steps: usize,
    mode: GdmMode,
    seed: u64,
) -> Result<ValidationMetrics> {
    let source = |_| PolicySource::Gdm { params, schedule, mode };
    Ok(validate_with(val, network, steps, seed, source)?.0)
}

/// Loss and gradient of one mini-batch.
fn batch_gradient(
    params: &GnnParams,
    graphs: &[&Gso],
    data: &[&[Vec<f64>]],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut impl rand::Rng,
) -> Result<(f64, Vec<f64>)> {
    let k_max = schedule.steps();
    let total = graphs.len() * cfg.signals_per_graph;
    let mut batch = DiffusionBatch {
        gsos: graphs.to_vec(),
        graph: Vec::with_capacity(total),
        x0: Vec::with_capacity(total),
        steps: Vec::with_capacity(total),
        eps: Vec::with_capacity(total),
    };
    for (g, rows) in data.iter().enumerate() {
        for _ in 0..cfg.signals_per_graph {
            let row = &rows[rng.random_range(0..rows.len())];
            batch.graph.push(g);
            batch.x0.push(row.clone());
            batch.steps.push(rng.random_range(1..=k_max));
            batch
                .eps
                .push((0..row.len()).map(|_| rng.sample(StandardNormal)).collect());
        }
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true)?;
    let loss = ddpm_loss_on_tape(&mut tape, params, &bound, &batch, schedule, &cfg.weighting)?;
    tape.backward(loss)?;
    Ok((tape.scalar(loss), params.gather_grads(&tape, &bound)))
}

/// Trains a noise predictor on the expert buffers of `train_set`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    train_set: &[TrainGraph<'_>],
    val: &[ValGraph<'_>],
    gnn: &GnnConfig,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    network: &NetworkConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    gnn.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training needs at least one graph".into()));
    }
    for g in train_set {
        if g.buffer.is_empty() || g.buffer.n() != g.gso.n() {
            return Err(Error::Contract(format!(
                "buffer of network {} does not match its graph",
                g.buffer.network_id
            )));
        }
    }
    let data: Vec<Vec<Vec<f64>>> = train_set
        .iter()
        .map(|g| {
            (0..g.buffer.len())
                .map(|b| to_diffusion_space(g.buffer.row(b), network.p_max))
                .collect()
        })
        .collect();

    let mut params = GnnParams::init(gnn, derive_seed(seed, "train/init", 0))?;
    let mut adam = AdamState::new(params.count());
    let batch_stream = derive_seed(seed, "train/batches", 0);
    let mut rng = rng_from_seed(batch_stream);
    let val_seed = derive_seed(seed, "train/validate", 0);

    let checkpoint = |params: &GnnParams, epoch, validation| Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        params: params.clone(),
        schedule: schedule.descriptor(),
        train: cfg.clone(),
        epoch,
        validation,
        rng: RngDescriptor {
            algorithm: "chacha12".into(),
            seed: batch_stream,
            stream: "train/batches".into(),
        },
    };

    let mut best: Option<Checkpoint> = None;
    let mut trace = Vec::with_capacity(cfg.max_epochs);
    let mut diverged = None;
    let mut last_epoch = 0;

    'epochs: for epoch in 0..cfg.max_epochs {
        let batches = epoch_batches(train_set.len(), cfg.batch_graphs, &mut rng);
        let n_batches = batches.len();
        let mut loss_sum = 0.0;
        for (b, members) in batches.iter().enumerate() {
            let lr = lr_at(epoch as f64 + b as f64 / n_batches as f64, cfg);
            let gsos: Vec<&Gso> = members.iter().map(|&g| train_set[g].gso).collect();
            let rows: Vec<&[Vec<f64>]> = members.iter().map(|&g| data[g].as_slice()).collect();
            let step = batch_gradient(&params, &gsos, &rows, schedule, cfg, &mut rng).and_then(|(loss, mut grads)| {
                if let Some(c) = cfg.grad_clip {
                    clip_grad_norm(&mut grads, c);
                }
                adam_step(&mut params.values, &grads, &mut adam, lr, cfg)?;
                Ok(loss)
            });
            match step {
                Ok(loss) => loss_sum += loss,
                Err(Error::Numerical(msg)) => {
                    diverged = Some(format!("epoch {}: {msg}", epoch + 1));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        last_epoch = epoch + 1;
        let mut row = TraceRow {
            epoch: last_epoch,
            loss: loss_sum / n_batches as f64,
            lr: lr_at(epoch as f64, cfg),
            validation: None,
        };
        if !val.is_empty() && (last_epoch % cfg.validate_every == 0 || last_epoch == cfg.max_epochs) {
            let m = validate(&params, schedule, val, network, cfg.val_steps, cfg.val_mode, val_seed)?;
            row.validation = Some(m);
            if best.as_ref().and_then(|b| b.validation).is_none_or(|b| m.beats(&b)) {
                best = Some(checkpoint(&params, last_epoch, Some(m)));
            }
        }
        trace.push(row);
    }

    let best = match best {
        Some(b) => b,
        None => checkpoint(&params, last_epoch, None),
    };
    Ok(TrainOutcome { best, trace, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, sample_policies, ScheduleKind};
    use crate::expert::FeasibilityReport;
    use crate::gnn::predict_noise;
    use crate::matrix::Matrix;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn adam_zero_gradient_is_identity() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.3, -1.2, 4.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 0.1, &cfg).unwrap();
        assert_eq!(p, vec![0.3, -1.2, 4.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        for g in [3.7, -0.02, 1e3] {
            let mut p = vec![1.0];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g], &mut s, 0.01, &cfg).unwrap();
            assert!(((1.0 - p[0]).abs() - 0.01).abs() < 1e-8, "{g}: {}", p[0]);
        }
    }

    #[test]
    fn adam_three_step_scalar_trace() {
        let cfg = TrainConfig::default();
        let grads = [0.5, -1.5, 2.0];
        let lr = 0.03;
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 2.0f64);
        let mut p = vec![2.0];
        let mut s = AdamState::new(1);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
            adam_step(&mut p, &[*g], &mut s, lr, &cfg).unwrap();
            assert!((p[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_rejects_bad_input() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2);
        assert!(matches!(
            adam_step(&mut p, &[1.0], &mut s, 0.1, &cfg),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            adam_step(&mut p, &[f64::NAN, 1.0], &mut s, 0.1, &cfg),
            Err(Error::Numerical(_))
        ));
        assert_eq!((p, s.t), (vec![1.0, 2.0], 0));
    }

    #[test]
    fn lr_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        let (t0, hi, lo) = (cfg.restart_period, cfg.lr_init, cfg.lr_min);
        assert_eq!(lr_at(0.0, &cfg), hi);
        assert!((lr_at(t0 - 1e-9, &cfg) - lo).abs() < 1e-12);
        assert_eq!(lr_at(t0, &cfg), hi);
        assert!((lr_at(t0 / 2.0, &cfg) - (hi + lo) / 2.0).abs() < 1e-15);
        // second cycle is twice as long
        assert!((lr_at(t0 + t0, &cfg) - (hi + lo) / 2.0).abs() < 1e-15);
        assert_eq!(lr_at(3.0 * t0, &cfg), hi);
    }

    #[test]
    fn batches_cover_each_graph_once() {
        let mut rng = rng_from_seed(4);
        for (n, b) in [(10, 8), (16, 16), (7, 3), (1, 8)] {
            let batches = epoch_batches(n, b, &mut rng);
            let mut seen: Vec<usize> = batches.concat();
            seen.sort();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            assert!(batches.iter().all(|x| x.len() <= b));
        }
    }

    #[test]
    fn grad_clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = vec![0.3, 0.4];
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    proptest! {
        #[test]
        fn zero_learning_rate_is_a_fixed_point(
            p in prop::collection::vec(-5.0..5.0f64, 1..8),
            seed in 0u64..1000,
        ) {
            let cfg = TrainConfig::default();
            let mut rng = rng_from_seed(seed);
            let mut x = p.clone();
            let mut s = AdamState::new(p.len());
            for _ in 0..5 {
                let g: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-10.0..10.0)).collect();
                adam_step(&mut x, &g, &mut s, 0.0, &cfg).unwrap();
            }
            prop_assert_eq!(x, p);
        }

        #[test]
        fn lr_stays_in_range(epoch in 0.0..5000.0f64) {
            let cfg = TrainConfig::default();
            let lr = lr_at(epoch, &cfg);
            prop_assert!(lr >= cfg.lr_min - 1e-18 && lr <= cfg.lr_init + 1e-18);
        }
    }

    fn tiny_gnn() -> GnnConfig {
        GnnConfig {
            n_layers: 2,
            features: 16,
            hops: 1,
            embed_dim: 16,
            ..GnnConfig::default()
        }
    }

    fn point_buffer(rows: Vec<Vec<f64>>) -> ExpertBuffer {
        let n = rows[0].len();
        ExpertBuffer {
            network_id: 0,
            samples: Matrix::from_rows(&rows).unwrap(),
            final_lambdas: vec![0.0; n],
            report: FeasibilityReport {
                running_rates: vec![0.0; n],
                f_min: 0.0,
                satisfied_fraction: 1.0,
                violated: vec![],
            },
        }
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            max_epochs: epochs,
            signals_per_graph: 256,
            restart_period: 1e6,
            lr_init: 3e-3,
            validate_every: 1000,
            val_steps: 4,
            ..TrainConfig::default()
        }
    }

    fn toy_network() -> (NetworkState, NetworkConfig) {
        let gains = Matrix::from_rows(&[
            vec![2e-8, 1e-10, 3e-10],
            vec![2e-10, 5e-9, 1e-10],
            vec![1e-10, 4e-10, 1e-8],
        ])
        .unwrap();
        let cfg = NetworkConfig {
            n_pairs: 3,
            ..NetworkConfig::default()
        };
        (NetworkState::from_gains(gains).unwrap(), cfg)
    }

    #[test]
    fn point_mass_loss_decreases() {
        let (state, net) = toy_network();
        let gso = crate::netgen::build_gso(&state, &net).unwrap();
        let buf = point_buffer(vec![vec![0.008, 0.001, 0.005]; 4]);
        let schedule = make_schedule(ScheduleKind::Cosine, 50).unwrap();
        let set = [TrainGraph {
            gso: &gso,
            buffer: &buf,
        }];
        let cfg = TrainConfig {
            signals_per_graph: 1024,
            ..quick_cfg(50)
        };
        let out = train(&set, &[], &tiny_gnn(), &schedule, &cfg, &net, 3).unwrap();
        assert_eq!(out.trace.len(), 50);
        let windows: Vec<f64> = out
            .trace
            .chunks(10)
            .map(|w| w.iter().map(|r| r.loss).sum::<f64>() / w.len() as f64)
            .collect();
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
        assert!(out.diverged.is_none());
    }

    #[test]
    fn training_is_deterministic() {
        let (state, net) = toy_network();
        let gso = crate::netgen::build_gso(&state, &net).unwrap();
        let buf = point_buffer(vec![vec![0.008, 0.001, 0.005], vec![0.0, 0.01, 0.002]]);
        let schedule = make_schedule(ScheduleKind::Cosine, 20).unwrap();
        let set = [TrainGraph {
            gso: &gso,
            buffer: &buf,
        }];
        let val = [ValGraph {
            network_id: 0,
            state: &state,
        }];
        let cfg = TrainConfig {
            validate_every: 2,
            ..quick_cfg(4)
        };
        let a = train(&set, &val, &tiny_gnn(), &schedule, &cfg, &net, 9).unwrap();
        let b = train(&set, &val, &tiny_gnn(), &schedule, &cfg, &net, 9).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.best, b.best);
        assert!(a.trace[1].validation.is_some() && a.trace[0].validation.is_none());
        assert_eq!(trace_csv(&a.trace).lines().count(), 5);
        let c = train(&set, &val, &tiny_gnn(), &schedule, &cfg, &net, 10).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let (state, net) = toy_network();
        let gso = crate::netgen::build_gso(&state, &net).unwrap();
        let buf = point_buffer(vec![vec![0.008, 0.001, 0.005]]);
        let schedule = make_schedule(ScheduleKind::Cosine, 20).unwrap();
        let set = [TrainGraph {
            gso: &gso,
            buffer: &buf,
        }];
        let out = train(&set, &[], &tiny_gnn(), &schedule, &quick_cfg(2), &net, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        out.best.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, out.best);
        let x = [0.1, -0.3, 0.2];
        let a = predict_noise(&x, 7, &gso, &out.best.params).unwrap();
        let b = predict_noise(&x, 7, &gso, &back.params).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.schedule().unwrap(), schedule);

        let mut tampered = out.best.clone();
        tampered.version = 99;
        assert!(matches!(
            Checkpoint::from_json(&tampered.to_json().unwrap()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn untrained_validation_is_finite_and_reproducible() {
        let (state, net) = toy_network();
        let params = GnnParams::init(&tiny_gnn(), 2).unwrap();
        let schedule = make_schedule(ScheduleKind::Cosine, 20).unwrap();
        let val = [ValGraph {
            network_id: 0,
            state: &state,
        }];
        let a = validate(&params, &schedule, &val, &net, 10, GdmMode::PerStep, 5).unwrap();
        let b = validate(&params, &schedule, &val, &net, 10, GdmMode::PerStep, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.mean_rate.is_finite() && a.p5_rate.is_finite());
        assert!((0.0..=1.0).contains(&a.satisfaction));
    }

    #[test]
    fn expert_replay_validation_matches_feasibility_report() {
        let (state, mut net) = toy_network();
        net.f_min = 0.5;
        let expert = crate::expert::ExpertConfig {
            t_total: 600,
            t_burn: 100,
            buffer_capacity: 500,
            // iterates independent of the fading draw, so replay and run share a distribution
            subproblem_gains: crate::expert::SubproblemGains::LongTerm,
            ..Default::default()
        };
        let buf = crate::expert::run_expert(&state, 0, &expert, &net, 8).unwrap();
        let val = [ValGraph {
            network_id: 0,
            state: &state,
        }];
        let source = |_| PolicySource::ExpertReplay {
            buffer: &buf,
            uniform_resample: false,
        };
        let (_, reports) = validate_with(&val, &net, 2000, 4, source).unwrap();
        let replayed = reports[0].running_at(2000);
        for (r, e) in replayed.iter().zip(&buf.report.running_rates) {
            // fading is unit-mean exponential; ~2000 draws put the estimator within a few percent
            assert!((r - e).abs() < 0.08 * e.max(0.5), "{r} vs {e}");
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig {
                max_epochs: 0,
                ..Default::default()
            },
            TrainConfig {
                lr_init: 0.0,
                ..Default::default()
            },
            TrainConfig {
                beta2: 1.0,
                ..Default::default()
            },
            TrainConfig {
                restart_mult: 0.5,
                ..Default::default()
            },
            TrainConfig {
                grad_clip: Some(0.0),
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        }
        TrainConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn bimodal_buffer_is_reproduced() {
        let (state, net) = toy_network();
        let gso = crate::netgen::build_gso(&state, &net).unwrap();
        let p = net.p_max;
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|i| if i % 2 == 0 { vec![p, 0.0, p] } else { vec![0.0, p, 0.0] })
            .collect();
        let buf = point_buffer(rows);
        let schedule = make_schedule(ScheduleKind::Cosine, 50).unwrap();
        let set = [TrainGraph {
            gso: &gso,
            buffer: &buf,
        }];
        let cfg = TrainConfig {
            lr_init: 1e-2,
            restart_period: 150.0,
            restart_mult: 1.0,
            ..quick_cfg(150)
        };
        let out = train(&set, &[], &tiny_gnn(), &schedule, &cfg, &net, 12).unwrap();
        let seeds: Vec<u64> = (0..200).collect();
        let samples = sample_policies(&gso, &out.best.params, &schedule, p, &seeds).unwrap();
        let high = samples.iter().filter(|x| x[0] > p / 2.0).count() as f64 / 200.0;
        assert!((0.25..=0.75).contains(&high), "mode-0 mass {high}");
    }
}
