//! Graph-filter noise predictor.
//!
//! Read-in lifts each node's noisy power and adds an MLP-transformed
//! sinusoidal embedding of the diffusion step; a cascade of polynomial
//! graph-filter layers `Σ_m H^m Z Θ_m` (each followed by per-node layer
//! normalization and a pointwise nonlinearity) mixes information along the
//! graph; a per-node MLP reads the noise estimate out. Every operation is
//! per-node or a graph filter, so the map is permutation equivariant and
//! its parameter count does not depend on the number of nodes.

use std::rc::Rc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{RowBlock, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::netgen::Gso;
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnConfig {
    pub n_layers: usize,
    /// Hidden features per graph-filter layer.
    pub features: usize,
    /// Filter taps beyond the identity term.
    pub hops: usize,
    /// Read-in width (sinusoidal embedding dimension).
    pub embed_dim: usize,
    pub activation: Activation,
    pub norm_eps: f64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            features: 64,
            hops: 2,
            embed_dim: 64,
            activation: Activation::Relu,
            norm_eps: 1e-5,
        }
    }
}

impl GnnConfig {
    /// Six layers of 128 features with two hops.
    pub fn full_scale() -> Self {
        Self {
            n_layers: 6,
            features: 128,
            embed_dim: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.features == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig(
                "GNN layers, features and embedding must be >= 1".into(),
            ));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::InvalidConfig("norm_eps must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// All learnable tensors, stored flat with a manifest of `(name, shape, offset)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnParams {
    pub config: GnnConfig,
    pub entries: Vec<ParamEntry>,
    #[serde(with = "crate::codec::b64")]
    pub values: Vec<f64>,
}

/// Initialization rule for one tensor.
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Const(f64),
}

fn layout(cfg: &GnnConfig) -> Vec<(String, usize, usize, Init)> {
    let (f0, f) = (cfg.embed_dim, cfg.features);
    let mut specs = vec![
        ("readin.x.weight".to_string(), 1, f0, Init::FanIn(1)),
        ("readin.x.bias".to_string(), 1, f0, Init::FanIn(1)),
        ("readin.t.weight1".to_string(), f0, f0, Init::FanIn(f0)),
        ("readin.t.bias1".to_string(), 1, f0, Init::FanIn(f0)),
        ("readin.t.weight2".to_string(), f0, f0, Init::FanIn(f0)),
        ("readin.t.bias2".to_string(), 1, f0, Init::FanIn(f0)),
    ];
    let mut f_in = f0;
    for l in 0..cfg.n_layers {
        for m in 0..=cfg.hops {
            specs.push((format!("layer{l}.tap{m}"), f_in, f, Init::FanIn(f_in * (cfg.hops + 1))));
        }
        specs.push((format!("layer{l}.norm.gain"), 1, f, Init::Const(1.0)));
        specs.push((format!("layer{l}.norm.bias"), 1, f, Init::Const(0.0)));
        f_in = f;
    }
    specs.push(("readout.weight1".to_string(), f, f, Init::FanIn(f)));
    specs.push(("readout.bias1".to_string(), 1, f, Init::FanIn(f)));
    specs.push(("readout.weight2".to_string(), f, 1, Init::FanIn(f)));
    specs.push(("readout.bias2".to_string(), 1, 1, Init::FanIn(f)));
    specs
}

impl GnnParams {
    pub fn init(config: &GnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut entries = Vec::new();
        let mut values = Vec::new();
        for (name, rows, cols, init) in layout(config) {
            entries.push(ParamEntry {
                name,
                rows,
                cols,
                offset: values.len(),
            });
            for _ in 0..rows * cols {
                values.push(match init {
                    Init::FanIn(fan) => {
                        let bound = 1.0 / (fan as f64).sqrt();
                        rng.random_range(-bound..bound)
                    }
                    Init::Const(c) => c,
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            entries,
            values,
        })
    }

    /// Number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<Matrix> {
        self.entry(name).map(|e| self.slice_matrix(e))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.entry(name)?.clone();
        Some(&mut self.values[e.offset..e.offset + e.rows * e.cols])
    }

    fn slice_matrix(&self, e: &ParamEntry) -> Matrix {
        let data = self.values[e.offset..e.offset + e.rows * e.cols].to_vec();
        Matrix::from_vec(e.rows, e.cols, data).expect("manifest shape")
    }

    /// Checks the manifest against the config layout and value count.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let expected = layout(&self.config);
        let mut offset = 0;
        if expected.len() != self.entries.len() {
            return Err(Error::Integrity("parameter manifest does not match config".into()));
        }
        for ((name, rows, cols, _), e) in expected.iter().zip(&self.entries) {
            if *name != e.name || *rows != e.rows || *cols != e.cols || e.offset != offset {
                return Err(Error::Integrity(format!("parameter manifest mismatch at {}", e.name)));
            }
            offset += rows * cols;
        }
        if offset != self.values.len() {
            return Err(Error::Integrity("parameter count does not match manifest".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Records every tensor on `tape`, as differentiable leaves if `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundParams> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                let m = self.slice_matrix(e);
                if trainable {
                    tape.param(m)
                } else {
                    tape.constant(m)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { vars })
    }

    /// Flat gradient aligned with `values`, after `tape.backward`.
    pub fn gather_grads(&self, tape: &Tape, bound: &BoundParams) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for (e, v) in self.entries.iter().zip(&bound.vars) {
            if let Some(g) = tape.grad(*v) {
                out[e.offset..e.offset + e.rows * e.cols].copy_from_slice(g.as_slice());
            }
        }
        out
    }
}

/// Parameter tensors recorded on a tape, in manifest order.
pub struct BoundParams {
    vars: Vec<Var>,
}

/// A set of noisy signals, each attached to one of a list of graphs.
///
/// Rows of the stacked node matrix are grouped per signal; all nodes of a
/// signal share that signal's diffusion step.
pub struct GraphBatch {
    shifts: Rc<[Matrix]>,
    blocks: Rc<[RowBlock]>,
    x: Matrix,
    steps: Vec<usize>,
}

impl GraphBatch {
    /// `signals[s] = (graph index, x_k, k)`.
    pub fn new(gsos: &[&Gso], signals: &[(usize, &[f64], usize)]) -> Result<Self> {
        let shifts: Rc<[Matrix]> = gsos.iter().map(|g| g.edges.clone()).collect();
        let mut blocks = Vec::with_capacity(signals.len());
        let mut data = Vec::new();
        let mut steps = Vec::with_capacity(signals.len());
        for &(g, x, k) in signals {
            let gso = gsos
                .get(g)
                .ok_or_else(|| Error::Contract(format!("signal refers to missing graph {g}")))?;
            if x.len() != gso.n() {
                return Err(Error::Shape {
                    op: "GraphBatch",
                    detail: format!("signal of length {} on a {}-node graph", x.len(), gso.n()),
                });
            }
            blocks.push(RowBlock {
                start: data.len(),
                len: x.len(),
                shift: g,
            });
            data.extend_from_slice(x);
            steps.push(k);
        }
        let rows = data.len();
        Ok(Self {
            shifts,
            blocks: blocks.into(),
            x: Matrix::from_vec(rows, 1, data)?,
            steps,
        })
    }

    pub fn n_signals(&self) -> usize {
        self.steps.len()
    }

    pub fn n_rows(&self) -> usize {
        self.x.rows()
    }

    pub fn blocks(&self) -> &[RowBlock] {
        &self.blocks
    }
}

/// `sin`/`cos` pairs at geometrically spaced frequencies.
pub fn sinusoidal_embed(k: usize, dim: usize) -> Vec<f64> {
    let k = k as f64;
    (0..dim)
        .map(|c| {
            let pair = (c / 2) * 2;
            let freq = 10000f64.powf(pair as f64 / dim as f64);
            if c % 2 == 0 {
                (k / freq).sin()
            } else {
                (k / freq).cos()
            }
        })
        .collect()
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Silu => tape.silu(x),
    }
}

/// Read-in: `Φ_x(x_k) + Φ_k(k)` broadcast per node. Returns `rows x F0`.
pub fn read_in(tape: &mut Tape, p: &BoundParams, batch: &GraphBatch, act: Activation) -> Result<Var> {
    let dim = tape.value(p.vars[0]).cols();
    let emb_rows: Vec<Vec<f64>> = batch.steps.iter().map(|&k| sinusoidal_embed(k, dim)).collect();
    let emb = tape.constant(Matrix::from_rows(&emb_rows)?)?;
    let t = tape.matmul(emb, p.vars[2])?;
    let t = tape.add_row(t, p.vars[3])?;
    let t = activate(tape, t, act)?;
    let t = tape.matmul(t, p.vars[4])?;
    let t = tape.add_row(t, p.vars[5])?;
    let counts: Rc<[usize]> = batch.blocks.iter().map(|b| b.len).collect();
    let t = tape.expand_rows(t, counts)?;

    let x = tape.constant(batch.x.clone())?;
    let lift = tape.matmul(x, p.vars[0])?;
    let lift = tape.add_row(lift, p.vars[1])?;
    tape.add(lift, t)
}

/// One graph-filter layer: `act(norm(Σ_{m=0}^{M} H^m Z Θ_m))`.
pub fn gcn_layer(
    tape: &mut Tape,
    z: Var,
    taps: &[Var],
    norm: Option<(Var, Var, f64)>,
    act: Activation,
    batch: &GraphBatch,
) -> Result<Var> {
    let (sum, _) = filter_sum(tape, z, taps, batch)?;
    let normed = match norm {
        Some((gain, bias, eps)) => tape.layer_norm(sum, gain, bias, eps)?,
        None => sum,
    };
    activate(tape, normed, act)
}

/// `Σ_m H^m Z Θ_m` by iterated shifts; also returns the last shifted signal.
pub fn filter_sum(tape: &mut Tape, z: Var, taps: &[Var], batch: &GraphBatch) -> Result<(Var, Var)> {
    let mut shifted = z;
    let mut sum = tape.matmul(z, taps[0])?;
    for tap in &taps[1..] {
        shifted = tape.graph_shift(shifted, batch.shifts.clone(), batch.blocks.clone())?;
        let term = tape.matmul(shifted, *tap)?;
        sum = tape.add(sum, term)?;
    }
    Ok((sum, shifted))
}

/// Full noise predictor on a batch; returns a `rows x 1` node for the noise estimate.
pub fn forward(tape: &mut Tape, params: &GnnParams, bound: &BoundParams, batch: &GraphBatch) -> Result<Var> {
    let cfg = &params.config;
    let act = cfg.activation;
    let mut z = read_in(tape, bound, batch, act)?;
    let per_layer = cfg.hops + 3;
    for l in 0..cfg.n_layers {
        let base = 6 + l * per_layer;
        let taps = &bound.vars[base..base + cfg.hops + 1];
        let gain = bound.vars[base + cfg.hops + 1];
        let bias = bound.vars[base + cfg.hops + 2];
        z = gcn_layer(tape, z, taps, Some((gain, bias, cfg.norm_eps)), act, batch)?;
    }
    let r = 6 + cfg.n_layers * per_layer;
    let h = tape.matmul(z, bound.vars[r])?;
    let h = tape.add_row(h, bound.vars[r + 1])?;
    let h = activate(tape, h, act)?;
    let out = tape.matmul(h, bound.vars[r + 2])?;
    tape.add_row(out, bound.vars[r + 3])
}

/// Noise estimates for a batch, one vector per signal.
pub fn predict_noise_batch(params: &GnnParams, batch: &GraphBatch) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false)?;
    let out = forward(&mut tape, params, &bound, batch)?;
    let values = tape.value(out).as_slice();
    Ok(batch
        .blocks
        .iter()
        .map(|b| values[b.start..b.start + b.len].to_vec())
        .collect())
}

/// `ε_θ(x_k, k; H)` for a single signal.
pub fn predict_noise(x_k: &[f64], k: usize, gso: &Gso, params: &GnnParams) -> Result<Vec<f64>> {
    let batch = GraphBatch::new(&[gso], &[(0, x_k, k)])?;
    Ok(predict_noise_batch(params, &batch)?.remove(0))
}
