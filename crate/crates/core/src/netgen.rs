//! Interference-network instances: geometry, long-term gains, Rayleigh
//! fading, graph shift operators and instantaneous rates.
//!
//! Gain matrices use the convention `gains[(j, i)]` = power gain from
//! transmitter `j` to receiver `i`; the diagonal holds the direct links.

use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::rng_from_seed;

/// `dBm/Hz` to linear `W/Hz`.
pub fn dbm_per_hz_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub n_pairs: usize,
    /// Transmitter-receiver pairs per km².
    pub density_per_km2: f64,
    /// Maximum transmit power in watts.
    pub p_max: f64,
    pub bandwidth_hz: f64,
    /// Noise power spectral density, linear W/Hz.
    pub noise_psd: f64,
    pub shadowing_sigma_db: f64,
    pub breakpoint_m: f64,
    pub pathloss_exp_near: f64,
    pub pathloss_exp_far: f64,
    /// Path-loss reference constant at 1 m, in dB.
    pub pathloss_ref_db: f64,
    pub rx_dist_min_m: f64,
    pub rx_dist_max_m: f64,
    /// Minimum ergodic rate per receiver, bps/Hz.
    pub f_min: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_pairs: 100,
            density_per_km2: 12.0,
            p_max: 10e-3,
            bandwidth_hz: 20e6,
            noise_psd: dbm_per_hz_to_watts(-174.0),
            shadowing_sigma_db: 7.0,
            breakpoint_m: 100.0,
            pathloss_exp_near: 2.0,
            pathloss_exp_far: 4.0,
            pathloss_ref_db: -36.6,
            rx_dist_min_m: 10.0,
            rx_dist_max_m: 100.0,
            f_min: 0.6,
        }
    }
}

impl NetworkConfig {
    /// Side of the square deployment area in meters.
    pub fn area_side_m(&self) -> f64 {
        (self.n_pairs as f64 / self.density_per_km2).sqrt() * 1000.0
    }

    /// Thermal noise power `W · N0` in watts.
    pub fn noise_power(&self) -> f64 {
        self.bandwidth_hz * self.noise_psd
    }

    pub fn pathloss_ref(&self) -> f64 {
        10f64.powf(self.pathloss_ref_db / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.n_pairs < 2 {
            return bad("n_pairs must be at least 2");
        }
        if !(self.density_per_km2 > 0.0) || !self.area_side_m().is_finite() {
            return bad("density must be positive");
        }
        if !(self.p_max > 0.0 && self.bandwidth_hz > 0.0 && self.noise_psd > 0.0) {
            return bad("p_max, bandwidth and noise psd must be positive");
        }
        if !(self.shadowing_sigma_db >= 0.0) {
            return bad("shadowing sigma must be nonnegative");
        }
        if !(0.0 < self.rx_dist_min_m
            && self.rx_dist_min_m < self.rx_dist_max_m
            && self.rx_dist_max_m <= self.breakpoint_m)
        {
            return bad("need 0 < rx_dist_min < rx_dist_max <= breakpoint");
        }
        if !(self.pathloss_exp_near > 0.0 && self.pathloss_exp_far > 0.0) {
            return bad("path-loss exponents must be positive");
        }
        if !(self.f_min >= 0.0) {
            return bad("f_min must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    /// Long-term power gains, `gains[(j, i)]` from transmitter `j` to receiver `i`.
    pub gains: Matrix,
    pub tx_pos: Vec<[f64; 2]>,
    pub rx_pos: Vec<[f64; 2]>,
    pub seed: u64,
}

impl NetworkState {
    /// Builds a state from a gain matrix alone (no geometry).
    pub fn from_gains(gains: Matrix) -> Result<Self> {
        let state = Self {
            tx_pos: vec![[0.0; 2]; gains.rows()],
            rx_pos: vec![[0.0; 2]; gains.rows()],
            gains,
            seed: 0,
        };
        state.check()?;
        Ok(state)
    }

    pub fn n(&self) -> usize {
        self.gains.rows()
    }

    pub fn check(&self) -> Result<()> {
        if self.gains.rows() != self.gains.cols() || self.gains.rows() == 0 {
            return Err(Error::Shape {
                op: "NetworkState",
                detail: format!("gain matrix {:?}", self.gains.shape()),
            });
        }
        if !self.gains.as_slice().iter().all(|g| g.is_finite() && *g > 0.0) {
            return Err(Error::InvalidGeometry(
                "gains must be strictly positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// Relabels pairs: new pair `r` is old pair `perm[r]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            gains: self.gains.permute_symmetric(perm),
            tx_pos: perm.iter().map(|&p| self.tx_pos[p]).collect(),
            rx_pos: perm.iter().map(|&p| self.rx_pos[p]).collect(),
            seed: self.seed,
        }
    }
}

/// Instantaneous (fading) power gains, same indexing as [`NetworkState::gains`].
#[derive(Debug, Clone, PartialEq)]
pub struct FadingSample {
    pub gains: Matrix,
}

/// Graph shift operator: max-normalized log-gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gso {
    pub edges: Matrix,
    pub norm_constant: f64,
}

impl Gso {
    pub fn n(&self) -> usize {
        self.edges.rows()
    }

    /// A single-node graph with unit self-loop.
    pub fn singleton() -> Self {
        Self {
            edges: Matrix::identity(1),
            norm_constant: 1.0,
        }
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            edges: self.edges.permute_symmetric(perm),
            norm_constant: self.norm_constant,
        }
    }
}

/// Dual-slope path loss at distance `d` meters.
pub fn pathloss(d: f64, config: &NetworkConfig) -> Result<f64> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::InvalidGeometry(format!("distance {d} must be positive")));
    }
    let c = config.pathloss_ref();
    let bp = config.breakpoint_m;
    let (near, far) = (config.pathloss_exp_near, config.pathloss_exp_far);
    Ok(if d <= bp {
        c * d.powf(-near)
    } else {
        c * bp.powf(far - near) * d.powf(-far)
    })
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn generate_network(config: &NetworkConfig, seed: u64) -> Result<NetworkState> {
    config.validate()?;
    let n = config.n_pairs;
    let side = config.area_side_m();
    let mut rng = rng_from_seed(seed);

    let tx_pos: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random::<f64>() * side, rng.random::<f64>() * side])
        .collect();
    let rx_pos: Vec<[f64; 2]> = tx_pos
        .iter()
        .map(|t| {
            let d = rng.random_range(config.rx_dist_min_m..=config.rx_dist_max_m);
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            [t[0] + d * angle.cos(), t[1] + d * angle.sin()]
        })
        .collect();

    let sigma_log10 = config.shadowing_sigma_db / 10.0;
    let mut gains = Matrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let d = distance(tx_pos[j], rx_pos[i]);
            let z: f64 = StandardNormal.sample(&mut rng);
            gains[(j, i)] = pathloss(d, config)? * 10f64.powf(sigma_log10 * z);
        }
    }

    let state = NetworkState {
        gains,
        tx_pos,
        rx_pos,
        seed,
    };
    state.check()?;
    Ok(state)
}

/// Rayleigh fading: every gain scaled by an independent unit-mean exponential.
pub fn sample_fading(state: &NetworkState, seed: u64) -> FadingSample {
    let mut rng = rng_from_seed(seed);
    sample_fading_with(state, &mut rng)
}

pub fn sample_fading_with(state: &NetworkState, rng: &mut impl rand::Rng) -> FadingSample {
    let mut gains = state.gains.clone();
    for g in gains.as_mut_slice() {
        let e: f64 = Exp1.sample(rng);
        *g *= e;
    }
    FadingSample { gains }
}

pub fn build_gso(state: &NetworkState, config: &NetworkConfig) -> Result<Gso> {
    let snr_scale = config.p_max / config.noise_power();
    let mut edges = state.gains.clone();
    for g in edges.as_mut_slice() {
        *g = (1.0 + snr_scale * *g).log2();
    }
    let norm = edges.max();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidGeometry("degenerate channel: all-zero GSO".into()));
    }
    edges.as_mut_slice().iter_mut().for_each(|e| *e /= norm);
    Ok(Gso {
        edges,
        norm_constant: norm,
    })
}

pub(crate) fn check_power(x: &[f64], n: usize, p_max: f64) -> Result<()> {
    if x.len() != n {
        return Err(Error::Contract(format!(
            "power vector of length {} for {n} pairs",
            x.len()
        )));
    }
    if let Some(v) = x.iter().find(|v| !(**v >= 0.0 && **v <= p_max)) {
        return Err(Error::Contract(format!("power {v} outside [0, {p_max}]")));
    }
    Ok(())
}

/// Per-receiver `log2(1 + SINR)` in bps/Hz.
pub fn instantaneous_rates(x: &[f64], fading: &FadingSample, config: &NetworkConfig) -> Result<Vec<f64>> {
    let n = fading.gains.rows();
    check_power(x, n, config.p_max)?;
    Ok(rates_unchecked(x, &fading.gains, config.noise_power()))
}

pub(crate) fn rates_unchecked(x: &[f64], gains: &Matrix, noise: f64) -> Vec<f64> {
    let n = gains.rows();
    (0..n)
        .map(|i| {
            let mut interference = 0.0;
            for (j, &xj) in x.iter().enumerate() {
                if j != i {
                    interference += xj * gains[(j, i)];
                }
            }
            (1.0 + x[i] * gains[(i, i)] / (noise + interference)).log2()
        })
        .collect()
}
