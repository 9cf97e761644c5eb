//! Sequential policy execution under fresh fading, ergodic-rate
//! estimation and the comparison metrics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_policies, NoiseSchedule};
use crate::error::{Error, Result};
use crate::expert::ExpertBuffer;
use crate::gnn::GnnParams;
use crate::matrix::Matrix;
use crate::netgen::{build_gso, instantaneous_rates, sample_fading_with, NetworkConfig, NetworkState};
use crate::seed::{derive_seed, rng_from_seed};

/// Chains generated per batched reverse pass.
const CHAIN_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GdmMode {
    /// A fresh reverse chain for every time step.
    #[default]
    PerStep,
    /// `T` samples generated up front and executed in a random order.
    CacheAndPermute,
}

pub enum PolicySource<'a> {
    Gdm {
        params: &'a GnnParams,
        schedule: &'a NoiseSchedule,
        mode: GdmMode,
    },
    ExpertReplay {
        buffer: &'a ExpertBuffer,
        uniform_resample: bool,
    },
    AveragePower {
        power: Vec<f64>,
    },
    FullPower,
}

impl<'a> PolicySource<'a> {
    /// Fixed time average of the buffer's iterates.
    pub fn average_power(buffer: &'a ExpertBuffer) -> Self {
        PolicySource::AveragePower {
            power: buffer.mean_row(),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            PolicySource::Gdm { .. } => "gdm",
            PolicySource::ExpertReplay { .. } => "expert",
            PolicySource::AveragePower { .. } => "average_power",
            PolicySource::FullPower => "full_power",
        }
    }

    fn decisions(
        &self,
        state: &NetworkState,
        config: &NetworkConfig,
        steps: usize,
        policy_seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let n = state.n();
        let mut rng = rng_from_seed(derive_seed(policy_seed, "policy", 0));
        Ok(match self {
            PolicySource::FullPower => vec![vec![config.p_max; n]; steps],
            PolicySource::AveragePower { power } => {
                if power.len() != n {
                    return Err(Error::Contract("average power has the wrong length".into()));
                }
                vec![power.clone(); steps]
            }
            PolicySource::ExpertReplay {
                buffer,
                uniform_resample,
            } => {
                if buffer.n() != n || buffer.is_empty() {
                    return Err(Error::Contract("expert buffer does not match network".into()));
                }
                (0..steps)
                    .map(|s| {
                        if *uniform_resample {
                            buffer.sample_uniform(&mut rng).to_vec()
                        } else {
                            buffer.row(s % buffer.len()).to_vec()
                        }
                    })
                    .collect()
            }
            PolicySource::Gdm { params, schedule, mode } => {
                let gso = build_gso(state, config)?;
                let seeds: Vec<u64> = (0..steps as u64)
                    .map(|s| derive_seed(policy_seed, "gdm/chain", s))
                    .collect();
                let mut out = Vec::with_capacity(steps);
                for chunk in seeds.chunks(CHAIN_BATCH) {
                    out.extend(sample_policies(&gso, params, schedule, config.p_max, chunk)?);
                }
                if *mode == GdmMode::CacheAndPermute {
                    out.shuffle(&mut rng);
                }
                out
            }
        })
    }
}

/// Independent streams for fading draws and policy randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutSeeds {
    pub fading: u64,
    pub policy: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub source: String,
    pub network_id: usize,
    pub seeds: RolloutSeeds,
    pub gdm_mode: Option<GdmMode>,
    /// `T x N` instantaneous rates.
    pub instantaneous: Matrix,
    /// `T x N`; row `τ − 1` averages the first `τ` instantaneous rows.
    pub running: Matrix,
}

impl RolloutReport {
    pub fn steps(&self) -> usize {
        self.running.rows()
    }

    pub fn n(&self) -> usize {
        self.running.cols()
    }

    /// Running ergodic rates after `tau` steps.
    pub fn running_at(&self, tau: usize) -> &[f64] {
        self.running.row(tau - 1)
    }

    /// `step,receiver,running_rate` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,receiver,running_rate\n");
        for t in 0..self.steps() {
            for (i, r) in self.running.row(t).iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", t + 1, i, r));
            }
        }
        out
    }
}

/// Executes `source` for `steps` slots under fresh Rayleigh fading.
pub fn rollout(
    source: &PolicySource<'_>,
    state: &NetworkState,
    network_id: usize,
    config: &NetworkConfig,
    steps: usize,
    seeds: RolloutSeeds,
) -> Result<RolloutReport> {
    if steps == 0 {
        return Err(Error::Contract("rollout needs at least one step".into()));
    }
    let n = state.n();
    let decisions = source.decisions(state, config, steps, seeds.policy)?;
    let mut fading_rng = rng_from_seed(derive_seed(seeds.fading, "fading", 0));
    let mut inst = Vec::with_capacity(steps * n);
    let mut running = Vec::with_capacity(steps * n);
    let mut sums = vec![0.0; n];
    for (t, x) in decisions.iter().enumerate() {
        let fading = sample_fading_with(state, &mut fading_rng);
        let r = instantaneous_rates(x, &fading, config)?;
        for (s, v) in sums.iter_mut().zip(&r) {
            *s += v;
        }
        inst.extend_from_slice(&r);
        running.extend(sums.iter().map(|s| s / (t + 1) as f64));
    }
    Ok(RolloutReport {
        source: source.tag().to_string(),
        network_id,
        seeds,
        gdm_mode: match source {
            PolicySource::Gdm { mode, .. } => Some(*mode),
            _ => None,
        },
        instantaneous: Matrix::from_vec(steps, n, inst)?,
        running: Matrix::from_vec(steps, n, running)?,
    })
}

/// Nearest-rank percentile: the `⌈p/100 · n⌉`-th smallest value.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mean_rate: f64,
    pub p5_rate: f64,
    pub satisfaction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub horizons: Vec<HorizonMetrics>,
    /// Pooled mean running rate at every step.
    pub mean_trajectory: Vec<f64>,
    /// Pooled 5th-percentile running rate at every step.
    pub p5_trajectory: Vec<f64>,
}

fn pooled_at(reports: &[RolloutReport], tau: usize) -> Vec<f64> {
    reports.iter().flat_map(|r| r.running_at(tau).iter().copied()).collect()
}

pub fn horizon_metrics(reports: &[RolloutReport], f_min: f64, horizon: usize) -> Result<HorizonMetrics> {
    if reports.is_empty() {
        return Err(Error::Contract("no reports to summarize".into()));
    }
    if let Some(r) = reports.iter().find(|r| horizon == 0 || horizon > r.steps()) {
        return Err(Error::Contract(format!(
            "horizon {horizon} outside rollout of {} steps",
            r.steps()
        )));
    }
    let pooled = pooled_at(reports, horizon);
    let satisfied = pooled.iter().filter(|r| **r >= f_min).count();
    Ok(HorizonMetrics {
        horizon,
        mean_rate: pooled.iter().sum::<f64>() / pooled.len() as f64,
        p5_rate: nearest_rank_percentile(&pooled, 5.0),
        satisfaction: satisfied as f64 / pooled.len() as f64,
    })
}

/// Mean, 5th percentile and constraint satisfaction over the pooled receivers.
pub fn metrics(reports: &[RolloutReport], f_min: f64, horizons: &[usize]) -> Result<MetricSummary> {
    let per_horizon = horizons
        .iter()
        .map(|&h| horizon_metrics(reports, f_min, h))
        .collect::<Result<Vec<_>>>()?;
    let steps = reports.iter().map(RolloutReport::steps).min().unwrap_or(0);
    let mut mean_trajectory = Vec::with_capacity(steps);
    let mut p5_trajectory = Vec::with_capacity(steps);
    for tau in 1..=steps {
        let pooled = pooled_at(reports, tau);
        mean_trajectory.push(pooled.iter().sum::<f64>() / pooled.len() as f64);
        p5_trajectory.push(nearest_rank_percentile(&pooled, 5.0));
    }
    Ok(MetricSummary {
        horizons: per_horizon,
        mean_trajectory,
        p5_trajectory,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub source: String,
    pub horizon: usize,
    pub mean_rate: f64,
    pub p5_rate: f64,
    pub satisfaction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub f_min: f64,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn get(&self, source: &str, horizon: usize) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.source == source && r.horizon == horizon)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,horizon,mean_rate,p5_rate,satisfaction\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.source, r.horizon, r.mean_rate, r.p5_rate, r.satisfaction
            ));
        }
        out
    }
}

/// Aligned metrics for several sources evaluated on the same networks and fading seeds.
pub fn compare(groups: &[(&str, &[RolloutReport])], f_min: f64, horizons: &[usize]) -> Result<ComparisonTable> {
    let key = |reports: &[RolloutReport]| -> Vec<(usize, u64)> {
        reports.iter().map(|r| (r.network_id, r.seeds.fading)).collect()
    };
    if let Some((_, first)) = groups.first() {
        let reference = key(first);
        if let Some((name, _)) = groups.iter().find(|(_, g)| key(g) != reference) {
            return Err(Error::Misuse(format!(
                "source {name} was evaluated on a different network set"
            )));
        }
    }
    let mut rows = Vec::with_capacity(groups.len() * horizons.len());
    for (name, reports) in groups {
        for &h in horizons {
            let m = horizon_metrics(reports, f_min, h)?;
            rows.push(ComparisonRow {
                source: name.to_string(),
                horizon: h,
                mean_rate: m.mean_rate,
                p5_rate: m.p5_rate,
                satisfaction: m.satisfaction,
            });
        }
    }
    Ok(ComparisonTable { f_min, rows })
}

/// Scatter data for two-node slices: `source,sample,node_i,node_j,x_i,x_j`
/// with powers normalized by `p_max`.
pub fn slice_csv(
    expert: &ExpertBuffer,
    generated: &[Vec<f64>],
    pairs: &[(usize, usize)],
    p_max: f64,
) -> Result<String> {
    let n = expert.n();
    if let Some((i, j)) = pairs.iter().find(|(i, j)| *i >= n || *j >= n) {
        return Err(Error::Contract(format!("node pair ({i}, {j}) outside 0..{n}")));
    }
    let mut out = String::from("source,sample,node_i,node_j,x_i,x_j\n");
    let mut emit = |tag: &str, rows: &mut dyn Iterator<Item = &[f64]>| {
        for (s, row) in rows.enumerate() {
            for &(i, j) in pairs {
                out.push_str(&format!("{tag},{s},{i},{j},{},{}\n", row[i] / p_max, row[j] / p_max));
            }
        }
    };
    emit("expert", &mut (0..expert.len()).map(|b| expert.row(b)));
    emit("gdm", &mut generated.iter().map(Vec::as_slice));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::FeasibilityReport;

    fn two_pair() -> (NetworkState, NetworkConfig) {
        let gains = Matrix::from_rows(&[vec![4e-8, 2e-10], vec![5e-10, 1e-8]]).unwrap();
        (
            NetworkState::from_gains(gains).unwrap(),
            NetworkConfig {
                n_pairs: 2,
                ..NetworkConfig::default()
            },
        )
    }

    fn buffer(rows: Vec<Vec<f64>>) -> ExpertBuffer {
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

    const SEEDS: RolloutSeeds = RolloutSeeds { fading: 1, policy: 2 };

    #[test]
    fn single_step_running_equals_instantaneous() {
        let (state, cfg) = two_pair();
        let r = rollout(&PolicySource::FullPower, &state, 0, &cfg, 1, SEEDS).unwrap();
        assert_eq!(r.running, r.instantaneous);
    }

    #[test]
    fn prefix_identity_holds() {
        let (state, cfg) = two_pair();
        let buf = buffer(vec![vec![0.01, 0.0], vec![0.0, 0.01], vec![0.005, 0.004]]);
        let src = PolicySource::ExpertReplay {
            buffer: &buf,
            uniform_resample: false,
        };
        let r = rollout(&src, &state, 0, &cfg, 40, SEEDS).unwrap();
        for tau in 1..=40 {
            for i in 0..2 {
                let direct: f64 = (0..tau).map(|s| r.instantaneous[(s, i)]).sum::<f64>() / tau as f64;
                assert!((r.running_at(tau)[i] - direct).abs() < 1e-12);
            }
        }
        // stored order: step 3 replays row 0
        assert_eq!(r.instantaneous[(3, 1)], 0.0);
    }

    #[test]
    fn average_power_is_constant_row_mean() {
        let buf = buffer(vec![vec![0.01, 0.0], vec![0.0, 0.01], vec![0.002, 0.004]]);
        let PolicySource::AveragePower { power } = PolicySource::average_power(&buf) else {
            unreachable!()
        };
        assert!((power[0] - 0.004).abs() < 1e-18);
        assert!((power[1] - 0.014 / 3.0).abs() < 1e-18);
        let (state, cfg) = two_pair();
        let src = PolicySource::AveragePower { power: power.clone() };
        let d = src.decisions(&state, &cfg, 5, 0).unwrap();
        assert!(d.iter().all(|x| *x == power));
    }

    #[test]
    fn seed_streams_are_isolated() {
        let (state, cfg) = two_pair();
        let buf = buffer(vec![vec![0.01, 0.0], vec![0.0, 0.01], vec![0.003, 0.002]]);
        let src = PolicySource::ExpertReplay {
            buffer: &buf,
            uniform_resample: true,
        };
        let a = rollout(&src, &state, 0, &cfg, 30, SEEDS).unwrap();
        let b = rollout(&src, &state, 0, &cfg, 30, RolloutSeeds { fading: 1, policy: 99 }).unwrap();
        let c = rollout(&src, &state, 0, &cfg, 30, RolloutSeeds { fading: 5, policy: 2 }).unwrap();
        // same fading stream: full-power rollouts agree regardless of the policy seed
        let fp1 = rollout(&PolicySource::FullPower, &state, 0, &cfg, 30, SEEDS).unwrap();
        let fp2 = rollout(
            &PolicySource::FullPower,
            &state,
            0,
            &cfg,
            30,
            RolloutSeeds { fading: 1, policy: 99 },
        )
        .unwrap();
        assert_eq!(
            fp1,
            RolloutReport {
                seeds: fp1.seeds,
                ..fp2.clone()
            }
        );
        // same policy stream under different fading selects the same rows
        let chosen = |r: &RolloutReport| (0..30).map(|t| r.instantaneous[(t, 1)] == 0.0).collect::<Vec<_>>();
        assert_eq!(chosen(&a), chosen(&c));
        assert_ne!(chosen(&a), chosen(&b));
    }

    #[test]
    fn percentile_against_sort_oracle() {
        let values: Vec<f64> = (0..20).map(|i| ((i * 7919) % 20) as f64 * 0.5 - 3.0).collect();
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        // ceil(0.05 * 20) = 1 → smallest; ceil(0.5 * 20) = 10 → 10th smallest
        assert_eq!(nearest_rank_percentile(&values, 5.0), sorted[0]);
        assert_eq!(nearest_rank_percentile(&values, 50.0), sorted[9]);
        assert_eq!(nearest_rank_percentile(&values, 100.0), sorted[19]);
        assert_eq!(nearest_rank_percentile(&values, 0.0), sorted[0]);
    }

    fn constant_report(id: usize, rates: Vec<f64>) -> RolloutReport {
        let n = rates.len();
        let m = Matrix::from_vec(1, n, rates).unwrap();
        RolloutReport {
            source: "x".into(),
            network_id: id,
            seeds: SEEDS,
            gdm_mode: None,
            instantaneous: m.clone(),
            running: m,
        }
    }

    #[test]
    fn metric_counting() {
        let reports = vec![constant_report(0, vec![1.5; 4])];
        let m = horizon_metrics(&reports, 1.0, 1).unwrap();
        assert_eq!((m.mean_rate, m.p5_rate, m.satisfaction), (1.5, 1.5, 1.0));
        assert_eq!(horizon_metrics(&reports, 2.0, 1).unwrap().satisfaction, 0.0);

        let rates: Vec<f64> = (0..100).map(|i| if i < 5 { 0.1 } else { 1.0 }).collect();
        let m = horizon_metrics(&[constant_report(0, rates)], 0.6, 1).unwrap();
        assert!((m.satisfaction - 0.95).abs() < 1e-15);
        assert!(horizon_metrics(&reports, 1.0, 2).is_err());
    }

    #[test]
    fn comparison_shape_and_self_consistency() {
        let a = vec![constant_report(0, vec![1.0, 2.0]), constant_report(1, vec![0.5, 0.7])];
        let t = compare(&[("a", &a), ("b", &a), ("c", &a)], 0.6, &[1]).unwrap();
        assert_eq!(t.rows.len(), 3);
        let (ra, rb) = (t.get("a", 1).unwrap(), t.get("b", 1).unwrap());
        assert_eq!(
            (ra.mean_rate, ra.p5_rate, ra.satisfaction),
            (rb.mean_rate, rb.p5_rate, rb.satisfaction)
        );
        let other = vec![constant_report(0, vec![1.0, 2.0])];
        assert!(matches!(
            compare(&[("a", &a), ("b", &other)], 0.6, &[1]),
            Err(Error::Misuse(_))
        ));
        assert_eq!(t.to_csv().lines().count(), 4);
    }

    #[test]
    fn slice_output_rows() {
        let buf = buffer(vec![vec![0.01, 0.0, 0.005], vec![0.0, 0.01, 0.0]]);
        let gen = vec![vec![0.002, 0.004, 0.0]];
        let csv = slice_csv(&buf, &gen, &[(0, 1), (1, 2)], 0.01).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 2 + 2);
        assert!(csv.contains("gdm,0,0,1,0.2,0.4"));
        assert!(slice_csv(&buf, &gen, &[(0, 3)], 0.01).is_err());
    }
}
