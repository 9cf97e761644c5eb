use diffalloc::eval::{rollout, PolicySource, RolloutSeeds};
use diffalloc::expert::{run_expert, ExpertConfig};
use diffalloc::netgen::{instantaneous_rates, sample_fading_with, NetworkConfig, NetworkState};
use diffalloc::seed::rng_from_seed;
use diffalloc::Matrix;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Two pairs whose cross links are as strong as their direct links.
fn two_pair_toy() -> (NetworkState, NetworkConfig) {
    let gains = Matrix::from_rows(&[vec![1e-9, 8e-10], vec![9e-10, 1.2e-9]]).unwrap();
    let cfg = NetworkConfig {
        n_pairs: 2,
        f_min: 2.5,
        ..NetworkConfig::default()
    };
    (NetworkState::from_gains(gains).unwrap(), cfg)
}

/// Expected rates of every allocation on a `steps × steps` grid, averaged over shared fading draws.
fn grid_rates(state: &NetworkState, cfg: &NetworkConfig, steps: usize, draws: usize) -> Vec<([f64; 2], [f64; 2])> {
    let mut rng = rng_from_seed(77);
    let fadings: Vec<_> = (0..draws).map(|_| sample_fading_with(state, &mut rng)).collect();
    let mut out = Vec::new();
    for a in 0..=steps {
        for b in 0..=steps {
            let x = [cfg.p_max * a as f64 / steps as f64, cfg.p_max * b as f64 / steps as f64];
            let mut r = [0.0; 2];
            for f in &fadings {
                let inst = instantaneous_rates(&x, f, cfg).unwrap();
                r[0] += inst[0] / draws as f64;
                r[1] += inst[1] / draws as f64;
            }
            out.push((x, r));
        }
    }
    out
}

#[test]
fn strong_interference_expert_time_shares_between_modes() {
    let (state, cfg) = two_pair_toy();
    let grid = grid_rates(&state, &cfg, 10, 2000);
    let f_min = cfg.f_min;

    let single_feasible = grid.iter().any(|(_, r)| r[0] >= f_min && r[1] >= f_min);
    assert!(!single_feasible, "a fixed allocation already satisfies both receivers");

    // Best time-sharing mixture of two grid allocations.
    let mut best = (f64::NEG_INFINITY, [0.0; 2], [0.0; 2]);
    for (xa, ra) in &grid {
        for (xb, rb) in &grid {
            for t in 0..=100 {
                let th = t as f64 / 100.0;
                let r = [th * ra[0] + (1.0 - th) * rb[0], th * ra[1] + (1.0 - th) * rb[1]];
                let value = (r[0] + r[1]) / 2.0;
                if r[0] >= f_min && r[1] >= f_min && value > best.0 {
                    best = (value, *xa, *xb);
                }
            }
        }
    }
    let (oracle_value, xa, xb) = best;
    assert!(oracle_value.is_finite(), "no feasible time-sharing mixture");
    let corners = [[cfg.p_max, 0.0], [0.0, cfg.p_max]];
    assert!(
        corners.contains(&xa) && corners.contains(&xb) && xa != xb,
        "oracle mixes {xa:?} and {xb:?}"
    );

    let expert = ExpertConfig {
        t_total: 1500,
        t_burn: 300,
        buffer_capacity: 1000,
        ..ExpertConfig::default()
    };
    let buffer = run_expert(&state, 0, &expert, &cfg, 5).unwrap();
    let half = cfg.p_max / 2.0;
    let mode = |on: [bool; 2]| {
        (0..buffer.len())
            .filter(|&b| {
                let row = buffer.row(b);
                (row[0] > half) == on[0] && (row[1] > half) == on[1]
            })
            .count() as f64
            / buffer.len() as f64
    };
    let (first, second) = (mode([true, false]), mode([false, true]));
    assert!(first >= 0.2 && second >= 0.2, "mode fractions {first} and {second}");

    let report = rollout(
        &PolicySource::ExpertReplay {
            buffer: &buffer,
            uniform_resample: true,
        },
        &state,
        0,
        &cfg,
        4000,
        RolloutSeeds { fading: 8, policy: 9 },
    )
    .unwrap();
    let ergodic = report.running_at(4000);
    let mean = ergodic.iter().sum::<f64>() / 2.0;
    assert!(
        ergodic.iter().all(|r| *r >= 0.95 * f_min),
        "replay rates {ergodic:?} vs f_min {f_min}"
    );
    assert!(
        mean >= 0.9 * oracle_value,
        "replay mean {mean} vs time-sharing optimum {oracle_value}"
    );
}

#[test]
fn full_power_single_link_matches_monte_carlo() {
    let g = 2e-10;
    let state = NetworkState::from_gains(Matrix::from_rows(&[vec![g]]).unwrap()).unwrap();
    let cfg = NetworkConfig {
        n_pairs: 1,
        ..NetworkConfig::default()
    };
    let snr = cfg.p_max * g / cfg.noise_power();
    let mut rng = rng_from_seed(3);
    let draws = 100_000;
    let oracle = (0..draws)
        .map(|_| {
            let fade: f64 = rand_distr::Distribution::sample(&rand_distr::Exp1, &mut rng);
            (1.0 + snr * fade).log2()
        })
        .sum::<f64>()
        / draws as f64;
    let report = rollout(
        &PolicySource::FullPower,
        &state,
        0,
        &cfg,
        10_000,
        RolloutSeeds { fading: 4, policy: 5 },
    )
    .unwrap();
    let rate = report.running_at(10_000)[0];
    assert!((rate - oracle).abs() <= 0.02 * oracle, "{rate} vs {oracle}");
}

#[test]
fn time_sharing_window_variance_decays_like_inverse_length() {
    let (state, cfg) = two_pair_toy();
    let expert = ExpertConfig {
        t_total: 800,
        t_burn: 200,
        buffer_capacity: 600,
        ..ExpertConfig::default()
    };
    let buffer = run_expert(&state, 0, &expert, &cfg, 6).unwrap();
    let steps = 12_800;
    let report = rollout(
        &PolicySource::ExpertReplay {
            buffer: &buffer,
            uniform_resample: true,
        },
        &state,
        0,
        &cfg,
        steps,
        RolloutSeeds { fading: 10, policy: 11 },
    )
    .unwrap();
    let series: Vec<f64> = (0..steps).map(|t| report.instantaneous[(t, 0)]).collect();
    let lengths = [50usize, 100, 200, 400, 800];
    let variances: Vec<f64> = lengths
        .iter()
        .map(|&w| {
            let means: Vec<f64> = series
                .chunks_exact(w)
                .map(|c| c.iter().sum::<f64>() / w as f64)
                .collect();
            let m = means.iter().sum::<f64>() / means.len() as f64;
            means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64
        })
        .collect();
    assert!(variances.windows(2).all(|v| v[1] < v[0]), "{variances:?}");
    let xs: Vec<f64> = lengths.iter().map(|&w| (w as f64).ln()).collect();
    let ys: Vec<f64> = variances.iter().map(|v| v.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 5.0, ys.iter().sum::<f64>() / 5.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!(
        (-1.4..=-0.6).contains(&slope),
        "log-variance slope {slope}, variances {variances:?}"
    );
}
