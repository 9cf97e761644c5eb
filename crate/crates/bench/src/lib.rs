//! Shared fixtures for the criterion benches.

use diffalloc::gnn::{GnnConfig, GnnParams};
use diffalloc::netgen::{build_gso, generate_network, Gso, NetworkConfig, NetworkState};

pub struct Fixture {
    pub network: NetworkConfig,
    pub state: NetworkState,
    pub gso: Gso,
    pub params: GnnParams,
}

/// A desk-sized network (16 pairs) with freshly initialized desk-sized GNN weights.
pub fn desk_fixture(seed: u64) -> Fixture {
    let network = NetworkConfig {
        n_pairs: 16,
        density_per_km2: 1.92,
        ..NetworkConfig::default()
    };
    let state = generate_network(&network, seed).expect("valid desk network");
    let gso = build_gso(&state, &network).expect("valid gso");
    let params = GnnParams::init(&GnnConfig::default(), seed).expect("valid gnn config");
    Fixture {
        network,
        state,
        gso,
        params,
    }
}
