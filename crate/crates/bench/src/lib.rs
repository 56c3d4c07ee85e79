//! Fixtures shared by the benchmarks.

use lvr_core::policy::{init_params, InitScheme, Standardizer};
use lvr_core::{Dataset, GraphConfig, KnnGraph, Policy};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth synthetic demonstration with `n` samples.
pub fn synthetic_dataset(n: usize, state_dim: usize, action_dim: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = Array2::from_shape_fn((n, state_dim), |_| rng.gen_range(-1.0..1.0));
    let mix = Array2::from_shape_fn((state_dim, action_dim), |_| rng.gen_range(-1.0..1.0));
    let actions = states.mapv(f64::sin).dot(&mix);
    Dataset::new(states, actions, 0.02, "synthetic").expect("finite synthetic data")
}

pub fn policy_for(data: &Dataset, hidden: &[usize], seed: u64) -> Policy {
    let mut widths = vec![data.state_dim()];
    widths.extend_from_slice(hidden);
    widths.push(data.action_dim());
    let net = init_params(seed, &widths, InitScheme::GlorotUniform).expect("valid widths");
    Policy::new(net, Standardizer::fit(data.states.view()).expect("finite states")).expect("matching dims")
}

pub fn graph_for(policy: &Policy, data: &Dataset, cfg: GraphConfig) -> KnnGraph {
    KnnGraph::build(policy.input_norm.apply(data.states.view()).view(), cfg).expect("enough samples")
}
