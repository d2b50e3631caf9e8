//! Spiking backward passes against a scalar tape over the unrolled graph.

mod common;

use common::oracle::{random_case, rel_err, TwoLayerNet};
use spikeflow::model::{build_model, ModelSpec, Neuron};
use spikeflow::snn::ResetMode;

const TOL: f64 = 1e-6;

fn two_layer(reset: ResetMode, seed: u64) {
    let net = TwoLayerNet::random(seed, 4, reset);
    let imp = net.implementation();
    let ora = net.oracle();
    assert_eq!(imp.spikes, ora.spikes, "forward spike counts differ");
    assert!(imp.spikes[0] > 0.0 && imp.spikes[1] > 0.0, "both layers must spike: {:?}", imp.spikes);
    for ((name, a), (_, b)) in imp.named.iter().zip(&ora.named) {
        let e = rel_err(a, b);
        assert!(e <= TOL, "{name}: relative error {e:.3e}");
        assert!(b.iter().any(|x| *x != 0.0), "{name}: oracle gradient is identically zero");
    }
}

#[test]
fn two_layer_soft_reset() {
    for seed in 0..4 {
        two_layer(ResetMode::Soft, seed);
    }
}

#[test]
fn two_layer_hard_reset() {
    for seed in 0..4 {
        two_layer(ResetMode::Hard, seed);
    }
}

fn network(mut spec: ModelSpec, size: usize, threshold: f64, seed: u64) {
    spec.init_threshold = threshold;
    spec.init_leak = 0.85;
    let net = build_model::<f64>(&spec, seed).unwrap();
    let case = random_case(&net, size, size, spec.timesteps, seed + 7);
    let imp = case.implementation();
    let ora = case.oracle();
    assert_eq!(imp.spikes, ora.spikes, "forward spike counts differ");
    assert!((imp.loss - ora.loss).abs() <= 1e-9 * imp.loss.abs().max(1.0));
    for ((name, a), b) in net.param_names().iter().zip(&imp.grads).zip(&ora.grads) {
        let e = rel_err(a, b);
        assert!(e <= TOL, "{name}: relative error {e:.3e}");
    }
}

#[test]
fn firenet_matches_unrolled_graph() {
    let mut spec = ModelSpec::firenet(Neuron::Spiking);
    spec.base_channels = 2;
    spec.timesteps = 3;
    network(spec, 6, 0.5, 31);
}

#[test]
fn unet_matches_unrolled_graph() {
    let mut spec = ModelSpec::unet(2, Neuron::Spiking);
    spec.timesteps = 3;
    network(spec, 16, 0.3, 32);
}

#[test]
fn unet_hard_reset_matches_unrolled_graph() {
    let mut spec = ModelSpec::unet(2, Neuron::Spiking);
    spec.timesteps = 3;
    spec.lif.reset = ResetMode::Hard;
    network(spec, 16, 0.3, 33);
}
