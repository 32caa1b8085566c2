//! Finite-N bias of the mean-field OU particle system against its exact
//! stationary variance.

use std::sync::Arc;

use mdplab_core::integrator::ParticleSystem;
use mdplab_core::models::make_mean_field_ou;
use mdplab_core::{EmpiricalMeasure, Model};

// One particle splits into the system mean, an OU with rate θ−η and noise
// σ/√N, plus the deviation from it, an OU with rate θ and noise σ√(1−1/N).
fn oracle(theta: f64, eta: f64, sigma: f64, n: usize) -> f64 {
    let n = n as f64;
    sigma * sigma * (1.0 - 1.0 / n) / (2.0 * theta) + sigma * sigma / (2.0 * n * (theta - eta))
}

fn tagged_second_moment(n: usize, horizon: f64, dt: f64, seed: u64) -> f64 {
    let model: Arc<Model> = Arc::new(make_mean_field_ou(1.0, 0.5, 1.0, 1).unwrap().into());
    let start = EmpiricalMeasure::from_flat(1, vec![0.0; n]).unwrap();
    let mut ps = ParticleSystem::new(model, &start, seed, 0).unwrap();
    for _ in 0..(10.0 / dt) as usize {
        ps.step(dt).unwrap();
    }
    let steps = (horizon / dt) as usize;
    let mut acc = 0.0;
    for _ in 0..steps {
        ps.step(dt).unwrap();
        acc += ps.states().iter().map(|x| x * x).sum::<f64>() / n as f64;
    }
    acc / steps as f64
}

#[test]
fn particle_variance_follows_the_n_ladder() {
    let mut last = f64::INFINITY;
    for (k, n) in [2usize, 4, 16].into_iter().enumerate() {
        let got = tagged_second_moment(n, 20_000.0, 0.01, 40 + k as u64);
        let want = oracle(1.0, 0.5, 1.0, n);
        assert!((got - want).abs() < 0.04, "N={n}: {got} vs {want}");
        assert!(got < last);
        last = got;
    }
}

#[test]
fn oracle_tends_to_the_invariant_variance() {
    assert!((oracle(1.0, 0.5, 1.0, 1) - 1.0).abs() < 1e-15);
    assert!((oracle(1.0, 0.5, 1.0, 1_000_000) - 0.5).abs() < 1e-6);
}
