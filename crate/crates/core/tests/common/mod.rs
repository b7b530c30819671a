//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spreadnet::autodiff::Tensor;
use spreadnet::dataio::StatsFile;
use spreadnet::grids::{EnsembleSample, GridSpec};
use spreadnet::synth::{generate_samples, GenConfig};
use spreadnet::train::{ReducedSample, StatsAccumulator};

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gen_config(n_params: usize, n_levels: usize, n_lat: usize, n_lon: usize, seed: u64) -> GenConfig {
    GenConfig {
        spec: GridSpec::with_shape(n_params, n_levels, n_lat, n_lon),
        spinup_steps: 200,
        seed,
        ..GenConfig::default()
    }
}

/// Generates `n` ensembles and reduces each as soon as it exists.
pub fn reduced(cfg: &GenConfig, n: usize, keep: usize) -> (Vec<ReducedSample>, Vec<EnsembleSample>) {
    let full = generate_samples(cfg, n).unwrap();
    let target = cfg.spec.param_index("t").unwrap_or(0);
    let last = cfg.spec.n_times() - 1;
    let red = full
        .iter()
        .map(|s| ReducedSample::new(s, keep, target, last).unwrap())
        .collect();
    (red, full)
}

pub fn stats_of(samples: &[EnsembleSample]) -> StatsFile {
    let mut acc = StatsAccumulator::new();
    for s in samples {
        acc.push(s).unwrap();
    }
    acc.finish().unwrap()
}

/// Smallest `k` with `P(X ≥ k) ≤ alpha` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_threshold(n: usize, alpha: f64) -> usize {
    let mut tail = 0.0;
    let mut choose = 1.0f64;
    let mut pmf = vec![0.0; n + 1];
    for (k, p) in pmf.iter_mut().enumerate() {
        *p = choose * 0.5f64.powi(n as i32);
        choose = choose * (n - k) as f64 / (k + 1) as f64;
    }
    for k in (0..=n).rev() {
        tail += pmf[k];
        if tail > alpha {
            return k + 1;
        }
    }
    0
}
