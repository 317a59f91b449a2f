#![allow(dead_code)]

use covnn::covariance::{normalize_spectral, CovarianceModel};
use covnn::dataset::{Cohort, Group, Subject};
use covnn::vnn::{Nonlinearity, VnnConfig, VnnModel};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Spectrally normalized AᵀA/m with uniform entries in A.
pub fn random_cov(m: usize, rng: &mut ChaCha8Rng) -> CovarianceModel {
    let a = Array2::from_shape_fn((m, m), |_| rng.random_range(-1.0..1.0));
    let raw = CovarianceModel::from_matrix(a.t().dot(&a) / m as f64, Array1::zeros(m)).unwrap();
    normalize_spectral(&raw).unwrap()
}

pub fn random_vec(m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(-2.0..2.0)).collect()
}

pub fn random_model(rng: &mut ChaCha8Rng, nonlinearity: Nonlinearity) -> VnnModel {
    let layers = rng.random_range(1..=3);
    let cfg = VnnConfig {
        layers,
        taps_per_layer: rng.random_range(0..=3),
        widths: (0..layers).map(|_| rng.random_range(1..=4)).collect(),
        nonlinearity,
        seed: rng.random(),
        ..VnnConfig::default()
    };
    let mut model = VnnModel::init(&cfg).unwrap();
    model.readout_bias = rng.random_range(-1.0..1.0);
    model
}

pub fn random_perm(m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..m).collect();
    p.shuffle(rng);
    p
}

pub fn subject(i: usize, age: f64, group: Group, features: Vec<f64>) -> Subject {
    Subject {
        id: format!("s{i:04}"),
        age,
        group,
        cdr: None,
        features,
    }
}

/// Cohort whose positive features share one age-driven factor along the all-ones direction.
pub fn linear_cohort(n: usize, m: usize, noise: f64, seed: u64) -> Cohort {
    let mut r = rng(seed);
    let subjects = (0..n)
        .map(|i| {
            let age = r.random_range(50.0..90.0);
            let factor = 1.0 + (age - 50.0) / 40.0;
            let features = (0..m).map(|_| factor + noise * r.random_range(-1.0..1.0)).collect();
            subject(i, age, Group::Hc, features)
        })
        .collect();
    Cohort::new(m, format!("m{m}"), subjects).unwrap()
}
