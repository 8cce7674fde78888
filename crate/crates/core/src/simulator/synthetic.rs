//! Synthetic wind-like generation data for demos and tests.
//!
//! Each producer has a capacity and a capacity factor driven by a shared
//! weather process, a local process and a daily cycle. Forecasts are the
//! actuals plus independent Gaussian error, clipped to `[0, capacity]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::simulator::{GenerationData, Observation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub producers: usize,
    pub hours: usize,
    pub seed: u64,
    /// Forecast error standard deviation as a fraction of capacity.
    pub forecast_error: f64,
}

impl SyntheticSpec {
    pub fn new(producers: usize, hours: usize, seed: u64) -> Self {
        Self {
            producers,
            hours,
            seed,
            forecast_error: 0.08,
        }
    }
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn generate(spec: &SyntheticSpec) -> GenerationData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let capacities: Vec<f64> = (0..spec.producers)
        .map(|_| rng.random_range(50.0..150.0))
        .collect();
    let phases: Vec<f64> = (0..spec.producers)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();

    let mut weather = 0.0;
    let mut local = vec![0.0; spec.producers];
    let mut series = vec![Vec::with_capacity(spec.hours); spec.producers];
    for t in 0..spec.hours {
        weather = 0.95 * weather + 0.3 * normal(&mut rng);
        for p in 0..spec.producers {
            local[p] = 0.9 * local[p] + 0.4 * normal(&mut rng);
            let daily = 0.3 * (std::f64::consts::TAU * t as f64 / 24.0 + phases[p]).sin();
            let cap = capacities[p];
            let actual = cap * logistic(weather + local[p] + daily - 0.2);
            let forecast = (actual + spec.forecast_error * cap * normal(&mut rng)).clamp(0.0, cap);
            series[p].push(Some(Observation { forecast, actual }));
        }
    }
    GenerationData {
        hours: (0..spec.hours).map(|t| t.to_string()).collect(),
        producer_ids: (1..=spec.producers).map(|p| p.to_string()).collect(),
        series,
    }
}
