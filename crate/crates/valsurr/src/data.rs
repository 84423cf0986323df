//! Training datasets and point samplers.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Sample points with target values and, optionally, target gradients.
/// Shared input format of every fitter in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub gradients: Option<Vec<Vec<f64>>>,
}

impl Dataset {
    pub fn new(points: Vec<Vec<f64>>, values: Vec<f64>) -> Self {
        assert_eq!(points.len(), values.len());
        Self { points, values, gradients: None }
    }

    pub fn with_gradients(points: Vec<Vec<f64>>, values: Vec<f64>, gradients: Vec<Vec<f64>>) -> Self {
        assert_eq!(points.len(), values.len());
        assert_eq!(points.len(), gradients.len());
        Self { points, values, gradients: Some(gradients) }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }
}

/// Standard normal draw via Box-Muller; keeps the crate's RNG needs on
/// `rand` alone and bit-reproducible across platforms.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform points in a box given as per-dimension intervals.
pub fn uniform_box<R: Rng>(rng: &mut R, box_: &[(f64, f64)], count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| box_.iter().map(|&(a, b)| rng.gen_range(a..b)).collect())
        .collect()
}
