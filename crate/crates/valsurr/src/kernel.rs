//! Radial-basis kernel interpolation on scattered data.
//!
//! The surrogate is `s(x) = sum_j alpha_j * phi(eps * ||x - x_j||)` with
//! coefficients from a (optionally regularized) Gram solve. With zero
//! regularization the model interpolates the data; a Cholesky with
//! escalating jitter keeps near-singular Grams survivable without
//! changing the model class.

use crate::data::Dataset;
use crate::surrogate::{Surrogate, SurrogateError};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape parameter must be positive, got {0}")]
    NonPositiveShape(f64),
    #[error("points of dimension {got} fed to a kernel expecting {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("centers {i} and {j} coincide (distance {dist:.3e})")]
    DuplicateCenters { i: usize, j: usize, dist: f64 },
    #[error("Gram factorization failed even at jitter level {jitter:.3e}")]
    FactorizationFailed { jitter: f64 },
    #[error("dataset has no points")]
    EmptyDataset,
    #[error("Halton sampler supports at most 100 dimensions, got {0}")]
    TooManyDimensions(usize),
}

/// Radial kernel family; all profiles are normalized to `phi(0) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    /// `exp(-r^2)`
    Gaussian,
    /// `exp(-r)`
    Exponential,
    /// quadratic Matern `(1 + r + r^2/3) exp(-r)`, twice differentiable
    Matern2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub shape: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, shape: f64) -> Result<Self, KernelError> {
        if !(shape > 0.0) {
            return Err(KernelError::NonPositiveShape(shape));
        }
        Ok(Self { family, shape })
    }

    fn profile(&self, r: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => (-r * r).exp(),
            KernelFamily::Exponential => (-r).exp(),
            KernelFamily::Matern2 => (1.0 + r + r * r / 3.0) * (-r).exp(),
        }
    }

    /// `phi'(r) / r`, the factor in `grad_x k = (phi'(r)/r) * eps^2 * (x - y)`.
    /// Finite for the smooth families; the exponential kernel handles its
    /// center singularity separately.
    fn profile_slope_over_r(&self, r: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => -2.0 * (-r * r).exp(),
            KernelFamily::Exponential => {
                if r == 0.0 {
                    0.0
                } else {
                    -(-r).exp() / r
                }
            }
            KernelFamily::Matern2 => -(1.0 + r) * (-r).exp() / 3.0,
        }
    }

    /// Kernel value `k(x, y) = phi(eps * ||x - y||)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64, KernelError> {
        if x.len() != y.len() {
            return Err(KernelError::DimensionMismatch { expected: x.len(), got: y.len() });
        }
        Ok(self.profile(self.shape * distance(x, y)))
    }

    /// Gradient of `k(x, y)` with respect to `x`.
    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>, KernelError> {
        if x.len() != y.len() {
            return Err(KernelError::DimensionMismatch { expected: x.len(), got: y.len() });
        }
        let r = self.shape * distance(x, y);
        let factor = self.profile_slope_over_r(r) * self.shape * self.shape;
        Ok(x.iter().zip(y).map(|(&xi, &yi)| factor * (xi - yi)).collect())
    }
}

fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Fitted kernel model: centers and coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSurrogate {
    pub spec: KernelSpec,
    pub centers: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
    pub regularization: f64,
    /// jitter actually applied by the escalation ladder (0 when the
    /// plain factorization succeeded)
    pub applied_jitter: f64,
}

impl KernelSurrogate {
    pub fn predict(&self, x: &[f64]) -> Result<f64, KernelError> {
        let mut s = 0.0;
        for (c, &a) in self.centers.iter().zip(&self.coefficients) {
            s += a * self.spec.eval(x, c)?;
        }
        Ok(s)
    }

    pub fn predict_grad(&self, x: &[f64]) -> Result<Vec<f64>, KernelError> {
        let d = x.len();
        let mut g = vec![0.0; d];
        for (c, &a) in self.centers.iter().zip(&self.coefficients) {
            let gk = self.spec.grad_x(x, c)?;
            for (gi, gki) in g.iter_mut().zip(gk) {
                *gi += a * gki;
            }
        }
        Ok(g)
    }

    pub fn predict_many(&self, points: &[Vec<f64>]) -> Result<Vec<f64>, KernelError> {
        points.iter().map(|p| self.predict(p)).collect()
    }
}

impl Surrogate for KernelSurrogate {
    fn value(&self, x: &[f64]) -> Result<f64, SurrogateError> {
        self.predict(x).map_err(|e| SurrogateError::Evaluation(e.to_string()))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, SurrogateError> {
        self.predict_grad(x).map_err(|e| SurrogateError::Evaluation(e.to_string()))
    }

    fn dofs(&self) -> usize {
        self.coefficients.len()
    }
}

/// Solve `(K + reg I) alpha = y` on the dataset's points.
///
/// Gradient targets in the dataset are ignored by this fitter. At
/// `regularization = 0` a failing Cholesky escalates through jitters
/// `1e-14 ||K||` and `1e-10 ||K||` before giving up; one step of
/// iterative refinement polishes the training residual.
pub fn fit_interpolant(
    data: &Dataset,
    spec: KernelSpec,
    regularization: f64,
) -> Result<KernelSurrogate, KernelError> {
    if data.is_empty() {
        return Err(KernelError::EmptyDataset);
    }
    let m = data.len();
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut min_dist = f64::INFINITY;
    let mut min_pair = (0usize, 0usize);
    for i in 0..m {
        gram[(i, i)] = 1.0; // phi(0) = 1 for every family
        for j in i + 1..m {
            let dist = distance(&data.points[i], &data.points[j]);
            if dist < min_dist {
                min_dist = dist;
                min_pair = (i, j);
            }
            let v = spec.profile(spec.shape * dist);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    if m > 1 && min_dist <= 1e-12 {
        return Err(KernelError::DuplicateCenters { i: min_pair.0, j: min_pair.1, dist: min_dist });
    }

    let gram_norm = gram_inf_norm(&gram);
    let y = DVector::from_vec(data.values.clone());
    let mut applied_jitter = 0.0;
    let mut solution = None;
    for &jitter in &[0.0, 1e-14 * gram_norm, 1e-10 * gram_norm] {
        let mut shifted = gram.clone();
        for i in 0..m {
            shifted[(i, i)] += regularization + jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            let mut alpha = chol.solve(&y);
            // one refinement pass against the unshifted operator
            let residual = &y - &gram * &alpha - (regularization + jitter) * &alpha;
            alpha += chol.solve(&residual);
            applied_jitter = jitter;
            solution = Some(alpha);
            break;
        }
    }
    let alpha = solution.ok_or(KernelError::FactorizationFailed { jitter: 1e-10 * gram_norm })?;
    Ok(KernelSurrogate {
        spec,
        centers: data.points.clone(),
        coefficients: alpha.iter().copied().collect(),
        regularization,
        applied_jitter,
    })
}

fn gram_inf_norm(gram: &DMatrix<f64>) -> f64 {
    (0..gram.nrows())
        .map(|i| gram.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// First `count` points of the d-dimensional Halton sequence (prime
/// bases 2, 3, 5, ..., index starting at 1) mapped to a box.
pub fn halton_points(count: usize, box_: &[(f64, f64)]) -> Result<Vec<Vec<f64>>, KernelError> {
    let d = box_.len();
    if d > 100 {
        return Err(KernelError::TooManyDimensions(d));
    }
    let bases = first_primes(d);
    let mut out = Vec::with_capacity(count);
    for idx in 1..=count {
        let p: Vec<f64> = (0..d)
            .map(|k| {
                let u = radical_inverse(idx as u64, bases[k]);
                let (a, b) = box_[k];
                a + (b - a) * u
            })
            .collect();
        out.push(p);
    }
    Ok(out)
}

fn radical_inverse(mut n: u64, base: u64) -> f64 {
    let mut inv = 0.0;
    let mut denom = 1.0;
    while n > 0 {
        denom *= base as f64;
        inv += (n % base) as f64 / denom;
        n /= base;
    }
    inv
}

fn first_primes(count: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(count);
    let mut candidate: u64 = 2;
    while primes.len() < count {
        if primes.iter().all(|&p| candidate % p != 0) {
            primes.push(candidate);
        }
        candidate += 1;
    }
    primes
}
