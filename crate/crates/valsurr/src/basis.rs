//! Orthonormal Legendre bases and Gauss-Legendre collocation grids.
//!
//! Basis functions are Legendre polynomials mapped to an interval
//! `[a, b]` and scaled by `sqrt(2k+1)` so that they are orthonormal
//! with respect to the *uniform probability measure* on the interval.
//! With that normalization the Frobenius norm of a coefficient tensor
//! equals the L2 norm of the represented function (Parseval), which
//! keeps tensor-train sweeps and rounding stable.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("degree count must be >= 1")]
    EmptyBasis,
    #[error("invalid interval [{0}, {1}]: left end must be strictly smaller")]
    InvalidInterval(f64, f64),
    #[error("x = {x} outside the basis domain [{a}, {b}]")]
    OutOfDomain { x: f64, a: f64, b: f64 },
    #[error("quadrature rule needs at least one node")]
    EmptyRule,
}

/// One-dimensional polynomial basis: `degree_count` orthonormal
/// Legendre polynomials on `[a, b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    degree_count: usize,
    a: f64,
    b: f64,
}

impl BasisSpec {
    pub fn new(degree_count: usize, a: f64, b: f64) -> Result<Self, BasisError> {
        if degree_count == 0 {
            return Err(BasisError::EmptyBasis);
        }
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(BasisError::InvalidInterval(a, b));
        }
        Ok(Self { degree_count, a, b })
    }

    pub fn degree_count(&self) -> usize {
        self.degree_count
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.a && x <= self.b
    }

    /// Affine pullback to the reference interval [-1, 1].
    fn to_reference(&self, x: f64) -> f64 {
        (2.0 * x - self.a - self.b) / (self.b - self.a)
    }

    fn check_domain(&self, x: f64) -> Result<(), BasisError> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(BasisError::OutOfDomain {
                x,
                a: self.a,
                b: self.b,
            })
        }
    }

    /// Row vector `[psi_0(x), ..., psi_{n-1}(x)]`.
    ///
    /// Entry `k` is `sqrt(2k+1) * P_k(xi)` with `xi` the affine image of
    /// `x` in [-1, 1]. Out-of-domain points are a hard error; the
    /// training box is the trust region of every surrogate built on
    /// this basis.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>, BasisError> {
        self.check_domain(x)?;
        let xi = self.to_reference(x);
        let mut out = vec![0.0; self.degree_count];
        let mut p_prev = 1.0; // P_0
        let mut p = xi; // P_1
        for (k, slot) in out.iter_mut().enumerate() {
            let pk = match k {
                0 => 1.0,
                1 => xi,
                _ => {
                    // three-term recurrence: (k+1) P_{k+1} = (2k+1) xi P_k - k P_{k-1}
                    let kf = (k - 1) as f64;
                    let next = ((2.0 * kf + 1.0) * xi * p - kf * p_prev) / (kf + 1.0);
                    p_prev = p;
                    p = next;
                    next
                }
            };
            *slot = (2.0 * k as f64 + 1.0).sqrt() * pk;
        }
        Ok(out)
    }

    /// Derivatives `[psi_0'(x), ..., psi_{n-1}'(x)]` including the
    /// chain-rule factor `2/(b-a)` of the domain map.
    pub fn eval_derivative(&self, x: f64) -> Result<Vec<f64>, BasisError> {
        self.check_domain(x)?;
        let xi = self.to_reference(x);
        let scale = 2.0 / (self.b - self.a);
        let n = self.degree_count;
        // P_k by the three-term recurrence, P_k' by P'_{k+1} = P'_{k-1} + (2k+1) P_k
        // (stable at the endpoints, unlike the (1-xi^2) form).
        let mut p_vals = vec![0.0; n.max(2)];
        p_vals[0] = 1.0;
        if n >= 1 {
            p_vals[1] = xi;
        }
        for k in 2..n {
            let kf = (k - 1) as f64;
            p_vals[k] = ((2.0 * kf + 1.0) * xi * p_vals[k - 1] - kf * p_vals[k - 2]) / (kf + 1.0);
        }
        let mut out = vec![0.0; n];
        let mut d_prev = 0.0; // P_0'
        let mut d = 1.0; // P_1'
        for (k, slot) in out.iter_mut().enumerate() {
            let dk = match k {
                0 => 0.0,
                1 => 1.0,
                _ => {
                    let next = d_prev + (2.0 * (k as f64 - 1.0) + 1.0) * p_vals[k - 1];
                    d_prev = d;
                    d = next;
                    next
                }
            };
            *slot = (2.0 * k as f64 + 1.0).sqrt() * dk * scale;
        }
        Ok(out)
    }
}

/// Nodes and weights of a quadrature rule on some interval.
///
/// Weights are for the plain Lebesgue measure, so they sum to the
/// interval length; divide by `b - a` to integrate against the uniform
/// probability measure the bases are orthonormal under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Gauss-Legendre rule with `node_count` nodes mapped to `[a, b]`.
///
/// Nodes are the eigenvalues of the Jacobi matrix of the Legendre
/// recurrence (Golub-Welsch); weights come from the first eigenvector
/// components. Exact for polynomials up to degree `2*node_count - 1`.
pub fn gauss_legendre_rule(node_count: usize, a: f64, b: f64) -> Result<QuadratureRule, BasisError> {
    if node_count == 0 {
        return Err(BasisError::EmptyRule);
    }
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(BasisError::InvalidInterval(a, b));
    }
    let n = node_count;
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let kf = k as f64;
        let off = kf / (4.0 * kf * kf - 1.0).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let w = 2.0 * eig.eigenvectors[(0, i)].powi(2);
            (node, w)
        })
        .collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));

    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    Ok(QuadratureRule {
        nodes: pairs.iter().map(|&(x, _)| mid + half * x).collect(),
        weights: pairs.iter().map(|&(_, w)| half * w).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn constant_basis_function_is_one() {
        let spec = BasisSpec::new(3, -1.0, 1.0).unwrap();
        let v = spec.eval(0.7).unwrap();
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn linear_basis_at_right_endpoint() {
        let spec = BasisSpec::new(3, -1.0, 1.0).unwrap();
        let v = spec.eval(1.0).unwrap();
        assert_abs_diff_eq!(v[1], 3.0_f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn quadratic_basis_value() {
        let spec = BasisSpec::new(3, -1.0, 1.0).unwrap();
        let v = spec.eval(0.5).unwrap();
        // sqrt(5) * (3 x^2 - 1)/2 at x = 0.5
        assert_abs_diff_eq!(v[2], 5.0_f64.sqrt() * (3.0 * 0.25 - 1.0) / 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(v[2], -0.2795085, epsilon = 1e-7);
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let spec = BasisSpec::new(3, 0.0, 2.0).unwrap();
        assert!(matches!(
            spec.eval(-0.1),
            Err(BasisError::OutOfDomain { .. })
        ));
        assert!(spec.eval_derivative(2.5).is_err());
    }

    #[test]
    fn derivative_of_constant_is_zero_and_linear_is_sqrt3() {
        let spec = BasisSpec::new(4, -1.0, 1.0).unwrap();
        let d = spec.eval_derivative(0.3).unwrap();
        assert_eq!(d[0], 0.0);
        assert_abs_diff_eq!(d[1], 3.0_f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let spec = BasisSpec::new(7, -1.0, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let x: f64 = rng.gen_range(-0.99..0.99);
            let h = 1e-6;
            let up = spec.eval(x + h).unwrap();
            let dn = spec.eval(x - h).unwrap();
            let d = spec.eval_derivative(x).unwrap();
            for k in 1..7 {
                let fd = (up[k] - dn[k]) / (2.0 * h);
                let scale = d[k].abs().max(1.0);
                assert!(
                    (fd - d[k]).abs() / scale < 1e-6,
                    "k={k} x={x} fd={fd} exact={}",
                    d[k]
                );
            }
        }
    }

    #[test]
    fn domain_map_consistency() {
        // evaluating on [a,b] equals evaluating on [-1,1] after the pullback
        let spec_ref = BasisSpec::new(6, -1.0, 1.0).unwrap();
        let spec = BasisSpec::new(6, 0.5, 3.5).unwrap();
        let x = 2.0;
        let xi = (2.0 * x - 0.5 - 3.5) / 3.0;
        assert_eq!(spec.eval(x).unwrap(), spec_ref.eval(xi).unwrap());
    }

    #[test]
    fn orthonormal_under_uniform_probability_measure() {
        let n = 7;
        let spec = BasisSpec::new(n, -2.0, 4.0).unwrap();
        let rule = gauss_legendre_rule(n + 2, -2.0, 4.0).unwrap();
        let measure = 6.0;
        for i in 0..n {
            for j in 0..n {
                let ip: f64 = rule
                    .nodes
                    .iter()
                    .zip(&rule.weights)
                    .map(|(&x, &w)| {
                        let v = spec.eval(x).unwrap();
                        w / measure * v[i] * v[j]
                    })
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(ip, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn one_point_rule_is_midpoint() {
        let rule = gauss_legendre_rule(1, -1.0, 1.0).unwrap();
        assert_abs_diff_eq!(rule.nodes[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(rule.weights[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn two_point_rule_nodes() {
        let rule = gauss_legendre_rule(2, -1.0, 1.0).unwrap();
        let expect = 1.0 / 3.0_f64.sqrt();
        assert_abs_diff_eq!(rule.nodes[0], -expect, epsilon = 1e-14);
        assert_abs_diff_eq!(rule.nodes[1], expect, epsilon = 1e-14);
        assert_abs_diff_eq!(rule.weights[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rule.weights[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn three_point_rule_integrates_x4_exactly() {
        let rule = gauss_legendre_rule(3, -1.0, 1.0).unwrap();
        let integral = rule.integrate(|x| x.powi(4));
        assert_abs_diff_eq!(integral, 2.0 / 5.0, epsilon = 1e-12);
    }

    #[test]
    fn exactness_up_to_degree_2n_minus_1() {
        // degree-9 monomial with a 5-node rule on a shifted interval
        let rule = gauss_legendre_rule(5, 0.0, 2.0).unwrap();
        let integral = rule.integrate(|x| x.powi(9));
        assert_abs_diff_eq!(integral, 2.0_f64.powi(10) / 10.0, epsilon = 1e-10);
        assert!(rule.nodes.windows(2).all(|w| w[0] < w[1]));
        assert_abs_diff_eq!(rule.weights.iter().sum::<f64>(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_node_count_rejected() {
        assert!(matches!(
            gauss_legendre_rule(0, -1.0, 1.0),
            Err(BasisError::EmptyRule)
        ));
    }
}
