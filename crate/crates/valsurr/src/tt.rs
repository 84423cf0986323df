//! Tensor trains and the functional tensor-train (FTT) format.
//!
//! A tensor train represents an order-`d` coefficient tensor as a chain
//! of 3-way cores `U_k` of shape `(r_{k-1}, n_k, r_k)` with boundary
//! ranks 1. Contracting the open mode indices with per-dimension
//! polynomial basis vectors turns the coefficient tensor into a
//! function of `d` continuous variables; that functional form is what
//! every fitter in this crate produces and every feedback law consumes.
//!
//! Besides evaluation and gradients this module provides
//! orthogonalization, TT-SVD rounding, and a size-guarded dense
//! reconstruction that exists purely as a test oracle.

use crate::basis::{BasisError, BasisSpec};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TTError {
    #[error("core shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected a point of dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("dense reconstruction of {size} entries exceeds the {limit} guard")]
    DenseSizeGuard { size: usize, limit: usize },
    #[error("mode index {index} out of range for order {order}")]
    InvalidModeIndex { index: usize, order: usize },
    #[error("non-finite entry in core {core}")]
    NonFinite { core: usize },
}

const DENSE_GUARD: usize = 10_000_000;

/// One 3-way TT core, stored contiguously in C order: entry
/// `(alpha, i, beta)` lives at `alpha * n * r_right + i * r_right + beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTCore {
    r_left: usize,
    n: usize,
    r_right: usize,
    data: Vec<f64>,
}

impl TTCore {
    pub fn zeros(r_left: usize, n: usize, r_right: usize) -> Self {
        Self {
            r_left,
            n,
            r_right,
            data: vec![0.0; r_left * n * r_right],
        }
    }

    pub fn from_data(r_left: usize, n: usize, r_right: usize, data: Vec<f64>) -> Result<Self, TTError> {
        if data.len() != r_left * n * r_right || r_left == 0 || n == 0 || r_right == 0 {
            return Err(TTError::ShapeMismatch(format!(
                "data length {} does not match shape ({r_left}, {n}, {r_right})",
                data.len()
            )));
        }
        Ok(Self { r_left, n, r_right, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.r_left, self.n, self.r_right)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, alpha: usize, i: usize, beta: usize) -> f64 {
        self.data[(alpha * self.n + i) * self.r_right + beta]
    }

    #[inline]
    pub fn set(&mut self, alpha: usize, i: usize, beta: usize, v: f64) {
        self.data[(alpha * self.n + i) * self.r_right + beta] = v;
    }

    /// Mode-`i` slice as an `r_left x r_right` matrix.
    pub fn slice(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.r_left, self.r_right, |a, b| self.get(a, i, b))
    }

    /// Contraction `sum_i c_i * U[:, i, :]` used by evaluation.
    pub fn contract_mode(&self, coeffs: &[f64]) -> DMatrix<f64> {
        debug_assert_eq!(coeffs.len(), self.n);
        let mut out = DMatrix::zeros(self.r_left, self.r_right);
        for a in 0..self.r_left {
            for i in 0..self.n {
                let c = coeffs[i];
                if c == 0.0 {
                    continue;
                }
                let base = (a * self.n + i) * self.r_right;
                for b in 0..self.r_right {
                    out[(a, b)] += c * self.data[base + b];
                }
            }
        }
        out
    }

    /// Left unfolding: `(r_left * n) x r_right`, row index `alpha * n + i`.
    pub fn left_unfold(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.r_left * self.n, self.r_right, |row, b| {
            self.data[row * self.r_right + b]
        })
    }

    /// Right unfolding: `r_left x (n * r_right)`, column index `i * r_right + beta`.
    pub fn right_unfold(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.r_left, self.n * self.r_right, |a, col| {
            self.data[a * self.n * self.r_right + col]
        })
    }

    pub fn from_left_unfold(m: &DMatrix<f64>, r_left: usize, n: usize) -> Self {
        let r_right = m.ncols();
        debug_assert_eq!(m.nrows(), r_left * n);
        let mut data = vec![0.0; r_left * n * r_right];
        for row in 0..m.nrows() {
            for b in 0..r_right {
                data[row * r_right + b] = m[(row, b)];
            }
        }
        Self { r_left, n, r_right, data }
    }

    pub fn from_right_unfold(m: &DMatrix<f64>, n: usize, r_right: usize) -> Self {
        let r_left = m.nrows();
        debug_assert_eq!(m.ncols(), n * r_right);
        let mut data = vec![0.0; r_left * n * r_right];
        for a in 0..r_left {
            for col in 0..n * r_right {
                data[a * n * r_right + col] = m[(a, col)];
            }
        }
        Self { r_left, n, r_right, data }
    }

    fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Chain of TT cores with matching bond dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorTrain {
    cores: Vec<TTCore>,
}

impl TensorTrain {
    pub fn new(cores: Vec<TTCore>) -> Result<Self, TTError> {
        if cores.is_empty() {
            return Err(TTError::ShapeMismatch("a tensor train needs at least one core".into()));
        }
        if cores[0].r_left != 1 {
            return Err(TTError::ShapeMismatch(format!(
                "first core must have left rank 1, got {}",
                cores[0].r_left
            )));
        }
        if cores[cores.len() - 1].r_right != 1 {
            return Err(TTError::ShapeMismatch(format!(
                "last core must have right rank 1, got {}",
                cores[cores.len() - 1].r_right
            )));
        }
        for k in 0..cores.len() - 1 {
            if cores[k].r_right != cores[k + 1].r_left {
                return Err(TTError::ShapeMismatch(format!(
                    "bond mismatch between cores {k} and {}: {} vs {}",
                    k + 1,
                    cores[k].r_right,
                    cores[k + 1].r_left
                )));
            }
        }
        for (k, core) in cores.iter().enumerate() {
            if core.data.iter().any(|v| !v.is_finite()) {
                return Err(TTError::NonFinite { core: k });
            }
        }
        Ok(Self { cores })
    }

    /// Seeded random train with standard-normal entries; used to
    /// initialize sweeps and to drive property tests.
    pub fn random(seed: u64, mode_sizes: &[usize], ranks: &[usize]) -> Result<Self, TTError> {
        use rand::SeedableRng;
        if ranks.len() + 1 != mode_sizes.len() && !(mode_sizes.len() == 1 && ranks.is_empty()) {
            return Err(TTError::ShapeMismatch(
                "need exactly d-1 ranks for d mode sizes".into(),
            ));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = mode_sizes.len();
        let bond = |k: usize| -> usize {
            if k == 0 || k == d {
                1
            } else {
                ranks[k - 1]
            }
        };
        let cores = (0..d)
            .map(|k| {
                let (rl, n, rr) = (bond(k), mode_sizes[k], bond(k + 1));
                let data = (0..rl * n * rr)
                    .map(|_| crate::data::standard_normal(&mut rng))
                    .collect();
                TTCore { r_left: rl, n, r_right: rr, data }
            })
            .collect();
        Self::new(cores)
    }

    pub fn order(&self) -> usize {
        self.cores.len()
    }

    pub fn cores(&self) -> &[TTCore] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [TTCore] {
        &mut self.cores
    }

    pub fn into_cores(self) -> Vec<TTCore> {
        self.cores
    }

    pub fn mode_sizes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.n).collect()
    }

    /// Bond dimensions `(r_1, ..., r_{d-1})`.
    pub fn ranks(&self) -> Vec<usize> {
        self.cores.iter().take(self.cores.len() - 1).map(|c| c.r_right).collect()
    }

    /// Free-parameter count `sum_k r_{k-1} n_k r_k`.
    pub fn dofs(&self) -> usize {
        self.cores.iter().map(|c| c.data.len()).sum()
    }

    /// Entry of the represented coefficient tensor at a multi-index.
    pub fn entry(&self, index: &[usize]) -> Result<f64, TTError> {
        if index.len() != self.order() {
            return Err(TTError::DimensionMismatch { expected: self.order(), got: index.len() });
        }
        let mut v = DMatrix::from_element(1, 1, 1.0);
        for (core, &i) in self.cores.iter().zip(index) {
            if i >= core.n {
                return Err(TTError::InvalidModeIndex { index: i, order: core.n });
            }
            v *= core.slice(i);
        }
        Ok(v[(0, 0)])
    }

    /// Dense coefficient tensor in C order (first mode slowest).
    /// Guarded: this is a test oracle, not a production path.
    pub fn to_dense(&self) -> Result<Vec<f64>, TTError> {
        let size: usize = self.mode_sizes().iter().product();
        if size > DENSE_GUARD {
            return Err(TTError::DenseSizeGuard { size, limit: DENSE_GUARD });
        }
        // acc: row-major (P x r) where P = prod of processed mode sizes
        let mut acc = vec![1.0_f64];
        let mut p = 1usize;
        let mut r = 1usize;
        for core in &self.cores {
            let (rl, n, rr) = core.shape();
            debug_assert_eq!(rl, r);
            let mut next = vec![0.0; p * n * rr];
            for row in 0..p {
                for i in 0..n {
                    for b in 0..rr {
                        let mut s = 0.0;
                        for a in 0..rl {
                            s += acc[row * rl + a] * core.get(a, i, b);
                        }
                        next[(row * n + i) * rr + b] = s;
                    }
                }
            }
            acc = next;
            p *= n;
            r = rr;
        }
        debug_assert_eq!(r, 1);
        Ok(acc)
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut copy = self.clone();
        copy.orthogonalize(0);
        copy.cores[0].frobenius_sq().sqrt()
    }

    /// Make cores left of `pivot` left-orthogonal and cores right of it
    /// right-orthogonal; the represented tensor is unchanged.
    pub fn orthogonalize(&mut self, pivot: usize) {
        assert!(pivot < self.order(), "pivot {} out of range", pivot);
        for k in 0..pivot {
            self.left_orthogonalize_step(k);
        }
        for k in (pivot + 1..self.order()).rev() {
            self.right_orthogonalize_step(k);
        }
    }

    fn left_orthogonalize_step(&mut self, k: usize) {
        let (rl, n, _) = self.cores[k].shape();
        let m = self.cores[k].left_unfold();
        let qr = m.qr();
        let q = qr.q();
        let r = qr.r();
        self.cores[k] = TTCore::from_left_unfold(&q, rl, n);
        let (_, n_next, rr_next) = self.cores[k + 1].shape();
        let merged = r * self.cores[k + 1].right_unfold();
        self.cores[k + 1] = TTCore::from_right_unfold(&merged, n_next, rr_next);
    }

    fn right_orthogonalize_step(&mut self, k: usize) {
        let (_, n, rr) = self.cores[k].shape();
        let mt = self.cores[k].right_unfold().transpose();
        let qr = mt.qr();
        let q = qr.q().transpose(); // orthonormal rows
        let l = qr.r().transpose();
        self.cores[k] = TTCore::from_right_unfold(&q, n, rr);
        let (rl_prev, n_prev, _) = self.cores[k - 1].shape();
        let merged = self.cores[k - 1].left_unfold() * l;
        self.cores[k - 1] = TTCore::from_left_unfold(&merged, rl_prev, n_prev);
    }

    /// TT-SVD rounding to a relative Frobenius tolerance.
    ///
    /// The budget is split as `tol / sqrt(d-1)` per truncated bond,
    /// which gives the global guarantee by the usual union bound.
    /// `tolerance = 0` removes only numerically exact rank deficiency.
    pub fn round(&self, tolerance: f64) -> Result<TensorTrain, TTError> {
        assert!((0.0..1.0).contains(&tolerance), "tolerance must be in [0, 1)");
        let d = self.order();
        if d == 1 {
            return Ok(self.clone());
        }
        let mut work = self.clone();
        work.orthogonalize(0);
        let norm = work.cores[0].frobenius_sq().sqrt();
        if norm == 0.0 {
            // all-zero tensor: collapse every bond to rank 1
            let cores = work
                .cores
                .iter()
                .map(|c| TTCore::zeros(1, c.n, 1))
                .collect();
            return TensorTrain::new(cores);
        }
        let budget = tolerance * norm / ((d - 1) as f64).sqrt();
        for k in 0..d - 1 {
            let (rl, n, _) = work.cores[k].shape();
            let m = work.cores[k].left_unfold();
            let (nrows, ncols) = (m.nrows(), m.ncols());
            let svd = m.svd(true, true);
            let u = svd.u.as_ref().expect("svd requested u");
            let vt = svd.v_t.as_ref().expect("svd requested v_t");
            let sigma = &svd.singular_values;
            let full = sigma.len();
            let smax = sigma.max();
            let floor = smax * f64::EPSILON * (nrows.max(ncols) as f64);
            // discard the largest tail with sqrt(sum sigma^2) <= budget
            let mut keep = full;
            let mut tail = 0.0;
            while keep > 1 {
                let s = sigma[keep - 1];
                let candidate = tail + s * s;
                if candidate.sqrt() <= budget || s <= floor {
                    tail = candidate;
                    keep -= 1;
                } else {
                    break;
                }
            }
            let u_k = u.columns(0, keep).into_owned();
            let mut sv = DMatrix::zeros(keep, vt.ncols());
            for i in 0..keep {
                for j in 0..vt.ncols() {
                    sv[(i, j)] = sigma[i] * vt[(i, j)];
                }
            }
            work.cores[k] = TTCore::from_left_unfold(&u_k, rl, n);
            let (_, n_next, rr_next) = work.cores[k + 1].shape();
            let merged = sv * work.cores[k + 1].right_unfold();
            work.cores[k + 1] = TTCore::from_right_unfold(&merged, n_next, rr_next);
        }
        TensorTrain::new(work.cores)
    }

    /// Formal linear combination `a * self + b * other` (ranks add).
    pub fn linear_combination(&self, a: f64, other: &TensorTrain, b: f64) -> Result<TensorTrain, TTError> {
        if self.mode_sizes() != other.mode_sizes() {
            return Err(TTError::ShapeMismatch("mode sizes differ".into()));
        }
        let d = self.order();
        if d == 1 {
            let (_, n, _) = self.cores[0].shape();
            let mut core = TTCore::zeros(1, n, 1);
            for i in 0..n {
                core.set(0, i, 0, a * self.cores[0].get(0, i, 0) + b * other.cores[0].get(0, i, 0));
            }
            return TensorTrain::new(vec![core]);
        }
        let mut cores = Vec::with_capacity(d);
        for k in 0..d {
            let (rl1, n, rr1) = self.cores[k].shape();
            let (rl2, _, rr2) = other.cores[k].shape();
            if k == 0 {
                let mut core = TTCore::zeros(1, n, rr1 + rr2);
                for i in 0..n {
                    for bb in 0..rr1 {
                        core.set(0, i, bb, a * self.cores[k].get(0, i, bb));
                    }
                    for bb in 0..rr2 {
                        core.set(0, i, rr1 + bb, b * other.cores[k].get(0, i, bb));
                    }
                }
                cores.push(core);
            } else if k == d - 1 {
                let mut core = TTCore::zeros(rl1 + rl2, n, 1);
                for i in 0..n {
                    for al in 0..rl1 {
                        core.set(al, i, 0, self.cores[k].get(al, i, 0));
                    }
                    for al in 0..rl2 {
                        core.set(rl1 + al, i, 0, other.cores[k].get(al, i, 0));
                    }
                }
                cores.push(core);
            } else {
                let mut core = TTCore::zeros(rl1 + rl2, n, rr1 + rr2);
                for i in 0..n {
                    for al in 0..rl1 {
                        for bb in 0..rr1 {
                            core.set(al, i, bb, self.cores[k].get(al, i, bb));
                        }
                    }
                    for al in 0..rl2 {
                        for bb in 0..rr2 {
                            core.set(rl1 + al, i, rr1 + bb, other.cores[k].get(al, i, bb));
                        }
                    }
                }
                cores.push(core);
            }
        }
        TensorTrain::new(cores)
    }

    /// Frobenius distance `|| self - other ||_F`.
    pub fn distance(&self, other: &TensorTrain) -> Result<f64, TTError> {
        Ok(self.linear_combination(1.0, other, -1.0)?.frobenius_norm())
    }
}

/// Tensor train paired with per-dimension bases: a function on the
/// product of the basis domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalTT {
    train: TensorTrain,
    bases: Vec<BasisSpec>,
}

impl FunctionalTT {
    pub fn new(train: TensorTrain, bases: Vec<BasisSpec>) -> Result<Self, TTError> {
        if bases.len() != train.order() {
            return Err(TTError::ShapeMismatch(format!(
                "{} bases for a train of order {}",
                bases.len(),
                train.order()
            )));
        }
        for (k, (core, basis)) in train.cores().iter().zip(&bases).enumerate() {
            if core.n != basis.degree_count() {
                return Err(TTError::ShapeMismatch(format!(
                    "core {k} mode size {} vs basis degree count {}",
                    core.n,
                    basis.degree_count()
                )));
            }
        }
        Ok(Self { train, bases })
    }

    pub fn train(&self) -> &TensorTrain {
        &self.train
    }

    pub fn bases(&self) -> &[BasisSpec] {
        &self.bases
    }

    pub fn dimension(&self) -> usize {
        self.train.order()
    }

    pub fn dofs(&self) -> usize {
        self.train.dofs()
    }

    fn check_point(&self, x: &[f64]) -> Result<(), TTError> {
        if x.len() != self.dimension() {
            return Err(TTError::DimensionMismatch { expected: self.dimension(), got: x.len() });
        }
        Ok(())
    }

    /// Left-to-right contraction of the basis rows with the cores.
    pub fn eval(&self, x: &[f64]) -> Result<f64, TTError> {
        self.check_point(x)?;
        let mut v = DMatrix::from_element(1, 1, 1.0);
        for (k, core) in self.train.cores().iter().enumerate() {
            let psi = self.bases[k].eval(x[k])?;
            v *= core.contract_mode(&psi);
        }
        Ok(v[(0, 0)])
    }

    /// Full gradient in one forward/backward pass over the chain;
    /// costs O(d n r^2) rather than d separate evaluations.
    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>, TTError> {
        self.check_point(x)?;
        let d = self.dimension();
        let cores = self.train.cores();
        let mut psis = Vec::with_capacity(d);
        let mut dpsis = Vec::with_capacity(d);
        for k in 0..d {
            psis.push(self.bases[k].eval(x[k])?);
            dpsis.push(self.bases[k].eval_derivative(x[k])?);
        }
        // prefix[k]: 1 x r_k row vector through cores 0..k
        let mut prefix = Vec::with_capacity(d + 1);
        prefix.push(DMatrix::from_element(1, 1, 1.0));
        for k in 0..d {
            let next = &prefix[k] * cores[k].contract_mode(&psis[k]);
            prefix.push(next);
        }
        // suffix[k]: r_k x 1 column vector through cores k..d
        let mut suffix = vec![DMatrix::from_element(1, 1, 1.0); d + 1];
        for k in (0..d).rev() {
            suffix[k] = cores[k].contract_mode(&psis[k]) * &suffix[k + 1];
        }
        let mut grad = vec![0.0; d];
        for k in 0..d {
            let m = cores[k].contract_mode(&dpsis[k]);
            grad[k] = (&prefix[k] * m * &suffix[k + 1])[(0, 0)];
        }
        Ok(grad)
    }
}

impl crate::surrogate::Surrogate for FunctionalTT {
    fn value(&self, x: &[f64]) -> Result<f64, crate::surrogate::SurrogateError> {
        self.eval(x).map_err(|e| crate::surrogate::SurrogateError::from_tt(e, x))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, crate::surrogate::SurrogateError> {
        self.grad(x).map_err(|e| crate::surrogate::SurrogateError::from_tt(e, x))
    }

    fn dofs(&self) -> usize {
        self.train.dofs()
    }
}

/// Contract a dense C-order coefficient tensor against basis vectors:
/// the independent evaluation oracle tt_eval is checked against.
pub fn dense_contract(dense: &[f64], shape: &[usize], basis_vectors: &[Vec<f64>]) -> f64 {
    assert_eq!(shape.len(), basis_vectors.len());
    let mut total = 0.0;
    let mut index = vec![0usize; shape.len()];
    for (flat, &c) in dense.iter().enumerate() {
        let mut rem = flat;
        for k in (0..shape.len()).rev() {
            index[k] = rem % shape[k];
            rem /= shape[k];
        }
        let mut w = c;
        for k in 0..shape.len() {
            w *= basis_vectors[k][index[k]];
        }
        total += w;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_bases(d: usize, n: usize) -> Vec<BasisSpec> {
        (0..d).map(|_| BasisSpec::new(n, -1.0, 1.0).unwrap()).collect()
    }

    fn constant_ftt(d: usize, n: usize) -> FunctionalTT {
        // weight 1 on the all-psi_0 term
        let cores = (0..d)
            .map(|_| {
                let mut c = TTCore::zeros(1, n, 1);
                c.set(0, 0, 0, 1.0);
                c
            })
            .collect();
        FunctionalTT::new(TensorTrain::new(cores).unwrap(), unit_bases(d, n)).unwrap()
    }

    #[test]
    fn constant_coefficient_tensor_evaluates_to_one() {
        let ftt = constant_ftt(4, 3);
        assert_abs_diff_eq!(ftt.eval(&[0.3, -0.7, 0.0, 0.99]).unwrap(), 1.0, epsilon = 1e-14);
        let g = ftt.grad(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        for gi in g {
            assert_abs_diff_eq!(gi, 0.0, epsilon = 1e-14);
        }
    }

    /// Rank-1 FTT for a separable product of per-mode functions, built by
    /// projecting each factor onto the basis with Gauss quadrature.
    fn separable_ftt(d: usize, n: usize, factor: impl Fn(usize, f64) -> f64) -> FunctionalTT {
        let bases = unit_bases(d, n);
        let rule = crate::basis::gauss_legendre_rule(n + 10, -1.0, 1.0).unwrap();
        let cores = (0..d)
            .map(|k| {
                let mut c = TTCore::zeros(1, n, 1);
                for i in 0..n {
                    // uniform-probability inner product <f, psi_i>
                    let coeff: f64 = rule
                        .nodes
                        .iter()
                        .zip(&rule.weights)
                        .map(|(&x, &w)| w / 2.0 * factor(k, x) * bases[k].eval(x).unwrap()[i])
                        .sum();
                    c.set(0, i, 0, coeff);
                }
                c
            })
            .collect();
        FunctionalTT::new(TensorTrain::new(cores).unwrap(), bases).unwrap()
    }

    #[test]
    fn rank_one_exp_sum_at_origin() {
        let d = 6;
        let ftt = separable_ftt(d, 9, |_, x| (-x / (2.0 * d as f64)).exp());
        assert_abs_diff_eq!(ftt.eval(&vec![0.0; d]).unwrap(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn eval_matches_dense_contraction() {
        let tt = TensorTrain::random(7, &[3, 3, 3], &[2, 2]).unwrap();
        let bases = unit_bases(3, 3);
        let ftt = FunctionalTT::new(tt.clone(), bases.clone()).unwrap();
        let dense = tt.to_dense().unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let vecs: Vec<Vec<f64>> = (0..3).map(|k| bases[k].eval(x[k]).unwrap()).collect();
            let direct = dense_contract(&dense, &[3, 3, 3], &vecs);
            assert_abs_diff_eq!(ftt.eval(&x).unwrap(), direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let tt = TensorTrain::random(11, &[4, 4, 4, 4, 4], &[3, 3, 3, 3]).unwrap();
        let ftt = FunctionalTT::new(tt, unit_bases(5, 4)).unwrap();
        let x = [0.21, -0.53, 0.11, 0.77, -0.32];
        let g = ftt.grad(&x).unwrap();
        let h = 1e-6;
        for k in 0..5 {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += h;
            xm[k] -= h;
            let fd = (ftt.eval(&xp).unwrap() - ftt.eval(&xm).unwrap()) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() / g[k].abs().max(1.0) < 1e-6,
                "k={k} fd={fd} grad={}",
                g[k]
            );
        }
    }

    #[test]
    fn grad_of_separable_product_is_the_product_rule() {
        let d = 4;
        let ftt = separable_ftt(d, 12, |k, x| (0.3 * (k as f64 + 1.0) * x).sin() + 2.0);
        let x = [0.4, -0.2, 0.6, 0.05];
        let g = ftt.grad(&x).unwrap();
        let factor = |k: usize, t: f64| (0.3 * (k as f64 + 1.0) * t).sin() + 2.0;
        let dfactor = |k: usize, t: f64| 0.3 * (k as f64 + 1.0) * (0.3 * (k as f64 + 1.0) * t).cos();
        for k in 0..d {
            let mut expect = dfactor(k, x[k]);
            for j in 0..d {
                if j != k {
                    expect *= factor(j, x[j]);
                }
            }
            assert_abs_diff_eq!(g[k], expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn to_dense_single_core_is_identity() {
        let mut core = TTCore::zeros(1, 5, 1);
        for i in 0..5 {
            core.set(0, i, 0, i as f64 + 1.0);
        }
        let tt = TensorTrain::new(vec![core]).unwrap();
        assert_eq!(tt.to_dense().unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(tt.dofs(), 5);
    }

    #[test]
    fn to_dense_rank_one_is_outer_product() {
        let u = [1.0, 2.0];
        let w = [3.0, -1.0, 0.5];
        let mut c0 = TTCore::zeros(1, 2, 1);
        let mut c1 = TTCore::zeros(1, 3, 1);
        for (i, &v) in u.iter().enumerate() {
            c0.set(0, i, 0, v);
        }
        for (i, &v) in w.iter().enumerate() {
            c1.set(0, i, 0, v);
        }
        let tt = TensorTrain::new(vec![c0, c1]).unwrap();
        let dense = tt.to_dense().unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(dense[i * 3 + j], u[i] * w[j]);
            }
        }
    }

    #[test]
    fn dense_size_guard_trips() {
        let tt = TensorTrain::random(1, &[500, 500, 500], &[1, 1]).unwrap();
        assert!(matches!(tt.to_dense(), Err(TTError::DenseSizeGuard { .. })));
    }

    #[test]
    fn orthogonalize_preserves_tensor_and_norm() {
        let tt = TensorTrain::random(5, &[3, 4, 2, 3], &[2, 3, 2]).unwrap();
        let dense_before = tt.to_dense().unwrap();
        let norm_before: f64 = dense_before.iter().map(|v| v * v).sum::<f64>().sqrt();
        for pivot in 0..4 {
            let mut work = tt.clone();
            work.orthogonalize(pivot);
            let dense_after = work.to_dense().unwrap();
            for (a, b) in dense_before.iter().zip(&dense_after) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
            // Parseval: norm concentrates in the pivot core
            let pivot_norm = work.cores()[pivot].frobenius_sq().sqrt();
            assert_abs_diff_eq!(pivot_norm, norm_before, epsilon = 1e-12);
            // gram checks
            for (k, core) in work.cores().iter().enumerate() {
                if k < pivot {
                    let q = core.left_unfold();
                    let gram = q.transpose() * q;
                    for i in 0..gram.nrows() {
                        for j in 0..gram.ncols() {
                            let expect = if i == j { 1.0 } else { 0.0 };
                            assert_abs_diff_eq!(gram[(i, j)], expect, epsilon = 1e-12);
                        }
                    }
                } else if k > pivot {
                    let q = core.right_unfold();
                    let gram = &q * q.transpose();
                    for i in 0..gram.nrows() {
                        for j in 0..gram.ncols() {
                            let expect = if i == j { 1.0 } else { 0.0 };
                            assert_abs_diff_eq!(gram[(i, j)], expect, epsilon = 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn round_recovers_exact_low_rank() {
        // rank-1 tensor padded to rank 2 with a zero channel
        let base = TensorTrain::random(9, &[3, 3, 3], &[1, 1]).unwrap();
        let zero = {
            let cores = vec![TTCore::zeros(1, 3, 1), TTCore::zeros(1, 3, 1), TTCore::zeros(1, 3, 1)];
            TensorTrain::new(cores).unwrap()
        };
        let padded = base.linear_combination(1.0, &zero, 1.0).unwrap();
        assert_eq!(padded.ranks(), vec![2, 2]);
        let rounded = padded.round(1e-10).unwrap();
        assert_eq!(rounded.ranks(), vec![1, 1]);
        let err = rounded.distance(&base).unwrap();
        assert!(err <= 1e-14 * base.frobenius_norm().max(1.0), "err = {err}");
    }

    #[test]
    fn round_zero_tolerance_only_drops_exact_deficiency() {
        let tt = TensorTrain::random(13, &[3, 3, 3], &[2, 2]).unwrap();
        let rounded = tt.round(0.0).unwrap();
        assert_eq!(rounded.ranks(), tt.ranks());
        assert!(rounded.distance(&tt).unwrap() <= 1e-12 * tt.frobenius_norm());
    }

    #[test]
    fn round_respects_relative_error_bound() {
        let tt = TensorTrain::random(21, &[4, 4, 4], &[3, 3]).unwrap();
        let tol = 1e-3;
        let rounded = tt.round(tol).unwrap();
        let rel = rounded.distance(&tt).unwrap() / tt.frobenius_norm();
        assert!(rel <= tol, "relative error {rel} > {tol}");
        for (a, b) in rounded.ranks().iter().zip(tt.ranks()) {
            assert!(*a <= b);
        }
        // idempotence at fixed tolerance
        let again = rounded.round(tol).unwrap();
        assert!(again.distance(&rounded).unwrap() <= 1e-14 * rounded.frobenius_norm().max(1.0));
    }

    #[test]
    fn dof_counting() {
        let tt = TensorTrain::random(2, &[2, 2, 2], &[1, 1]).unwrap();
        assert_eq!(tt.dofs(), 6);
        let tt = TensorTrain::random(2, &[3, 3, 3, 3], &[2, 3, 2]).unwrap();
        assert_eq!(tt.dofs(), 3 * 2 + 2 * 3 * 3 + 3 * 3 * 2 + 2 * 3);
    }

    #[test]
    fn mismatched_point_dimension_is_an_error() {
        let ftt = constant_ftt(3, 2);
        assert!(matches!(
            ftt.eval(&[0.0, 0.0]),
            Err(TTError::DimensionMismatch { .. })
        ));
        assert!(ftt.eval(&[0.0, 0.0, 2.0]).is_err()); // out of domain
    }
}
