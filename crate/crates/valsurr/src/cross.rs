//! Gradient-augmented tensor-train cross regression.
//!
//! Fits a functional tensor train to a black-box function by
//! alternating left-to-right and right-to-left sweeps. At mode `k` the
//! sample set is the cross `X<k (+) X_k (+) X>k` of nested interpolation
//! sets drawn from a fixed collocation grid, so the local least-squares
//! problem has exactly as many sample points as the core has unknowns.
//! Value rows are augmented with one gradient row per dimension,
//! weighted by `gradient_weight / d`. Pivot rows for the next bond are
//! selected by maxvol on the orthogonalized candidate interfaces, and
//! the sweep loop stops when the Frobenius distance between consecutive
//! coefficient iterates drops below `tol_stop`.
//!
//! The local normal equations have the form
//! `(G_L x G_P x G_R) + w (S_L x G_P x G_R + G_L x S_P x G_R + G_L x G_P x S_R)`
//! with small per-factor Gram matrices, so they are solved by
//! simultaneous whitening and eigen-diagonalization of the three
//! factors instead of a dense factorization of the full system.

use crate::basis::{BasisError, BasisSpec, QuadratureRule};
use crate::tt::{FunctionalTT, TTCore, TTError, TensorTrain};
use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CrossError {
    #[error("pivot selection failed at mode {mode}: {detail}")]
    PivotFailure { mode: usize, detail: String },
    #[error("maxvol input is rank deficient (pivot {pivot:.3e} at column {column})")]
    RankDeficient { pivot: f64, column: usize },
    #[error("maxvol needs at least as many rows as columns, got {rows}x{cols}")]
    NotTall { rows: usize, cols: usize },
    #[error("gradient weight {0} > 0 but the oracle has no gradient")]
    MissingGradient(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tt(#[from] TTError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

/// Tuning knobs of the cross fit, including the collocation grids the
/// index sets are drawn from.
#[derive(Debug, Clone)]
pub struct CrossConfig {
    /// stop when the relative Frobenius difference of consecutive sweep
    /// iterates falls below this
    pub tol_stop: f64,
    /// weight of the gradient residual in the local regression (lambda)
    pub gradient_weight: f64,
    pub max_sweeps: usize,
    /// per-dimension collocation rules; node counts must match the basis
    pub collocation: Vec<QuadratureRule>,
    pub rank_cap: usize,
    /// dominance slack accepted by maxvol
    pub maxvol_delta: f64,
    pub seed: u64,
}

impl CrossConfig {
    pub fn new(collocation: Vec<QuadratureRule>) -> Self {
        Self {
            tol_stop: 1e-5,
            gradient_weight: 1.0,
            max_sweeps: 40,
            collocation,
            rank_cap: 12,
            maxvol_delta: 1e-2,
            seed: 0,
        }
    }
}

/// Black-box target with optional analytic gradient and query
/// accounting. Distinct points are cached, so re-sampling a cross point
/// in a later sweep does not hit the underlying function again.
pub struct OracleFunction {
    value: Box<dyn Fn(&[f64]) -> f64>,
    gradient: Option<Box<dyn Fn(&[f64]) -> Vec<f64>>>,
    cache: RefCell<HashMap<Vec<u64>, (Vec<f64>, f64, Option<Vec<f64>>)>>,
    distinct: Cell<usize>,
    cumulative: Cell<usize>,
}

impl OracleFunction {
    pub fn new(value: impl Fn(&[f64]) -> f64 + 'static) -> Self {
        Self {
            value: Box::new(value),
            gradient: None,
            cache: RefCell::new(HashMap::new()),
            distinct: Cell::new(0),
            cumulative: Cell::new(0),
        }
    }

    pub fn with_gradient(
        value: impl Fn(&[f64]) -> f64 + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + 'static,
    ) -> Self {
        Self {
            value: Box::new(value),
            gradient: Some(Box::new(gradient)),
            cache: RefCell::new(HashMap::new()),
            distinct: Cell::new(0),
            cumulative: Cell::new(0),
        }
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    /// Distinct points queried so far.
    pub fn distinct_queries(&self) -> usize {
        self.distinct.get()
    }

    /// Total requests including cache hits (what a cache-less
    /// implementation would have paid).
    pub fn cumulative_queries(&self) -> usize {
        self.cumulative.get()
    }

    pub fn eval(&self, x: &[f64], need_grad: bool) -> (f64, Option<Vec<f64>>) {
        self.cumulative.set(self.cumulative.get() + 1);
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        {
            let cache = self.cache.borrow();
            if let Some((_, v, g)) = cache.get(&key) {
                if !need_grad || g.is_some() {
                    return (*v, g.clone());
                }
            }
        }
        let v = (self.value)(x);
        let g = if need_grad {
            Some(self.gradient.as_ref().expect("gradient requested but absent")(x))
        } else {
            None
        };
        let mut cache = self.cache.borrow_mut();
        let fresh = !cache.contains_key(&key);
        cache.insert(key, (x.to_vec(), v, g.clone()));
        if fresh {
            self.distinct.set(self.distinct.get() + 1);
        }
        (v, g)
    }

    /// Snapshot of all cached (point, value) pairs; the training set the
    /// fit actually saw.
    pub fn sampled_points(&self) -> Vec<(Vec<f64>, f64)> {
        self.cache
            .borrow()
            .values()
            .map(|(p, v, _)| (p.clone(), *v))
            .collect()
    }
}

/// Outcome bookkeeping of a cross (or ALS) fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitStats {
    pub converged: bool,
    pub sweeps: usize,
    pub final_ranks: Vec<usize>,
    pub distinct_samples: usize,
    pub cumulative_samples: usize,
    pub cpu_train_s: f64,
    pub err_train_2: f64,
    /// local systems that needed the Tikhonov retry
    pub regularized_solves: usize,
    /// sample count was below the free parameters of the largest core
    pub underdetermined: bool,
}

/// Nested interpolation sets: for every bond, the prefix tuples to the
/// left and suffix tuples to the right, as collocation node indices.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexSets {
    pub left: Vec<Vec<Vec<usize>>>,
    pub right: Vec<Vec<Vec<usize>>>,
}

impl IndexSets {
    /// Every prefix at bond b must extend a prefix at bond b-1 by one
    /// node (mirrored for suffixes).
    pub fn is_nested(&self) -> bool {
        let d = self.left.len() - 1;
        for b in 1..d {
            for p in &self.left[b] {
                if p.len() != b {
                    return false;
                }
                if !self.left[b - 1].iter().any(|q| *q == p[..b - 1]) {
                    return false;
                }
            }
            for s in &self.right[b] {
                if s.len() != d - b {
                    return false;
                }
                if !self.right[b + 1].iter().any(|q| *q == s[1..]) {
                    return false;
                }
            }
        }
        true
    }
}

/// Quasi-dominant row selection: returns `r` row indices (ascending) of
/// a submatrix `Ahat` with all entries of `A Ahat^{-1}` below `1 + delta`
/// in magnitude. Ties in pivot magnitude go to the lowest row index so
/// runs are reproducible.
pub fn maxvol(a: &DMatrix<f64>, delta: f64) -> Result<Vec<usize>, CrossError> {
    let (nrows, ncols) = (a.nrows(), a.ncols());
    if nrows < ncols {
        return Err(CrossError::NotTall { rows: nrows, cols: ncols });
    }
    // initial rows by column-wise partial pivoting
    let mut work = a.clone();
    let mut selected = Vec::with_capacity(ncols);
    let mut used = vec![false; nrows];
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..ncols {
        let mut best = None;
        let mut best_val = 0.0;
        for row in 0..nrows {
            if used[row] {
                continue;
            }
            let v = work[(row, col)].abs();
            if v > best_val {
                best_val = v;
                best = Some(row);
            }
        }
        let pivot_row = match best {
            Some(r) if best_val > 1e-12 * scale => r,
            _ => return Err(CrossError::RankDeficient { pivot: best_val, column: col }),
        };
        used[pivot_row] = true;
        selected.push(pivot_row);
        let pivot = work[(pivot_row, col)];
        for row in 0..nrows {
            if row == pivot_row || used[row] {
                continue;
            }
            let factor = work[(row, col)] / pivot;
            if factor != 0.0 {
                for c in col..ncols {
                    let update = factor * work[(pivot_row, c)];
                    work[(row, c)] -= update;
                }
            }
        }
    }

    // swap iterations until quasi-dominance
    for _ in 0..500 {
        let sub = DMatrix::from_fn(ncols, ncols, |i, j| a[(selected[i], j)]);
        let lu = sub.transpose().lu();
        // c = a * sub^{-1}  <=>  sub^T c^T = a^T
        let ct = lu
            .solve(&a.transpose())
            .ok_or(CrossError::RankDeficient { pivot: 0.0, column: 0 })?;
        let mut best = (0usize, 0usize);
        let mut best_val = 0.0;
        for row in 0..nrows {
            for col in 0..ncols {
                let v = ct[(col, row)].abs();
                if v > best_val {
                    best_val = v;
                    best = (row, col);
                }
            }
        }
        if best_val <= 1.0 + delta {
            selected.sort_unstable();
            return Ok(selected);
        }
        selected[best.1] = best.0;
    }
    Err(CrossError::PivotFailure {
        mode: 0,
        detail: "maxvol did not reach dominance within 500 swaps".into(),
    })
}

/// Dense 3-way work tensor used by the local solves, laid out like a
/// TT core: entry (a, i, b) at `(a*n + i)*rr + b`.
#[derive(Clone)]
struct Tens3 {
    rl: usize,
    n: usize,
    rr: usize,
    data: Vec<f64>,
}

impl Tens3 {
    fn zeros(rl: usize, n: usize, rr: usize) -> Self {
        Self { rl, n, rr, data: vec![0.0; rl * n * rr] }
    }

    #[inline]
    fn idx(&self, a: usize, i: usize, b: usize) -> usize {
        (a * self.n + i) * self.rr + b
    }

    /// out[a', i, b] = sum_a m[a', a] t[a, i, b]
    fn apply_left(&self, m: &DMatrix<f64>) -> Tens3 {
        debug_assert_eq!(m.ncols(), self.rl);
        let mut out = Tens3::zeros(m.nrows(), self.n, self.rr);
        for ap in 0..m.nrows() {
            for a in 0..self.rl {
                let w = m[(ap, a)];
                if w == 0.0 {
                    continue;
                }
                for i in 0..self.n {
                    let src = self.idx(a, i, 0);
                    let dst = out.idx(ap, i, 0);
                    for b in 0..self.rr {
                        out.data[dst + b] += w * self.data[src + b];
                    }
                }
            }
        }
        out
    }

    /// out[a, i', b] = sum_i m[i', i] t[a, i, b]
    fn apply_mid(&self, m: &DMatrix<f64>) -> Tens3 {
        debug_assert_eq!(m.ncols(), self.n);
        let mut out = Tens3::zeros(self.rl, m.nrows(), self.rr);
        for a in 0..self.rl {
            for ip in 0..m.nrows() {
                let dst = out.idx(a, ip, 0);
                for i in 0..self.n {
                    let w = m[(ip, i)];
                    if w == 0.0 {
                        continue;
                    }
                    let src = self.idx(a, i, 0);
                    for b in 0..self.rr {
                        out.data[dst + b] += w * self.data[src + b];
                    }
                }
            }
        }
        out
    }

    /// out[a, i, b'] = sum_b m[b', b] t[a, i, b]
    fn apply_right(&self, m: &DMatrix<f64>) -> Tens3 {
        debug_assert_eq!(m.ncols(), self.rr);
        let mut out = Tens3::zeros(self.rl, self.n, m.nrows());
        for a in 0..self.rl {
            for i in 0..self.n {
                let src = self.idx(a, i, 0);
                let dst = out.idx(a, i, 0);
                for bp in 0..m.nrows() {
                    let mut s = 0.0;
                    for b in 0..self.rr {
                        s += m[(bp, b)] * self.data[src + b];
                    }
                    out.data[dst + bp] = s;
                }
            }
        }
        out
    }

    fn axpy(&mut self, w: f64, other: &Tens3) {
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += w * y;
        }
    }

    fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Inputs of one local least-squares update at a fixed mode: interface
/// matrices, basis evaluations, and sampled data. Separated out so the
/// solver can be checked against a dense oracle in tests.
struct LocalSystem<'a> {
    lval: &'a DMatrix<f64>,
    ldiff: &'a [DMatrix<f64>],
    rval: &'a DMatrix<f64>,
    rdiff: &'a [DMatrix<f64>],
    psi: &'a DMatrix<f64>,
    dpsi: &'a DMatrix<f64>,
    values: &'a Tens3,
    /// gradient data per dimension, ordered: modes < k, mode k, modes > k
    grads: Option<&'a [Tens3]>,
    grad_weight: f64,
}

struct LocalSolution {
    core: TTCore,
    /// relative value-residual on the cross samples
    residual_rel: f64,
    regularized: bool,
}

fn solve_local_system(sys: &LocalSystem<'_>, mode: usize) -> Result<LocalSolution, CrossError> {
    let rl = sys.lval.nrows();
    let n = sys.psi.nrows();
    let rr = sys.rval.ncols();
    let w = sys.grad_weight;

    let gram_l = sys.lval.transpose() * sys.lval;
    let gram_p = sys.psi.transpose() * sys.psi;
    let gram_r = sys.rval * sys.rval.transpose();

    let mut s_l = DMatrix::zeros(gram_l.nrows(), gram_l.ncols());
    let mut s_p = DMatrix::zeros(n, n);
    let mut s_r = DMatrix::zeros(gram_r.nrows(), gram_r.ncols());
    if sys.grads.is_some() {
        for m in sys.ldiff {
            s_l += m.transpose() * m;
        }
        s_p += sys.dpsi.transpose() * sys.dpsi;
        for m in sys.rdiff {
            s_r += m * m.transpose();
        }
    }

    // right-hand side
    let lt = sys.lval.transpose();
    let pt = sys.psi.transpose();
    let mut rhs = sys.values.apply_left(&lt).apply_mid(&pt).apply_right(sys.rval);
    if let Some(grads) = sys.grads {
        let dpt = sys.dpsi.transpose();
        for (j, g) in grads.iter().enumerate() {
            let term = if j < sys.ldiff.len() {
                g.apply_left(&sys.ldiff[j].transpose()).apply_mid(&pt).apply_right(sys.rval)
            } else if j == sys.ldiff.len() {
                g.apply_left(&lt).apply_mid(&dpt).apply_right(sys.rval)
            } else {
                let rd = &sys.rdiff[j - sys.ldiff.len() - 1];
                g.apply_left(&lt).apply_mid(&pt).apply_right(rd)
            };
            rhs.axpy(w, &term);
        }
    }

    let fast = solve_by_diagonalization(&gram_l, &s_l, &gram_p, &s_p, &gram_r, &s_r, w, &rhs);
    let (solution, regularized) = match fast {
        Some(u) => (u, false),
        None => {
            let u = solve_dense_regularized(&gram_l, &s_l, &gram_p, &s_p, &gram_r, &s_r, w, &rhs)
                .ok_or(CrossError::PivotFailure {
                    mode,
                    detail: "local normal equations singular even after Tikhonov retry".into(),
                })?;
            (u, true)
        }
    };

    // value residual on the cross
    let predicted = solution
        .apply_left(sys.lval)
        .apply_mid(sys.psi)
        .apply_right(&sys.rval.transpose());
    let mut diff = predicted;
    diff.axpy(-1.0, sys.values);
    let residual_rel = diff.norm() / sys.values.norm().max(1e-300);

    let core = TTCore::from_data(rl, n, rr, solution.data)?;
    Ok(LocalSolution { core, residual_rel, regularized })
}

#[allow(clippy::too_many_arguments)]
fn solve_by_diagonalization(
    gram_l: &DMatrix<f64>,
    s_l: &DMatrix<f64>,
    gram_p: &DMatrix<f64>,
    s_p: &DMatrix<f64>,
    gram_r: &DMatrix<f64>,
    s_r: &DMatrix<f64>,
    w: f64,
    rhs: &Tens3,
) -> Option<Tens3> {
    struct Factor {
        inv_l: DMatrix<f64>, // L^{-1} with G = L L^T
        vecs: DMatrix<f64>,  // eigenvectors of L^{-1} S L^{-T}
        vals: Vec<f64>,
    }
    let prep = |g: &DMatrix<f64>, s: &DMatrix<f64>| -> Option<Factor> {
        let chol = Cholesky::new(g.clone())?;
        let l = chol.l();
        let eye = DMatrix::identity(g.nrows(), g.nrows());
        let inv_l = l.solve_lower_triangular(&eye)?;
        let s_tilde = &inv_l * s * inv_l.transpose();
        let eig = SymmetricEigen::new(s_tilde);
        Some(Factor {
            inv_l,
            vecs: eig.eigenvectors,
            vals: eig.eigenvalues.iter().copied().collect(),
        })
    };
    let fl = prep(gram_l, s_l)?;
    let fp = prep(gram_p, s_p)?;
    let fr = prep(gram_r, s_r)?;

    // whiten, rotate into the eigenbasis
    let mut t = rhs
        .apply_left(&fl.inv_l)
        .apply_mid(&fp.inv_l)
        .apply_right(&fr.inv_l)
        .apply_left(&fl.vecs.transpose())
        .apply_mid(&fp.vecs.transpose())
        .apply_right(&fr.vecs.transpose());
    for a in 0..t.rl {
        for i in 0..t.n {
            for b in 0..t.rr {
                let denom = 1.0 + w * (fl.vals[a] + fp.vals[i] + fr.vals[b]);
                if denom.abs() < 1e-300 || !denom.is_finite() {
                    return None;
                }
                let idx = t.idx(a, i, b);
                t.data[idx] /= denom;
            }
        }
    }
    // rotate back, unwhiten
    let out = t
        .apply_left(&fl.vecs)
        .apply_mid(&fp.vecs)
        .apply_right(&fr.vecs)
        .apply_left(&fl.inv_l.transpose())
        .apply_mid(&fp.inv_l.transpose())
        .apply_right(&fr.inv_l.transpose());
    if out.data.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(out)
}

#[allow(clippy::too_many_arguments)]
fn solve_dense_regularized(
    gram_l: &DMatrix<f64>,
    s_l: &DMatrix<f64>,
    gram_p: &DMatrix<f64>,
    s_p: &DMatrix<f64>,
    gram_r: &DMatrix<f64>,
    s_r: &DMatrix<f64>,
    w: f64,
    rhs: &Tens3,
) -> Option<Tens3> {
    let (rl, n, rr) = (rhs.rl, rhs.n, rhs.rr);
    let size = rl * n * rr;
    let mut normal = DMatrix::<f64>::zeros(size, size);
    let flat = |a: usize, i: usize, b: usize| (a * n + i) * rr + b;
    for a in 0..rl {
        for i in 0..n {
            for b in 0..rr {
                let row = flat(a, i, b);
                for a2 in 0..rl {
                    for i2 in 0..n {
                        for b2 in 0..rr {
                            let col = flat(a2, i2, b2);
                            let mut v = gram_l[(a, a2)] * gram_p[(i, i2)] * gram_r[(b, b2)];
                            v += w
                                * (s_l[(a, a2)] * gram_p[(i, i2)] * gram_r[(b, b2)]
                                    + gram_l[(a, a2)] * s_p[(i, i2)] * gram_r[(b, b2)]
                                    + gram_l[(a, a2)] * gram_p[(i, i2)] * s_r[(b, b2)]);
                            normal[(row, col)] = v;
                        }
                    }
                }
            }
        }
    }
    let shift = 1e-12 * normal.trace() / size as f64;
    for i in 0..size {
        normal[(i, i)] += shift;
    }
    let rhs_vec = nalgebra::DVector::from_vec(rhs.data.clone());
    let solution = normal.lu().solve(&rhs_vec)?;
    if solution.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Tens3 { rl, n, rr, data: solution.iter().copied().collect() })
}

struct Fitter<'a> {
    oracle: &'a OracleFunction,
    bases: &'a [BasisSpec],
    cfg: &'a CrossConfig,
    d: usize,
    nodes: Vec<Vec<f64>>,
    psi: Vec<DMatrix<f64>>,
    dpsi: Vec<DMatrix<f64>>,
    cores: Vec<TTCore>,
    /// target bond ranks, indices 0..=d with boundaries pinned to 1
    ranks: Vec<usize>,
    left_sets: Vec<Vec<Vec<usize>>>,
    right_sets: Vec<Vec<Vec<usize>>>,
    lval: Vec<DMatrix<f64>>,
    ldiff: Vec<Vec<DMatrix<f64>>>,
    rval: Vec<DMatrix<f64>>,
    rdiff: Vec<Vec<DMatrix<f64>>>,
    rng: ChaCha8Rng,
    regularized: usize,
    last_residual: f64,
    use_grad: bool,
}

impl<'a> Fitter<'a> {
    fn new(oracle: &'a OracleFunction, bases: &'a [BasisSpec], cfg: &'a CrossConfig) -> Result<Self, CrossError> {
        let d = bases.len();
        if d < 2 {
            return Err(CrossError::Config("cross regression needs dimension >= 2".into()));
        }
        if cfg.collocation.len() != d {
            return Err(CrossError::Config(format!(
                "{} collocation rules for dimension {d}",
                cfg.collocation.len()
            )));
        }
        if !(cfg.tol_stop > 0.0) {
            return Err(CrossError::Config("tol_stop must be positive".into()));
        }
        if cfg.gradient_weight < 0.0 {
            return Err(CrossError::Config("gradient_weight must be nonnegative".into()));
        }
        if cfg.gradient_weight > 0.0 && !oracle.has_gradient() {
            return Err(CrossError::MissingGradient(cfg.gradient_weight));
        }
        if cfg.rank_cap == 0 || cfg.max_sweeps == 0 {
            return Err(CrossError::Config("rank_cap and max_sweeps must be positive".into()));
        }
        let mut nodes = Vec::with_capacity(d);
        let mut psi = Vec::with_capacity(d);
        let mut dpsi = Vec::with_capacity(d);
        for k in 0..d {
            let n = bases[k].degree_count();
            if cfg.collocation[k].len() != n {
                return Err(CrossError::Config(format!(
                    "mode {k}: {} collocation nodes vs basis degree count {n}",
                    cfg.collocation[k].len()
                )));
            }
            let xs = cfg.collocation[k].nodes.clone();
            let mut p = DMatrix::zeros(n, n);
            let mut dp = DMatrix::zeros(n, n);
            for (t, &x) in xs.iter().enumerate() {
                let row = bases[k].eval(x)?;
                let drow = bases[k].eval_derivative(x)?;
                for m in 0..n {
                    p[(t, m)] = row[m];
                    dp[(t, m)] = drow[m];
                }
            }
            nodes.push(xs);
            psi.push(p);
            dpsi.push(dp);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mode_sizes: Vec<usize> = bases.iter().map(|b| b.degree_count()).collect();
        let unit_ranks = vec![1usize; d - 1];
        let core_seed = rng.gen();
        let cores = TensorTrain::random(core_seed, &mode_sizes, &unit_ranks)?.into_cores();

        let tup_l: Vec<usize> = (0..d).map(|k| rng.gen_range(0..mode_sizes[k])).collect();
        let tup_r: Vec<usize> = (0..d).map(|k| rng.gen_range(0..mode_sizes[k])).collect();
        let mut left_sets = vec![Vec::new(); d + 1];
        let mut right_sets = vec![Vec::new(); d + 1];
        left_sets[0] = vec![vec![]];
        right_sets[d] = vec![vec![]];
        for b in 1..d {
            left_sets[b] = vec![tup_l[..b].to_vec()];
            right_sets[b] = vec![tup_r[b..].to_vec()];
        }

        let ranks = vec![1usize; d + 1];
        let use_grad = cfg.gradient_weight > 0.0;
        Ok(Self {
            oracle,
            bases,
            cfg,
            d,
            nodes,
            psi,
            dpsi,
            cores,
            ranks,
            left_sets,
            right_sets,
            lval: vec![DMatrix::identity(1, 1); d + 1],
            ldiff: vec![Vec::new(); d + 1],
            rval: vec![DMatrix::identity(1, 1); d + 1],
            rdiff: vec![Vec::new(); d + 1],
            rng,
            regularized: 0,
            last_residual: 1.0,
            use_grad,
        })
    }

    fn structural_caps(mode_sizes: &[usize]) -> Vec<usize> {
        let d = mode_sizes.len();
        let mut caps = vec![1usize; d + 1];
        for b in 1..d {
            let left = mode_sizes[..b]
                .iter()
                .try_fold(1usize, |acc, &n| acc.checked_mul(n))
                .unwrap_or(usize::MAX);
            let right = mode_sizes[b..]
                .iter()
                .try_fold(1usize, |acc, &n| acc.checked_mul(n))
                .unwrap_or(usize::MAX);
            caps[b] = left.min(right);
        }
        caps
    }

    fn point(&self, prefix: &[usize], mode: usize, node: usize, suffix: &[usize]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.d);
        for (j, &t) in prefix.iter().enumerate() {
            x.push(self.nodes[j][t]);
        }
        x.push(self.nodes[mode][node]);
        for (j, &t) in suffix.iter().enumerate() {
            x.push(self.nodes[mode + 1 + j][t]);
        }
        x
    }

    fn psi_row(&self, mode: usize, node: usize) -> Vec<f64> {
        (0..self.psi[mode].ncols()).map(|m| self.psi[mode][(node, m)]).collect()
    }

    fn dpsi_row(&self, mode: usize, node: usize) -> Vec<f64> {
        (0..self.dpsi[mode].ncols()).map(|m| self.dpsi[mode][(node, m)]).collect()
    }

    fn rebuild_right_interfaces(&mut self) -> Result<(), CrossError> {
        self.rval[self.d] = DMatrix::identity(1, 1);
        self.rdiff[self.d] = Vec::new();
        for b in (1..self.d).rev() {
            let suffixes = &self.right_sets[b];
            let r = suffixes.len();
            let inner: HashMap<&[usize], usize> = self.right_sets[b + 1]
                .iter()
                .enumerate()
                .map(|(i, s)| (s.as_slice(), i))
                .collect();
            let core = &self.cores[b];
            let (rl, _, rr) = core.shape();
            if rr != self.right_sets[b + 1].len() {
                return Err(CrossError::Internal(format!(
                    "core {b} right dim {rr} vs right set size {}",
                    self.right_sets[b + 1].len()
                )));
            }
            let mut val = DMatrix::zeros(rl, r);
            let mut diffs = vec![DMatrix::zeros(rl, r); self.d - b];
            for (sidx, s) in suffixes.iter().enumerate() {
                let node = s[0];
                let rest = &s[1..];
                let ridx = *inner.get(rest).ok_or_else(|| {
                    CrossError::Internal(format!("suffix nesting broken at bond {b}"))
                })?;
                let m_val = core.contract_mode(&self.psi_row(b, node));
                let m_der = core.contract_mode(&self.dpsi_row(b, node));
                let inner_val = self.rval[b + 1].column(ridx).into_owned();
                val.set_column(sidx, &(&m_val * &inner_val));
                diffs[0].set_column(sidx, &(&m_der * &inner_val));
                for j in b + 1..self.d {
                    let inner_diff = self.rdiff[b + 1][j - (b + 1)].column(ridx).into_owned();
                    diffs[j - b].set_column(sidx, &(&m_val * &inner_diff));
                }
            }
            self.rval[b] = val;
            self.rdiff[b] = diffs;
        }
        Ok(())
    }

    fn rebuild_left_interfaces(&mut self) -> Result<(), CrossError> {
        self.lval[0] = DMatrix::identity(1, 1);
        self.ldiff[0] = Vec::new();
        for b in 1..self.d {
            let prefixes = &self.left_sets[b];
            let r = prefixes.len();
            let outer: HashMap<&[usize], usize> = self.left_sets[b - 1]
                .iter()
                .enumerate()
                .map(|(i, s)| (s.as_slice(), i))
                .collect();
            let core = &self.cores[b - 1];
            let (rl, _, rr) = core.shape();
            if rl != self.left_sets[b - 1].len() {
                return Err(CrossError::Internal(format!(
                    "core {} left dim {rl} vs left set size {}",
                    b - 1,
                    self.left_sets[b - 1].len()
                )));
            }
            let mut val = DMatrix::zeros(r, rr);
            let mut diffs = vec![DMatrix::zeros(r, rr); b];
            for (pidx, p) in prefixes.iter().enumerate() {
                let node = p[b - 1];
                let head = &p[..b - 1];
                let hidx = *outer.get(head).ok_or_else(|| {
                    CrossError::Internal(format!("prefix nesting broken at bond {b}"))
                })?;
                let m_val = core.contract_mode(&self.psi_row(b - 1, node));
                let m_der = core.contract_mode(&self.dpsi_row(b - 1, node));
                let head_val = self.lval[b - 1].row(hidx).into_owned();
                val.set_row(pidx, &(&head_val * &m_val));
                for j in 0..b - 1 {
                    let head_diff = self.ldiff[b - 1][j].row(hidx).into_owned();
                    diffs[j].set_row(pidx, &(&head_diff * &m_val));
                }
                diffs[b - 1].set_row(pidx, &(&head_val * &m_der));
            }
            self.lval[b] = val;
            self.ldiff[b] = diffs;
        }
        Ok(())
    }

    fn gather_data(&self, k: usize) -> (Tens3, Option<Vec<Tens3>>) {
        let rl = self.left_sets[k].len();
        let n = self.bases[k].degree_count();
        let rr = self.right_sets[k + 1].len();
        let mut values = Tens3::zeros(rl, n, rr);
        let mut grads = if self.use_grad {
            Some(vec![Tens3::zeros(rl, n, rr); self.d])
        } else {
            None
        };
        for (a, prefix) in self.left_sets[k].iter().enumerate() {
            for i in 0..n {
                for (b, suffix) in self.right_sets[k + 1].iter().enumerate() {
                    let x = self.point(prefix, k, i, suffix);
                    let (v, g) = self.oracle.eval(&x, self.use_grad);
                    let idx = values.idx(a, i, b);
                    values.data[idx] = v;
                    if let (Some(gs), Some(gv)) = (grads.as_mut(), g) {
                        for (j, gj) in gv.iter().enumerate() {
                            gs[j].data[idx] = *gj;
                        }
                    }
                }
            }
        }
        (values, grads)
    }

    fn solve_core(&mut self, k: usize) -> Result<(), CrossError> {
        let (values, grads) = self.gather_data(k);
        let sys = LocalSystem {
            lval: &self.lval[k],
            ldiff: &self.ldiff[k],
            rval: &self.rval[k + 1],
            rdiff: &self.rdiff[k + 1],
            psi: &self.psi[k],
            dpsi: &self.dpsi[k],
            values: &values,
            grads: grads.as_deref(),
            grad_weight: self.cfg.gradient_weight / self.d as f64,
        };
        let sol = solve_local_system(&sys, k)?;
        if sol.regularized {
            self.regularized += 1;
        }
        self.last_residual = sol.residual_rel;
        self.cores[k] = sol.core;
        Ok(())
    }

    /// Kick magnitude for rank enrichment: random directions scaled by
    /// the local residual so converged bonds receive negligible noise.
    fn kick_sigma(&self, core_norm: f64, elements: usize) -> f64 {
        let rel = self.last_residual.clamp(1e-12, 1.0);
        rel * core_norm.max(1e-12) / (elements as f64).sqrt()
    }

    fn pivot_left(&mut self, k: usize) -> Result<(), CrossError> {
        let bond = k + 1;
        let (rl, n, rr) = self.cores[k].shape();
        let target = self.ranks[bond].min(rl * n);
        if target > rr {
            let core_norm = self.cores[k].data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let sigma = self.kick_sigma(core_norm, rl * n);
            let mut enriched = TTCore::zeros(rl, n, target);
            for a in 0..rl {
                for i in 0..n {
                    for b in 0..rr {
                        enriched.set(a, i, b, self.cores[k].get(a, i, b));
                    }
                    for b in rr..target {
                        enriched.set(a, i, b, sigma * crate::data::standard_normal(&mut self.rng));
                    }
                }
            }
            self.cores[k] = enriched;
        }
        let (rl, n, width) = self.cores[k].shape();

        // candidate interfaces for every (prefix, node) pair
        let mut e_val = DMatrix::zeros(rl * n, width);
        let mut e_diff = vec![DMatrix::zeros(rl * n, width); k + 1];
        for i in 0..n {
            let m_val = self.cores[k].contract_mode(&self.psi_row(k, i));
            let m_der = self.cores[k].contract_mode(&self.dpsi_row(k, i));
            let block_val = &self.lval[k] * &m_val;
            let block_der = &self.lval[k] * &m_der;
            let block_diffs: Vec<DMatrix<f64>> =
                (0..k).map(|j| &self.ldiff[k][j] * &m_val).collect();
            for a in 0..rl {
                let row = a * n + i;
                e_val.set_row(row, &block_val.row(a).into_owned());
                for j in 0..k {
                    e_diff[j].set_row(row, &block_diffs[j].row(a).into_owned());
                }
                e_diff[k].set_row(row, &block_der.row(a).into_owned());
            }
        }

        let q = e_val.clone().qr().q();
        let rows = maxvol(&q, self.cfg.maxvol_delta).map_err(|e| match e {
            CrossError::RankDeficient { pivot, column } => CrossError::PivotFailure {
                mode: k,
                detail: format!("rank-deficient candidates (pivot {pivot:.3e}, column {column})"),
            },
            other => other,
        })?;

        self.left_sets[bond] = rows
            .iter()
            .map(|&row| {
                let a = row / n;
                let i = row % n;
                let mut tup = self.left_sets[k][a].clone();
                tup.push(i);
                tup
            })
            .collect();
        self.lval[bond] = DMatrix::from_fn(rows.len(), width, |r, c| e_val[(rows[r], c)]);
        self.ldiff[bond] = e_diff
            .iter()
            .map(|m| DMatrix::from_fn(rows.len(), width, |r, c| m[(rows[r], c)]))
            .collect();
        Ok(())
    }

    fn pivot_right(&mut self, k: usize) -> Result<(), CrossError> {
        let bond = k;
        let (rl, n, rr) = self.cores[k].shape();
        let target = self.ranks[bond].min(n * rr);
        if target > rl {
            let core_norm = self.cores[k].data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let sigma = self.kick_sigma(core_norm, n * rr);
            let mut enriched = TTCore::zeros(target, n, rr);
            for a in 0..rl {
                for i in 0..n {
                    for b in 0..rr {
                        enriched.set(a, i, b, self.cores[k].get(a, i, b));
                    }
                }
            }
            for a in rl..target {
                for i in 0..n {
                    for b in 0..rr {
                        enriched.set(a, i, b, sigma * crate::data::standard_normal(&mut self.rng));
                    }
                }
            }
            self.cores[k] = enriched;
        }
        let (width, n, rr) = self.cores[k].shape();

        let r_inner = self.right_sets[k + 1].len();
        debug_assert_eq!(rr, r_inner);
        let mut e_val = DMatrix::zeros(n * r_inner, width);
        let mut e_diff = vec![DMatrix::zeros(n * r_inner, width); self.d - k];
        for i in 0..n {
            let m_val = self.cores[k].contract_mode(&self.psi_row(k, i));
            let m_der = self.cores[k].contract_mode(&self.dpsi_row(k, i));
            let block_val = &m_val * &self.rval[k + 1];
            let block_der = &m_der * &self.rval[k + 1];
            let block_diffs: Vec<DMatrix<f64>> = (k + 1..self.d)
                .map(|j| &m_val * &self.rdiff[k + 1][j - (k + 1)])
                .collect();
            for sidx in 0..r_inner {
                let row = i * r_inner + sidx;
                e_val.set_row(row, &block_val.column(sidx).transpose());
                e_diff[0].set_row(row, &block_der.column(sidx).transpose());
                for j in k + 1..self.d {
                    e_diff[j - k].set_row(row, &block_diffs[j - (k + 1)].column(sidx).transpose());
                }
            }
        }

        let q = e_val.clone().qr().q();
        let rows = maxvol(&q, self.cfg.maxvol_delta).map_err(|e| match e {
            CrossError::RankDeficient { pivot, column } => CrossError::PivotFailure {
                mode: k,
                detail: format!("rank-deficient candidates (pivot {pivot:.3e}, column {column})"),
            },
            other => other,
        })?;

        self.right_sets[bond] = rows
            .iter()
            .map(|&row| {
                let i = row / r_inner;
                let sidx = row % r_inner;
                let mut tup = vec![i];
                tup.extend_from_slice(&self.right_sets[k + 1][sidx]);
                tup
            })
            .collect();
        self.rval[bond] = DMatrix::from_fn(width, rows.len(), |c, r| e_val[(rows[r], c)]);
        self.rdiff[bond] = e_diff
            .iter()
            .map(|m| DMatrix::from_fn(width, rows.len(), |c, r| m[(rows[r], c)]))
            .collect();
        Ok(())
    }

    fn sweep_left_to_right(&mut self) -> Result<(), CrossError> {
        self.rebuild_right_interfaces()?;
        self.lval[0] = DMatrix::identity(1, 1);
        self.ldiff[0] = Vec::new();
        for k in 0..self.d {
            self.solve_core(k)?;
            if k + 1 < self.d {
                self.pivot_left(k)?;
            }
        }
        self.check_nested()
    }

    fn sweep_right_to_left(&mut self) -> Result<(), CrossError> {
        self.rebuild_left_interfaces()?;
        self.rval[self.d] = DMatrix::identity(1, 1);
        self.rdiff[self.d] = Vec::new();
        for k in (0..self.d).rev() {
            self.solve_core(k)?;
            if k > 0 {
                self.pivot_right(k)?;
            }
        }
        self.check_nested()
    }

    fn check_nested(&self) -> Result<(), CrossError> {
        let sets = IndexSets { left: self.left_sets.clone(), right: self.right_sets.clone() };
        if sets.is_nested() {
            Ok(())
        } else {
            Err(CrossError::Internal("index sets lost nestedness".into()))
        }
    }

    fn bump_ranks(&mut self) -> bool {
        let mode_sizes: Vec<usize> = self.bases.iter().map(|b| b.degree_count()).collect();
        let caps = Self::structural_caps(&mode_sizes);
        let mut grew = false;
        for b in 1..self.d {
            let cap = caps[b].min(self.cfg.rank_cap);
            if self.ranks[b] < cap {
                self.ranks[b] += 1;
                grew = true;
            }
        }
        grew
    }
}

/// Fit a functional tensor train to the oracle by gradient cross
/// regression. Ranks start at one and grow by one after every
/// non-converged sweep pair, up to `rank_cap`. Hitting `max_sweeps`
/// without the stopping rule firing is reported through
/// `FitStats::converged`, not as an error.
pub fn fit_gradient_cross(
    oracle: &OracleFunction,
    bases: &[BasisSpec],
    cfg: &CrossConfig,
) -> Result<(FunctionalTT, FitStats), CrossError> {
    let start = Instant::now();
    let mut fitter = Fitter::new(oracle, bases, cfg)?;
    let mut previous: Option<TensorTrain> = None;
    let mut converged = false;
    let mut sweeps = 0;

    'outer: loop {
        for direction in 0..2 {
            if direction == 0 {
                fitter.sweep_left_to_right()?;
            } else {
                fitter.sweep_right_to_left()?;
            }
            sweeps += 1;
            let current = TensorTrain::new(fitter.cores.clone())?;
            if let Some(prev) = &previous {
                let norm = current.frobenius_norm().max(1e-300);
                let diff = current.distance(prev)? / norm;
                if diff <= cfg.tol_stop {
                    converged = true;
                    previous = Some(current);
                    break 'outer;
                }
            }
            previous = Some(current);
            if sweeps >= cfg.max_sweeps {
                break 'outer;
            }
        }
        fitter.bump_ranks();
    }

    let train = previous.expect("at least one sweep ran");
    let surrogate = FunctionalTT::new(train, bases.to_vec())?;

    // training error over every point the oracle served
    let samples = oracle.sampled_points();
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, v) in &samples {
        let pred = surrogate.eval(p)?;
        num += (pred - v).powi(2);
        den += v * v;
    }
    let err_train = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };

    let stats = FitStats {
        converged,
        sweeps,
        final_ranks: surrogate.train().ranks(),
        distinct_samples: oracle.distinct_queries(),
        cumulative_samples: oracle.cumulative_queries(),
        cpu_train_s: start.elapsed().as_secs_f64(),
        err_train_2: err_train,
        regularized_solves: fitter.regularized,
        underdetermined: false,
    };
    Ok((surrogate, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::gauss_legendre_rule;
    use approx::assert_abs_diff_eq;

    fn setup(d: usize, n: usize, a: f64, b: f64) -> (Vec<BasisSpec>, Vec<QuadratureRule>) {
        let bases: Vec<BasisSpec> = (0..d).map(|_| BasisSpec::new(n, a, b).unwrap()).collect();
        let rules: Vec<QuadratureRule> =
            (0..d).map(|_| gauss_legendre_rule(n, a, b).unwrap()).collect();
        (bases, rules)
    }

    #[test]
    fn maxvol_identity_block_dominates() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        assert_eq!(maxvol(&a, 1e-2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn maxvol_single_column_picks_max_abs() {
        let a = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert_eq!(maxvol(&a, 1e-2).unwrap(), vec![2]);
    }

    #[test]
    fn maxvol_dominance_bound_on_random_matrix() {
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(77);
        let a = DMatrix::from_fn(50, 5, |_, _| crate::data::standard_normal(&mut rng));
        let delta = 1e-2;
        let rows = maxvol(&a, delta).unwrap();
        let sub = DMatrix::from_fn(5, 5, |i, j| a[(rows[i], j)]);
        let c = &a * sub.try_inverse().unwrap();
        let max_entry = c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(max_entry <= 1.0 + delta + 1e-9, "max |A Ahat^-1| = {max_entry}");
    }

    #[test]
    fn maxvol_rejects_rank_deficient_and_wide() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(maxvol(&a, 1e-2), Err(CrossError::RankDeficient { .. })));
        let wide = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(matches!(maxvol(&wide, 1e-2), Err(CrossError::NotTall { .. })));
    }

    #[test]
    fn local_solver_matches_dense_normal_equations() {
        // random well-conditioned interfaces, lambda > 0, checked against
        // an explicitly assembled weighted least-squares system
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(5);
        let (rl, n, rr) = (3usize, 4usize, 2usize);
        let n_left_modes = 2;
        let n_right_modes = 1;
        let mut rand_mat = |r: usize, c: usize, s: f64| {
            DMatrix::from_fn(r, c, |_, _| s * crate::data::standard_normal(&mut rng))
                + DMatrix::identity(r, c) * 2.0 * s
        };
        let lval = rand_mat(rl, rl, 1.0);
        let ldiff: Vec<DMatrix<f64>> = (0..n_left_modes).map(|_| rand_mat(rl, rl, 0.3)).collect();
        let rval = rand_mat(rr, rr, 1.0);
        let rdiff: Vec<DMatrix<f64>> = (0..n_right_modes).map(|_| rand_mat(rr, rr, 0.3)).collect();
        let psi = rand_mat(n, n, 1.0);
        let dpsi = rand_mat(n, n, 0.5);
        let mut rng2 = <ChaCha8Rng as SeedableRng>::seed_from_u64(6);
        let mut values = Tens3::zeros(rl, n, rr);
        for v in values.data.iter_mut() {
            *v = crate::data::standard_normal(&mut rng2);
        }
        let d_total = n_left_modes + 1 + n_right_modes;
        let mut grads = Vec::new();
        for _ in 0..d_total {
            let mut g = Tens3::zeros(rl, n, rr);
            for v in g.data.iter_mut() {
                *v = crate::data::standard_normal(&mut rng2);
            }
            grads.push(g);
        }
        let w = 0.7 / d_total as f64;
        let sys = LocalSystem {
            lval: &lval,
            ldiff: &ldiff,
            rval: &rval,
            rdiff: &rdiff,
            psi: &psi,
            dpsi: &dpsi,
            values: &values,
            grads: Some(&grads),
            grad_weight: w,
        };
        let sol = solve_local_system(&sys, 0).unwrap();

        // dense oracle over all samples and rows
        let unknowns = rl * n * rr;
        let flat = |a: usize, m: usize, b: usize| (a * n + m) * rr + b;
        let mut ata = DMatrix::<f64>::zeros(unknowns, unknowns);
        let mut atb = nalgebra::DVector::<f64>::zeros(unknowns);
        for a in 0..rl {
            for i in 0..n {
                for b in 0..rr {
                    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
                    let mut val_row = vec![0.0; unknowns];
                    for al in 0..rl {
                        for m in 0..n {
                            for be in 0..rr {
                                val_row[flat(al, m, be)] =
                                    lval[(a, al)] * psi[(i, m)] * rval[(be, b)];
                            }
                        }
                    }
                    rows.push((1.0, val_row));
                    for j in 0..d_total {
                        let mut row = vec![0.0; unknowns];
                        for al in 0..rl {
                            for m in 0..n {
                                for be in 0..rr {
                                    let entry = if j < n_left_modes {
                                        ldiff[j][(a, al)] * psi[(i, m)] * rval[(be, b)]
                                    } else if j == n_left_modes {
                                        lval[(a, al)] * dpsi[(i, m)] * rval[(be, b)]
                                    } else {
                                        lval[(a, al)]
                                            * psi[(i, m)]
                                            * rdiff[j - n_left_modes - 1][(be, b)]
                                    };
                                    row[flat(al, m, be)] = entry;
                                }
                            }
                        }
                        rows.push((w, row));
                    }
                    let targets: Vec<f64> = std::iter::once(values.data[values.idx(a, i, b)])
                        .chain((0..d_total).map(|j| grads[j].data[grads[j].idx(a, i, b)]))
                        .collect();
                    for ((wgt, row), y) in rows.iter().zip(&targets) {
                        for u in 0..unknowns {
                            atb[u] += wgt * row[u] * y;
                            for u2 in 0..unknowns {
                                ata[(u, u2)] += wgt * row[u] * row[u2];
                            }
                        }
                    }
                }
            }
        }
        let expected = ata.lu().solve(&atb).unwrap();
        for u in 0..unknowns {
            assert_abs_diff_eq!(sol.core.data()[u], expected[u], epsilon = 1e-8);
        }
    }

    #[test]
    fn constant_target_converges_immediately_at_rank_one() {
        let (bases, rules) = setup(4, 3, -1.0, 1.0);
        let oracle = OracleFunction::with_gradient(|_| 2.5, |x| vec![0.0; x.len()]);
        let mut cfg = CrossConfig::new(rules);
        cfg.tol_stop = 1e-8;
        let (fit, stats) = fit_gradient_cross(&oracle, &bases, &cfg).unwrap();
        assert!(stats.converged);
        assert!(stats.sweeps <= 2, "sweeps = {}", stats.sweeps);
        assert_eq!(stats.final_ranks, vec![1, 1, 1]);
        assert_abs_diff_eq!(fit.eval(&[0.3, -0.4, 0.9, 0.0]).unwrap(), 2.5, epsilon = 1e-10);
        assert!(stats.err_train_2 <= 1e-12);
    }

    #[test]
    fn zero_lambda_interpolates_on_the_cross() {
        let (bases, rules) = setup(3, 4, -1.0, 1.0);
        let oracle = OracleFunction::new(|x: &[f64]| (x[0] + 0.5 * x[1] * x[2]).exp());
        let mut cfg = CrossConfig::new(rules);
        cfg.gradient_weight = 0.0;
        cfg.rank_cap = 4;
        cfg.max_sweeps = 12;
        cfg.tol_stop = 1e-9;
        let (fit, stats) = fit_gradient_cross(&oracle, &bases, &cfg).unwrap();
        // square local systems make the last solved core interpolate the
        // cross exactly; after stagnation that extends to the cache
        let mut worst: f64 = 0.0;
        for (p, v) in oracle.sampled_points() {
            let e = (fit.eval(&p).unwrap() - v).abs() / v.abs().max(1.0);
            worst = worst.max(e);
        }
        assert!(
            stats.err_train_2 < 1e-6,
            "train err {} (worst point {worst})",
            stats.err_train_2
        );
    }

    #[test]
    fn recovers_a_random_rank_two_ftt() {
        let (bases, rules) = setup(3, 4, -1.0, 1.0);
        let raw = TensorTrain::random(99, &[4, 4, 4], &[2, 2]).unwrap();
        let scale = 1.0 / raw.frobenius_norm();
        let zero_cores: Vec<TTCore> = raw
            .cores()
            .iter()
            .map(|c| {
                let (a, b, c_) = c.shape();
                TTCore::zeros(a, b, c_)
            })
            .collect();
        let zero = TensorTrain::new(zero_cores).unwrap();
        let target_tt = raw.linear_combination(scale, &zero, 0.0).unwrap();
        let target = FunctionalTT::new(target_tt, bases.clone()).unwrap();
        let t1 = target.clone();
        let t2 = target.clone();
        let oracle = OracleFunction::with_gradient(
            move |x| t1.eval(x).unwrap(),
            move |x| t2.grad(x).unwrap(),
        );
        let mut cfg = CrossConfig::new(rules);
        cfg.tol_stop = 1e-9;
        cfg.rank_cap = 2;
        cfg.max_sweeps = 20;
        cfg.seed = 3;
        let (fit, stats) = fit_gradient_cross(&oracle, &bases, &cfg).unwrap();
        assert!(stats.converged, "stats: {stats:?}");
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(11);
        let mut num = 0.0;
        let mut den = 0.0;
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = target.eval(&x).unwrap();
            num += (fit.eval(&x).unwrap() - t).powi(2);
            den += t * t;
        }
        let err = (num / den).sqrt();
        assert!(err <= 1e-8, "recovery error {err}");
    }

    #[test]
    fn sample_accounting_stays_within_the_grid() {
        let (bases, rules) = setup(3, 3, -1.0, 1.0);
        let oracle = OracleFunction::with_gradient(
            |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>(),
            |x: &[f64]| x.iter().map(|v| 2.0 * v).collect(),
        );
        let mut cfg = CrossConfig::new(rules);
        cfg.rank_cap = 3;
        cfg.max_sweeps = 10;
        let (_, stats) = fit_gradient_cross(&oracle, &bases, &cfg).unwrap();
        // distinct points cannot exceed the number of collocation tuples
        assert!(stats.distinct_samples <= 27);
        assert!(stats.cumulative_samples >= stats.distinct_samples);
        assert!(stats.err_train_2 < 1e-8, "err {}", stats.err_train_2);
    }

    #[test]
    fn gradient_weight_without_oracle_gradient_is_rejected() {
        let (bases, rules) = setup(2, 3, -1.0, 1.0);
        let oracle = OracleFunction::new(|_| 1.0);
        let cfg = CrossConfig::new(rules);
        assert!(matches!(
            fit_gradient_cross(&oracle, &bases, &cfg),
            Err(CrossError::MissingGradient(_))
        ));
    }

    #[test]
    fn nestedness_detector_distinguishes_good_from_bad_sets() {
        let good = IndexSets {
            left: vec![
                vec![vec![]],
                vec![vec![0], vec![1]],
                vec![vec![0, 1], vec![1, 0]],
                vec![],
            ],
            right: vec![
                vec![],
                vec![vec![2, 0], vec![1, 1]],
                vec![vec![0], vec![1]],
                vec![vec![]],
            ],
        };
        assert!(good.is_nested());
        let bad = IndexSets {
            left: vec![vec![vec![]], vec![vec![0]], vec![vec![1, 1]], vec![]],
            right: vec![vec![], vec![vec![0, 0]], vec![vec![0]], vec![vec![]]],
        };
        assert!(!bad.is_nested());
    }
}
