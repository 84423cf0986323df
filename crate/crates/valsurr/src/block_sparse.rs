//! Block-sparse tensor trains: total-degree and locality constraints.
//!
//! A polynomial with total degree at most `g` admits TT cores whose
//! slices are block-shifted: slice `m` (basis degree `m`) connects a
//! row block of accumulated degree `l` only to the column block of
//! degree `l + m`. This module materializes that structure as a finite
//! automaton over "degree states", optionally refined by a variable
//! locality bound `K_loc` that kills monomials whose active variables
//! span more than `K_loc` positions. Block sizes are the path counts
//! through the automaton from either side, which is exactly the rank
//! bound the degree and locality constraints imply.
//!
//! Fitting is alternating least squares on scattered data where every
//! micro-step solves only for the entries inside allowed blocks; the
//! structural zeros are never touched, so degree and locality bounds
//! hold exactly for the fitted surrogate, not just approximately.

use crate::basis::BasisSpec;
use crate::cross::FitStats;
use crate::data::Dataset;
use crate::tt::{FunctionalTT, TTCore, TTError, TensorTrain};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlockSparseError {
    #[error("max_degree {max_degree} must be smaller than the basis degree count {degree_count}")]
    DegreeTooLarge { max_degree: usize, degree_count: usize },
    #[error("locality bound must be >= 1")]
    ZeroLocality,
    #[error("dataset is empty or dimension mismatch: {0}")]
    BadData(String),
    #[error("micro-step solve failed at core {core}")]
    SolveFailed { core: usize },
    #[error(transparent)]
    Tt(#[from] TTError),
}

/// Degree/locality constraints of the ansatz.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegreeProfile {
    /// total-degree bound g
    pub max_degree: usize,
    /// maximal span (max active position - min active position) of any
    /// monomial; `None` disables the locality constraint
    pub locality: Option<usize>,
    /// restrict to exactly homogeneous degree g instead of <= g
    pub homogeneous: bool,
}

impl DegreeProfile {
    pub fn new(max_degree: usize) -> Self {
        Self { max_degree, locality: None, homogeneous: false }
    }

    pub fn with_locality(mut self, k_loc: usize) -> Self {
        self.locality = Some(k_loc);
        self
    }
}

/// Degree automaton state carried across a bond.
///
/// `Open` states can still accept active variables; the `age` counts
/// bonds since the first active variable, so the locality window can be
/// enforced by expiring open states into `Closed` ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DegreeState {
    Zero,
    Open { deg: usize, age: usize },
    Closed { deg: usize },
}

impl DegreeState {
    fn degree(&self) -> usize {
        match self {
            DegreeState::Zero => 0,
            DegreeState::Open { deg, .. } | DegreeState::Closed { deg } => *deg,
        }
    }
}

/// Allowed (slice, row block, column block) triples of one core.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreBlocks {
    /// (basis degree m, row block index, column block index)
    pub transitions: Vec<(usize, usize, usize)>,
}

/// Full block structure: per-bond labeled block sizes and per-core
/// allowed transitions. Everything outside the listed blocks is a
/// structural zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPattern {
    pub dimension: usize,
    pub mode_sizes: Vec<usize>,
    /// per bond: ordered (state, block size)
    pub bonds: Vec<Vec<(DegreeState, usize)>>,
    pub cores: Vec<CoreBlocks>,
}

impl BlockPattern {
    pub fn bond_dims(&self) -> Vec<usize> {
        self.bonds.iter().map(|b| b.iter().map(|(_, s)| s).sum()).collect()
    }

    /// Offset of each block inside its bond.
    fn offsets(&self, bond: usize) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.bonds[bond].len());
        let mut acc = 0;
        for (_, s) in &self.bonds[bond] {
            off.push(acc);
            acc += s;
        }
        off
    }

    /// Free entries of core `k` as flat (alpha, m, beta) triples.
    pub fn free_entries(&self, k: usize) -> Vec<(usize, usize, usize)> {
        let row_off = self.offsets(k);
        let col_off = self.offsets(k + 1);
        let mut entries = Vec::new();
        for &(m, rb, cb) in &self.cores[k].transitions {
            let (r0, rs) = (row_off[rb], self.bonds[k][rb].1);
            let (c0, cs) = (col_off[cb], self.bonds[k + 1][cb].1);
            for a in r0..r0 + rs {
                for b in c0..c0 + cs {
                    entries.push((a, m, b));
                }
            }
        }
        entries
    }

    /// Total free parameters across all cores.
    pub fn free_parameter_count(&self) -> usize {
        (0..self.dimension).map(|k| self.free_entries(k).len()).sum()
    }

    /// Number of monomials representable through the pattern: paths from
    /// the start state to acceptance. This counts admissible
    /// multi-indices, independent of the block sizes.
    pub fn admissible_monomial_count(&self) -> u128 {
        let mut counts: Vec<u128> = vec![0; self.bonds[0].len()];
        counts[0] = 1;
        for k in 0..self.dimension {
            let mut next = vec![0u128; self.bonds[k + 1].len()];
            for &(_, rb, cb) in &self.cores[k].transitions {
                next[cb] = next[cb].saturating_add(counts[rb]);
            }
            counts = next;
        }
        counts.iter().sum()
    }
}

fn transition(
    state: DegreeState,
    m: usize,
    profile: &DegreeProfile,
) -> Option<DegreeState> {
    let g = profile.max_degree;
    let k_loc = profile.locality;
    match state {
        DegreeState::Zero => {
            if m == 0 {
                Some(DegreeState::Zero)
            } else if m <= g {
                if m == g {
                    Some(DegreeState::Closed { deg: g })
                } else {
                    Some(DegreeState::Open { deg: m, age: 0 })
                }
            } else {
                None
            }
        }
        DegreeState::Open { deg, age } => {
            if m == 0 {
                match k_loc {
                    // open state expires once no future active variable
                    // could respect the span window any more
                    Some(k) if age + 1 > k.saturating_sub(1) => Some(DegreeState::Closed { deg }),
                    Some(_) => Some(DegreeState::Open { deg, age: age + 1 }),
                    None => Some(DegreeState::Open { deg, age: 0 }),
                }
            } else if deg + m <= g {
                // the new active variable sits age+1 positions after the first
                if let Some(k) = k_loc {
                    if age + 1 > k {
                        return None;
                    }
                }
                let new_deg = deg + m;
                if new_deg == g {
                    Some(DegreeState::Closed { deg: g })
                } else {
                    match k_loc {
                        Some(k) if age + 1 > k.saturating_sub(1) => {
                            Some(DegreeState::Closed { deg: new_deg })
                        }
                        Some(_) => Some(DegreeState::Open { deg: new_deg, age: age + 1 }),
                        None => Some(DegreeState::Open { deg: new_deg, age: 0 }),
                    }
                }
            } else {
                None
            }
        }
        DegreeState::Closed { deg } => {
            if m == 0 {
                Some(DegreeState::Closed { deg })
            } else {
                None
            }
        }
    }
}

fn accepted(state: DegreeState, profile: &DegreeProfile) -> bool {
    if profile.homogeneous {
        state.degree() == profile.max_degree
    } else {
        true
    }
}

/// Compute the block pattern for `d` modes with the given bases.
///
/// Bond block sizes are `min(left paths, right paths)` through the
/// degree automaton. The final bond is collapsed to a single size-1
/// block; for non-homogeneous profiles that collapse plays the role of
/// the extra index in the last core that sums all admissible degrees.
pub fn block_structure(
    d: usize,
    bases: &[BasisSpec],
    profile: &DegreeProfile,
) -> Result<BlockPattern, BlockSparseError> {
    assert_eq!(bases.len(), d, "one basis per mode");
    for b in bases {
        if profile.max_degree >= b.degree_count() {
            return Err(BlockSparseError::DegreeTooLarge {
                max_degree: profile.max_degree,
                degree_count: b.degree_count(),
            });
        }
    }
    if profile.locality == Some(0) {
        return Err(BlockSparseError::ZeroLocality);
    }
    let mode_sizes: Vec<usize> = bases.iter().map(|b| b.degree_count()).collect();

    // forward path counts per state
    let mut left: Vec<HashMap<DegreeState, u128>> = vec![HashMap::new(); d + 1];
    left[0].insert(DegreeState::Zero, 1);
    for k in 0..d {
        let mut next: HashMap<DegreeState, u128> = HashMap::new();
        for (&s, &c) in &left[k] {
            for m in 0..mode_sizes[k].min(profile.max_degree + 1) {
                if let Some(t) = transition(s, m, profile) {
                    *next.entry(t).or_insert(0) = next.get(&t).copied().unwrap_or(0).saturating_add(c);
                }
            }
        }
        left[k + 1] = next;
    }

    // backward path counts to acceptance
    let mut right: Vec<HashMap<DegreeState, u128>> = vec![HashMap::new(); d + 1];
    for (&s, _) in &left[d] {
        if accepted(s, profile) {
            right[d].insert(s, 1);
        }
    }
    for k in (0..d).rev() {
        let mut cur: HashMap<DegreeState, u128> = HashMap::new();
        for (&s, _) in &left[k] {
            let mut total: u128 = 0;
            for m in 0..mode_sizes[k].min(profile.max_degree + 1) {
                if let Some(t) = transition(s, m, profile) {
                    if let Some(&c) = right[k + 1].get(&t) {
                        total = total.saturating_add(c);
                    }
                }
            }
            if total > 0 {
                cur.insert(s, total);
            }
        }
        right[k] = cur;
    }

    // bonds: states alive from both sides, canonical order; block size is
    // the smaller path count (saturated into usize)
    let mut bonds: Vec<Vec<(DegreeState, usize)>> = Vec::with_capacity(d + 1);
    for k in 0..=d {
        let mut states: Vec<(DegreeState, usize)> = left[k]
            .iter()
            .filter_map(|(&s, &lc)| {
                right[k].get(&s).map(|&rc| {
                    let size = lc.min(rc).min(usize::MAX as u128) as usize;
                    (s, size)
                })
            })
            .filter(|&(_, size)| size > 0)
            .collect();
        states.sort_by_key(|&(s, _)| s);
        bonds.push(states);
    }
    // collapse the terminal bond to a single channel
    bonds[d] = vec![(DegreeState::Closed { deg: profile.max_degree }, 1)];

    let mut cores = Vec::with_capacity(d);
    for k in 0..d {
        let row_lookup: HashMap<DegreeState, usize> =
            bonds[k].iter().enumerate().map(|(i, &(s, _))| (s, i)).collect();
        let col_lookup: HashMap<DegreeState, usize> =
            bonds[k + 1].iter().enumerate().map(|(i, &(s, _))| (s, i)).collect();
        let mut transitions = Vec::new();
        for (&s, _) in left[k].iter().filter(|(s, _)| right[k].contains_key(s)) {
            let rb = row_lookup[&s];
            for m in 0..mode_sizes[k].min(profile.max_degree + 1) {
                if let Some(t) = transition(s, m, profile) {
                    if k + 1 == d {
                        if accepted(t, profile) {
                            transitions.push((m, rb, 0));
                        }
                    } else if let Some(&cb) = col_lookup.get(&t) {
                        transitions.push((m, rb, cb));
                    }
                }
            }
        }
        transitions.sort_unstable();
        transitions.dedup();
        cores.push(CoreBlocks { transitions });
    }

    Ok(BlockPattern { dimension: d, mode_sizes, bonds, cores })
}

/// Alternating least squares restricted to the block pattern.
///
/// Each micro-step solves the global empirical least-squares problem
/// exactly in the free entries of one core (dense QR), so the training
/// residual never increases. Underdetermined micro-problems fall back
/// to a Tikhonov-shifted normal-equation solve and are counted in
/// `FitStats::regularized_solves`.
pub fn bs_als_fit(
    data: &Dataset,
    bases: &[BasisSpec],
    profile: &DegreeProfile,
    stop_tol: f64,
    max_iters: usize,
    seed: u64,
) -> Result<(FunctionalTT, FitStats), BlockSparseError> {
    let start = Instant::now();
    let d = bases.len();
    if data.is_empty() {
        return Err(BlockSparseError::BadData("no samples".into()));
    }
    if data.dimension() != d {
        return Err(BlockSparseError::BadData(format!(
            "points of dimension {} with {} bases",
            data.dimension(),
            d
        )));
    }
    let pattern = block_structure(d, bases, profile)?;
    let bond_dims = pattern.bond_dims();
    let n_samples = data.len();
    let largest_core = (0..d).map(|k| pattern.free_entries(k).len()).max().unwrap_or(0);
    let underdetermined = n_samples < largest_core;

    // seeded init on the free entries only
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cores: Vec<TTCore> = (0..d)
        .map(|k| TTCore::zeros(bond_dims[k], pattern.mode_sizes[k], bond_dims[k + 1]))
        .collect();
    for k in 0..d {
        let fan_in = (bond_dims[k] * pattern.mode_sizes[k]) as f64;
        let scale = 1.0 / fan_in.sqrt();
        for (a, m, b) in pattern.free_entries(k) {
            cores[k].set(a, m, b, scale * crate::data::standard_normal(&mut rng));
        }
    }

    // basis evaluations for all samples
    let psi: Vec<Vec<Vec<f64>>> = data
        .points
        .iter()
        .map(|p| {
            (0..d)
                .map(|k| bases[k].eval(p[k]).expect("sample inside the basis domain"))
                .collect()
        })
        .collect();

    let y = DVector::from_vec(data.values.clone());
    let y_norm = y.norm().max(1e-300);

    // per-sample interface vectors
    let contract = |core: &TTCore, coeffs: &[f64], vec_in: &[f64], from_left: bool| -> Vec<f64> {
        let (rl, n, rr) = core.shape();
        if from_left {
            let mut out = vec![0.0; rr];
            for a in 0..rl {
                let va = vec_in[a];
                if va == 0.0 {
                    continue;
                }
                for i in 0..n {
                    let c = coeffs[i];
                    if c == 0.0 {
                        continue;
                    }
                    for (b, o) in out.iter_mut().enumerate() {
                        *o += va * c * core.get(a, i, b);
                    }
                }
            }
            out
        } else {
            let mut out = vec![0.0; rl];
            for (a, o) in out.iter_mut().enumerate() {
                for i in 0..n {
                    let c = coeffs[i];
                    if c == 0.0 {
                        continue;
                    }
                    for (b, vb) in vec_in.iter().enumerate() {
                        *o += c * vb * core.get(a, i, b);
                    }
                }
            }
            out
        }
    };

    let mut residual_prev = f64::INFINITY;
    let mut regularized = 0usize;
    let mut iterations = 0usize;
    let mut converged = false;

    'iters: while iterations < max_iters {
        iterations += 1;
        for direction in 0..2 {
            // rebuild the fixed-side interfaces for this half sweep
            let mut lvecs: Vec<Vec<f64>> = vec![vec![1.0]; n_samples];
            let mut rvecs: Vec<Vec<f64>> = vec![vec![1.0]; n_samples];
            let order: Vec<usize> = if direction == 0 {
                (0..d).collect()
            } else {
                (0..d).rev().collect()
            };
            if direction == 0 {
                // right interfaces for every suffix position
                let mut rights: Vec<Vec<Vec<f64>>> = vec![Vec::new(); d + 1];
                rights[d] = vec![vec![1.0]; n_samples];
                for k in (1..d).rev() {
                    rights[k] = (0..n_samples)
                        .map(|s| contract(&cores[k], &psi[s][k], &rights[k + 1][s], false))
                        .collect();
                }
                for &k in &order {
                    let rv: Vec<Vec<f64>> = if k + 1 <= d {
                        std::mem::take(&mut rights[k + 1])
                    } else {
                        Vec::new()
                    };
                    solve_micro_step(
                        &pattern, &mut cores, k, &psi, &lvecs, &rv, &y, &mut regularized,
                    )?;
                    for s in 0..n_samples {
                        lvecs[s] = contract(&cores[k], &psi[s][k], &lvecs[s], true);
                    }
                }
            } else {
                let mut lefts: Vec<Vec<Vec<f64>>> = vec![Vec::new(); d + 1];
                lefts[0] = vec![vec![1.0]; n_samples];
                for k in 0..d - 1 {
                    lefts[k + 1] = (0..n_samples)
                        .map(|s| contract(&cores[k], &psi[s][k], &lefts[k][s], true))
                        .collect();
                }
                for &k in &order {
                    let lv = std::mem::take(&mut lefts[k]);
                    solve_micro_step(
                        &pattern, &mut cores, k, &psi, &lv, &rvecs, &y, &mut regularized,
                    )?;
                    for s in 0..n_samples {
                        rvecs[s] = contract(&cores[k], &psi[s][k], &rvecs[s], false);
                    }
                }
            }
        }

        // training residual after the sweep pair
        let surrogate = FunctionalTT::new(
            TensorTrain::new(cores.clone())?,
            bases.to_vec(),
        )?;
        let mut res_sq = 0.0;
        for (p, &v) in data.points.iter().zip(data.values.iter()) {
            res_sq += (surrogate.eval(p)? - v).powi(2);
        }
        let residual = res_sq.sqrt();
        let improvement = (residual_prev - residual) / residual_prev.max(1e-300);
        if residual <= 1e-14 * y_norm || (residual_prev.is_finite() && improvement.abs() < stop_tol)
        {
            residual_prev = residual;
            converged = true;
            break 'iters;
        }
        residual_prev = residual;
    }

    let train = TensorTrain::new(cores)?;
    let surrogate = FunctionalTT::new(train, bases.to_vec())?;
    let err_train = residual_prev / y_norm;

    let stats = FitStats {
        converged,
        sweeps: iterations,
        final_ranks: surrogate.train().ranks(),
        distinct_samples: n_samples,
        cumulative_samples: n_samples,
        cpu_train_s: start.elapsed().as_secs_f64(),
        err_train_2: err_train,
        regularized_solves: regularized,
        underdetermined,
    };
    Ok((surrogate, stats))
}

#[allow(clippy::too_many_arguments)]
fn solve_micro_step(
    pattern: &BlockPattern,
    cores: &mut [TTCore],
    k: usize,
    psi: &[Vec<Vec<f64>>],
    lvecs: &[Vec<f64>],
    rvecs: &[Vec<f64>],
    y: &DVector<f64>,
    regularized: &mut usize,
) -> Result<(), BlockSparseError> {
    let entries = pattern.free_entries(k);
    let p = entries.len();
    let n_samples = lvecs.len();
    if p == 0 {
        return Ok(());
    }
    let mut design = DMatrix::<f64>::zeros(n_samples, p);
    for s in 0..n_samples {
        let ps = &psi[s][k];
        for (col, &(a, m, b)) in entries.iter().enumerate() {
            design[(s, col)] = lvecs[s][a] * ps[m] * rvecs[s][b];
        }
    }
    let solution = if n_samples >= p {
        let qr = design.clone().qr();
        let qty = qr.q().transpose() * y;
        match qr.r().solve_upper_triangular(&qty) {
            Some(c) => c,
            None => {
                *regularized += 1;
                solve_normal_regularized(&design, y)
                    .ok_or(BlockSparseError::SolveFailed { core: k })?
            }
        }
    } else {
        *regularized += 1;
        solve_normal_regularized(&design, y).ok_or(BlockSparseError::SolveFailed { core: k })?
    };
    for (col, &(a, m, b)) in entries.iter().enumerate() {
        cores[k].set(a, m, b, solution[col]);
    }
    Ok(())
}

fn solve_normal_regularized(design: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    let p = design.ncols();
    let mut normal = design.transpose() * design;
    let shift = 1e-10 * normal.trace().max(1e-30) / p as f64;
    for i in 0..p {
        normal[(i, i)] += shift;
    }
    let rhs = design.transpose() * y;
    Cholesky::new(normal).map(|ch| ch.solve(&rhs))
}
