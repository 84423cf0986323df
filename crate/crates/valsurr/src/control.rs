//! Riccati solvers, state-dependent feedback laws, and closed-loop
//! integration.
//!
//! The continuous algebraic Riccati equation
//! `A^T P + P A - P B R^{-1} B^T P + Q = 0` is solved from the stable
//! invariant subspace of the Hamiltonian `[[A, -S], [-Q, -A^T]]`,
//! extracted with the matrix sign iteration, then polished by
//! Newton-Kleinman steps (each a Lyapunov solve via the real Schur
//! form) until the residual meets the requested tolerance. The polish
//! accepts a warm start, which makes per-step SDRE re-solves along a
//! trajectory cheap.
//!
//! Feedback variants: SDRE `u = -R^{-1} B(y)^T P(y) y`, the surrogate
//! law `u = -1/2 R^{-1} B(y)^T grad V(y)`, and the Two-Boxes hybrid that
//! switches to the origin LQR law inside `||y|| <= a_TB`. Closed loops
//! are integrated with RK4 under sample-and-hold control and costs are
//! accumulated with the trapezoidal rule.

use crate::surrogate::{Surrogate, SurrogateError};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
    #[error("R is not symmetric positive definite")]
    RNotPositiveDefinite,
    #[error("sign iteration failed to converge (Hamiltonian may be singular)")]
    SignIterationFailed,
    #[error("stable-subspace extraction failed; the pair may not be stabilizable")]
    SubspaceExtractionFailed,
    #[error("Riccati residual {residual:.3e} above tolerance {tolerance:.3e} after {iters} Newton steps")]
    NotConverged { residual: f64, tolerance: f64, iters: usize },
    #[error("Lyapunov solve failed; closed-loop matrix not stable")]
    LyapunovFailed,
    #[error("Riccati solve failed at state {state:?}: {source}")]
    AtState {
        state: Vec<f64>,
        #[source]
        source: Box<ControlError>,
    },
    #[error("trajectory unstable at t = {time}: state norm {norm:.3e} exceeded the blow-up guard")]
    Instability { time: f64, norm: f64 },
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("invalid integration parameters: {0}")]
    BadIntegration(String),
}

/// Solution of a continuous algebraic Riccati equation.
#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    pub residual_norm: f64,
}

fn care_residual(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    a.transpose() * p + p * a - p * s * p + q
}

/// Solve `A^T X + X A = C` through the real Schur form of `A`
/// (Bartels-Stewart). Returns `None` when the spectrum of `A` makes the
/// equation singular.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let schur = a.clone().try_schur(1e-12, 10_000)?;
    let (u, t) = schur.unpack();
    let c_tilde = u.transpose() * c * &u;

    // block partition of the quasi-triangular factor
    let mut blocks: Vec<(usize, usize)> = Vec::new(); // (start, size)
    let mut i = 0;
    let eps = 1e-12;
    while i < n {
        if i + 1 < n && t[(i + 1, i)].abs() > eps * (t[(i, i)].abs() + t[(i + 1, i + 1)].abs() + 1.0) {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }

    let mut y = DMatrix::<f64>::zeros(n, n);
    for (jb, &(j0, js)) in blocks.iter().enumerate() {
        for (ib, &(i0, is)) in blocks.iter().enumerate() {
            // rhs = C~_{I,J} - sum_{K<I} T_{K,I}^T Y_{K,J} - sum_{K<J} Y_{I,K} T_{K,J}
            let mut rhs = DMatrix::<f64>::zeros(is, js);
            for r in 0..is {
                for cc in 0..js {
                    rhs[(r, cc)] = c_tilde[(i0 + r, j0 + cc)];
                }
            }
            for &(k0, ks) in blocks.iter().take(ib) {
                for r in 0..is {
                    for cc in 0..js {
                        let mut acc = 0.0;
                        for k in 0..ks {
                            acc += t[(k0 + k, i0 + r)] * y[(k0 + k, j0 + cc)];
                        }
                        rhs[(r, cc)] -= acc;
                    }
                }
            }
            for &(k0, ks) in blocks.iter().take(jb) {
                for r in 0..is {
                    for cc in 0..js {
                        let mut acc = 0.0;
                        for k in 0..ks {
                            acc += y[(i0 + r, k0 + k)] * t[(k0 + k, j0 + cc)];
                        }
                        rhs[(r, cc)] -= acc;
                    }
                }
            }
            // small Sylvester: T_II^T Z + Z T_JJ = rhs
            let dim = is * js;
            let mut sys = DMatrix::<f64>::zeros(dim, dim);
            // column-major vec: index (r, c) -> c*is + r
            for r in 0..is {
                for cc in 0..js {
                    let row = cc * is + r;
                    for r2 in 0..is {
                        sys[(row, cc * is + r2)] += t[(i0 + r2, i0 + r)];
                    }
                    for c2 in 0..js {
                        sys[(row, c2 * is + r)] += t[(j0 + cc, j0 + c2)];
                    }
                }
            }
            let rhs_vec = DVector::from_fn(dim, |idx, _| rhs[(idx % is, idx / is)]);
            let sol = sys.lu().solve(&rhs_vec)?;
            for r in 0..is {
                for cc in 0..js {
                    y[(i0 + r, j0 + cc)] = sol[cc * is + r];
                }
            }
        }
    }
    Some(&u * y * u.transpose())
}

fn validate_care_shapes(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(usize, usize), ControlError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(ControlError::Shape("A must be square".into()));
    }
    if b.nrows() != n {
        return Err(ControlError::Shape(format!("B must have {n} rows")));
    }
    let m = b.ncols();
    if q.nrows() != n || q.ncols() != n {
        return Err(ControlError::Shape(format!("Q must be {n}x{n}")));
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(ControlError::Shape(format!("R must be {m}x{m}")));
    }
    Ok((n, m))
}

/// Stable-subspace initial guess via the matrix sign function of the
/// Hamiltonian, determinant-scaled for fast convergence.
fn sign_function_guess(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ControlError> {
    let n = a.nrows();
    let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] = a[(i, j)];
            h[(i, n + j)] = -s[(i, j)];
            h[(n + i, j)] = -q[(i, j)];
            h[(n + i, n + j)] = -a[(j, i)];
        }
    }
    let mut z = h;
    let mut converged = false;
    for _ in 0..100 {
        let lu = z.clone().lu();
        let det: f64 = lu.determinant();
        let mu = if det.abs() > 1e-300 && det.is_finite() {
            det.abs().powf(-1.0 / (2.0 * n as f64))
        } else {
            1.0
        };
        let z_scaled = &z * mu;
        let inv = z_scaled
            .clone()
            .try_inverse()
            .ok_or(ControlError::SignIterationFailed)?;
        let next = (&z_scaled + inv) * 0.5;
        let diff = (&next - &z).norm();
        let scale = next.norm().max(1.0);
        z = next;
        if diff <= 1e-13 * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(ControlError::SignIterationFailed);
    }
    // with W = sign(H): stack [W12; W22 + I] P = [-(W11 + I); -W21]
    let mut lhs = DMatrix::<f64>::zeros(2 * n, n);
    let mut rhs = DMatrix::<f64>::zeros(2 * n, n);
    for i in 0..n {
        for j in 0..n {
            lhs[(i, j)] = z[(i, n + j)];
            lhs[(n + i, j)] = z[(n + i, n + j)] + if i == j { 1.0 } else { 0.0 };
            rhs[(i, j)] = -(z[(i, j)] + if i == j { 1.0 } else { 0.0 });
            rhs[(n + i, j)] = -z[(n + i, j)];
        }
    }
    let normal = lhs.transpose() * &lhs;
    let nrhs = lhs.transpose() * rhs;
    let p = normal
        .lu()
        .solve(&nrhs)
        .ok_or(ControlError::SubspaceExtractionFailed)?;
    Ok((&p + p.transpose()) * 0.5)
}

/// Newton-Kleinman refinement from a stabilizing guess.
fn newton_kleinman(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    q: &DMatrix<f64>,
    start: DMatrix<f64>,
    tolerance: f64,
    max_iters: usize,
) -> Result<CareSolution, ControlError> {
    let mut p = start;
    let mut residual = care_residual(a, s, q, &p).norm();
    for iters in 0..max_iters {
        if residual <= tolerance {
            return Ok(CareSolution { p, residual_norm: residual });
        }
        let a_closed = a - s * &p;
        let rhs = -(q + &p * s * &p);
        let next = solve_lyapunov(&a_closed, &rhs).ok_or(ControlError::LyapunovFailed)?;
        let next = (&next + next.transpose()) * 0.5;
        let next_residual = care_residual(a, s, q, &next).norm();
        if !next_residual.is_finite() {
            return Err(ControlError::NotConverged { residual, tolerance, iters });
        }
        p = next;
        residual = next_residual;
    }
    if residual <= tolerance {
        Ok(CareSolution { p, residual_norm: residual })
    } else {
        Err(ControlError::NotConverged { residual, tolerance, iters: max_iters })
    }
}

/// Solve the CARE `A^T P + P A - P B R^{-1} B^T P + Q = 0` to the given
/// absolute residual tolerance.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tolerance: f64,
) -> Result<CareSolution, ControlError> {
    solve_care_warm(a, b, q, r, tolerance, None)
}

/// Like [`solve_care`] but optionally warm-started from a previous
/// solution (e.g. the Riccati matrix at a nearby state). Falls back to
/// the cold sign-function start when the warm Newton polish stalls.
pub fn solve_care_warm(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tolerance: f64,
    warm: Option<&DMatrix<f64>>,
) -> Result<CareSolution, ControlError> {
    validate_care_shapes(a, b, q, r)?;
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or(ControlError::RNotPositiveDefinite)?;
    let s = b * r_chol.solve(&b.transpose());

    if let Some(p0) = warm {
        if let Ok(sol) = newton_kleinman(a, &s, q, p0.clone(), tolerance, 12) {
            return Ok(sol);
        }
    }
    let guess = sign_function_guess(a, &s, q)?;
    newton_kleinman(a, &s, q, guess, tolerance, 50)
}

/// State-dependent model `dy/dt = A(y) y + B(y) u` with running cost
/// `y^T Q(y) y + u^T R u`.
#[derive(Clone)]
pub struct SemilinearModel {
    dim: usize,
    control_dim: usize,
    a: Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>,
    b: Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>,
    q: Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>,
    r: DMatrix<f64>,
    /// feedback for models whose state-dependent Riccati equation has a
    /// known closed-form solution; replaces the numeric solve in
    /// [`SdreController`]
    closed_form_sdre: Option<Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>>,
}

impl SemilinearModel {
    pub fn new(
        dim: usize,
        control_dim: usize,
        a: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        b: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        q: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        r: DMatrix<f64>,
    ) -> Result<Self, ControlError> {
        if r.nrows() != control_dim || r.ncols() != control_dim {
            return Err(ControlError::Shape(format!(
                "R must be {control_dim}x{control_dim}"
            )));
        }
        Ok(Self {
            dim,
            control_dim,
            a: Arc::new(a),
            b: Arc::new(b),
            q: Arc::new(q),
            r,
            closed_form_sdre: None,
        })
    }

    /// Constant-matrix (LQR) model.
    pub fn lqr(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self, ControlError> {
        let (dim, control_dim) = (a.nrows(), b.ncols());
        validate_care_shapes(&a, &b, &q, &r)?;
        Self::new(
            dim,
            control_dim,
            move |_| a.clone(),
            move |_| b.clone(),
            move |_| q.clone(),
            r,
        )
    }

    pub fn with_closed_form_sdre(
        mut self,
        law: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.closed_form_sdre = Some(Arc::new(law));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn a_at(&self, y: &[f64]) -> DMatrix<f64> {
        (self.a)(y)
    }

    pub fn b_at(&self, y: &[f64]) -> DMatrix<f64> {
        (self.b)(y)
    }

    pub fn q_at(&self, y: &[f64]) -> DMatrix<f64> {
        (self.q)(y)
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn has_closed_form_sdre(&self) -> bool {
        self.closed_form_sdre.is_some()
    }

    pub fn drift(&self, y: &[f64]) -> DVector<f64> {
        let yv = DVector::from_column_slice(y);
        self.a_at(y) * yv
    }

    pub fn running_cost(&self, y: &[f64], u: &[f64]) -> f64 {
        let yv = DVector::from_column_slice(y);
        let uv = DVector::from_column_slice(u);
        let qy = self.q_at(y) * &yv;
        let ru = &self.r * &uv;
        yv.dot(&qy) + uv.dot(&ru)
    }

    fn r_solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, ControlError> {
        self.r
            .clone()
            .cholesky()
            .ok_or(ControlError::RNotPositiveDefinite)
            .map(|ch| ch.solve(rhs))
    }
}

/// SDRE feedback with a per-trajectory Riccati cache: the previous
/// solution warm-starts the next solve, and `resolve_stride` > 1 reuses
/// it for that many steps before re-solving.
pub struct SdreController<'m> {
    model: &'m SemilinearModel,
    pub tolerance: f64,
    pub resolve_stride: usize,
    cache: Option<DMatrix<f64>>,
    steps_since_solve: usize,
}

impl<'m> SdreController<'m> {
    pub fn new(model: &'m SemilinearModel, tolerance: f64, resolve_stride: usize) -> Self {
        Self {
            model,
            tolerance,
            resolve_stride: resolve_stride.max(1),
            cache: None,
            steps_since_solve: 0,
        }
    }

    pub fn control(&mut self, y: &[f64]) -> Result<Vec<f64>, ControlError> {
        if let Some(law) = &self.model.closed_form_sdre {
            return Ok(law(y));
        }
        let needs_solve = match &self.cache {
            None => true,
            Some(_) => self.steps_since_solve >= self.resolve_stride,
        };
        if needs_solve {
            let a = self.model.a_at(y);
            let b = self.model.b_at(y);
            let q = self.model.q_at(y);
            let sol = solve_care_warm(&a, &b, &q, self.model.r(), self.tolerance, self.cache.as_ref())
                .map_err(|e| ControlError::AtState { state: y.to_vec(), source: Box::new(e) })?;
            self.cache = Some(sol.p);
            self.steps_since_solve = 0;
        }
        self.steps_since_solve += 1;
        let p = self.cache.as_ref().expect("cache populated above");
        let yv = DVector::from_column_slice(y);
        let bt_py = self.model.b_at(y).transpose() * (p * yv);
        let u = -self.model.r_solve(&bt_py)?;
        Ok(u.iter().copied().collect())
    }
}

/// One-shot SDRE feedback `u = -R^{-1} B(y)^T P(y) y` with a cold solve.
pub fn sdre_feedback(
    model: &SemilinearModel,
    y: &[f64],
    tolerance: f64,
) -> Result<Vec<f64>, ControlError> {
    SdreController::new(model, tolerance, 1).control(y)
}

/// Surrogate-gradient feedback `u = -1/2 R^{-1} B(y)^T grad V(y)`.
pub fn surrogate_feedback(
    model: &SemilinearModel,
    surrogate: &dyn Surrogate,
    y: &[f64],
) -> Result<Vec<f64>, ControlError> {
    let grad = surrogate.gradient(y)?;
    let gv = DVector::from_vec(grad);
    let rhs = model.b_at(y).transpose() * gv;
    let u = -0.5 * model.r_solve(&rhs)?;
    Ok(u.iter().copied().collect())
}

/// Two-Boxes hybrid: the origin LQR law inside `||y|| <= a_tb` (boundary
/// included), the surrogate-gradient law outside. No blending.
pub fn two_boxes_feedback(
    model: &SemilinearModel,
    surrogate: &dyn Surrogate,
    p0: &DMatrix<f64>,
    a_tb: f64,
    y: &[f64],
) -> Result<Vec<f64>, ControlError> {
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= a_tb {
        let yv = DVector::from_column_slice(y);
        let rhs = model.b_at(y).transpose() * (p0 * yv);
        let u = -model.r_solve(&rhs)?;
        Ok(u.iter().copied().collect())
    } else {
        surrogate_feedback(model, surrogate, y)
    }
}

/// Feedback law selector for closed-loop integration.
pub enum ControlLaw<'a> {
    /// uncontrolled dynamics, u = 0
    Zero,
    Sdre { tolerance: f64, resolve_stride: usize },
    SurrogateGradient(&'a dyn Surrogate),
    TwoBoxes { surrogate: &'a dyn Surrogate, p0: DMatrix<f64>, a_tb: f64 },
}

/// Closed-loop record: states, controls, and trapezoidal running cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// integrand samples l(y, u) at the stored nodes
    pub running_cost: Vec<f64>,
    /// trapezoidal cumulative integral of the running cost
    pub cumulative_cost: Vec<f64>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("nonempty trajectory")
    }

    pub fn total_cost(&self) -> f64 {
        *self.cumulative_cost.last().expect("nonempty trajectory")
    }
}

const BLOWUP_GUARD: f64 = 1e6;

/// Integrate `dy/dt = A(y) y + B(y) u` with RK4; the control is held
/// constant over each step at its start-state value (sample and hold).
pub fn integrate_closed_loop(
    model: &SemilinearModel,
    law: &ControlLaw<'_>,
    x0: &[f64],
    t_final: f64,
    dt: f64,
) -> Result<Trajectory, ControlError> {
    if !(dt > 0.0) || !(t_final > 0.0) {
        return Err(ControlError::BadIntegration(format!(
            "dt = {dt}, t_final = {t_final}"
        )));
    }
    if x0.len() != model.dim() {
        return Err(ControlError::Shape(format!(
            "initial state of dimension {} for a model of dimension {}",
            x0.len(),
            model.dim()
        )));
    }
    let mut sdre = match law {
        ControlLaw::Sdre { tolerance, resolve_stride } => {
            Some(SdreController::new(model, *tolerance, *resolve_stride))
        }
        _ => None,
    };
    let mut control_at = |y: &[f64]| -> Result<Vec<f64>, ControlError> {
        match law {
            ControlLaw::Zero => Ok(vec![0.0; model.control_dim()]),
            ControlLaw::Sdre { .. } => sdre.as_mut().expect("sdre controller").control(y),
            ControlLaw::SurrogateGradient(s) => surrogate_feedback(model, *s, y),
            ControlLaw::TwoBoxes { surrogate, p0, a_tb } => {
                two_boxes_feedback(model, *surrogate, p0, *a_tb, y)
            }
        }
    };

    let mut times = vec![0.0];
    let mut states = vec![x0.to_vec()];
    let mut controls: Vec<Vec<f64>> = Vec::new();
    let mut running = Vec::new();
    let mut cumulative = vec![0.0];

    let mut t = 0.0;
    let mut y = DVector::from_column_slice(x0);
    let u0 = control_at(x0)?;
    running.push(model.running_cost(x0, &u0));
    controls.push(u0);

    let rhs = |state: &DVector<f64>, u: &DVector<f64>, model: &SemilinearModel| -> DVector<f64> {
        let s = state.as_slice();
        model.a_at(s) * state + model.b_at(s) * u
    };

    while t < t_final - 1e-12 {
        let step = dt.min(t_final - t);
        let u = DVector::from_vec(controls.last().expect("control recorded").clone());

        let k1 = rhs(&y, &u, model);
        let y2 = &y + &k1 * (step / 2.0);
        let k2 = rhs(&y2, &u, model);
        let y3 = &y + &k2 * (step / 2.0);
        let k3 = rhs(&y3, &u, model);
        let y4 = &y + &k3 * step;
        let k4 = rhs(&y4, &u, model);
        let y_next = &y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0);

        t += step;
        let norm = y_next.norm();
        if !norm.is_finite() || norm > BLOWUP_GUARD {
            return Err(ControlError::Instability { time: t, norm });
        }
        let next_slice: Vec<f64> = y_next.iter().copied().collect();
        let u_next = control_at(&next_slice)?;
        let l_next = model.running_cost(&next_slice, &u_next);
        let l_prev = *running.last().expect("nonempty");
        let c_prev = *cumulative.last().expect("nonempty");
        cumulative.push(c_prev + 0.5 * step * (l_prev + l_next));

        times.push(t);
        states.push(next_slice);
        controls.push(u_next);
        running.push(l_next);
        y = y_next;
    }

    Ok(Trajectory { times, states, controls, running_cost: running, cumulative_cost: cumulative })
}

/// Total trapezoidal cost of a trajectory.
pub fn trajectory_cost(traj: &Trajectory) -> f64 {
    traj.total_cost()
}
