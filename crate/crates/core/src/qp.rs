//! Dense convex QP solver.
//!
//! ```text
//! minimize    1/2 x' W x + V' x
//! subject to  A_ineq x <= b_ineq
//!             A_eq   x  = b_eq
//! ```
//!
//! Primal active-set method with the equality rows held in every working
//! set. A feasible start comes from a phase-1 problem that minimizes a
//! single slack bounding every inequality violation. `W` is shifted by a
//! small multiple of the identity so that every reduced Hessian is positive
//! definite, which keeps rank-deficient costs (`y y'`, or zero) well posed.
//!
//! Tie rules: among equally blocking constraints the lowest index enters the
//! working set; among equally negative multipliers the lowest index leaves.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cost matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("cost matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotConvex(f64),
    #[error("problem data contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub w: DMatrix<f64>,
    pub v: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem; add rows with the `with_*` builders.
    pub fn new(w: DMatrix<f64>, v: DVector<f64>) -> Self {
        let n = v.len();
        Self {
            w,
            v,
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
        }
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_ineq = a;
        self.b_ineq = b;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.w * x)) + self.v.dot(x)
    }

    /// Largest violation of any constraint at `x` (0 when feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let ineq = (&self.a_ineq * x - &self.b_ineq).max().max(0.0);
        let eq = if self.b_eq.is_empty() {
            0.0
        } else {
            (&self.a_eq * x - &self.b_eq).amax()
        };
        if self.b_ineq.is_empty() {
            eq
        } else {
            ineq.max(eq)
        }
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        if self.w.shape() != (n, n) {
            return Err(QpError::Dimension(format!(
                "W is {:?}, expected ({n}, {n})",
                self.w.shape()
            )));
        }
        if self.a_ineq.ncols() != n || self.a_ineq.nrows() != self.b_ineq.len() {
            return Err(QpError::Dimension(format!(
                "A_ineq is {:?} with {} bounds",
                self.a_ineq.shape(),
                self.b_ineq.len()
            )));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::Dimension(format!(
                "A_eq is {:?} with {} targets",
                self.a_eq.shape(),
                self.b_eq.len()
            )));
        }
        let finite = self.w.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self.a_ineq.iter().all(|x| x.is_finite())
            && self.b_ineq.iter().all(|x| x.is_finite())
            && self.a_eq.iter().all(|x| x.is_finite())
            && self.b_eq.iter().all(|x| x.is_finite());
        if !finite {
            return Err(QpError::NonFinite);
        }
        let asym = (&self.w - self.w.transpose()).amax();
        if asym > 1e-10 * (1.0 + self.w.amax()) {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIter => "max_iter",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KktResiduals {
    pub primal: f64,
    pub stationarity: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub xi: DVector<f64>,
    pub status: QpStatus,
    pub objective: f64,
    /// Largest of the three KKT residuals.
    pub kkt_residual: f64,
    pub residuals: KktResiduals,
    /// Inequality rows in the final working set, ascending.
    pub active_set: Vec<usize>,
    /// Inequality multipliers (zero off the active set).
    pub multipliers: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub max_iter: usize,
    /// Primal feasibility tolerance, relative to `1 + |b|`.
    pub feasibility_tol: f64,
    /// Reduced-gradient and multiplier tolerance, relative to `1 + |grad|`.
    pub optimality_tol: f64,
    /// Identity shift added to `W`.
    pub regularization: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            feasibility_tol: 1e-9,
            optimality_tol: 1e-12,
            regularization: 1e-9,
        }
    }
}

/// Solves `q` with the active-set method.
pub fn solve_qp(q: &QpProblem, opts: &QpOptions) -> Result<QpSolution, QpError> {
    q.validate()?;
    let n = q.dim();
    if n > 0 {
        let eig = SymmetricEigen::new(q.w.clone()).eigenvalues;
        let lmin = eig.min();
        if lmin < -1e-8 * (1.0 + eig.amax()) {
            return Err(QpError::NotConvex(lmin));
        }
    }
    let g = &q.w + DMatrix::identity(n, n) * opts.regularization;

    let eq_rows = independent_rows(&q.a_eq);
    let ae = q.a_eq.select_rows(&eq_rows);
    let be = q.b_eq.select_rows(&eq_rows);
    let b_scale = 1.0 + q.b_ineq.amax().max(q.b_eq.amax());
    let feas_tol = opts.feasibility_tol * b_scale;

    let x_eq = min_norm_solution(&ae, &be);
    let eq_residual = if q.b_eq.is_empty() {
        0.0
    } else {
        (&q.a_eq * &x_eq - &q.b_eq).amax()
    };
    if eq_residual > feas_tol {
        return Ok(infeasible(q, x_eq));
    }

    let violation = if q.b_ineq.is_empty() {
        0.0
    } else {
        (&q.a_ineq * &x_eq - &q.b_ineq).max()
    };
    let mut iterations = 0;
    let x0 = if violation <= feas_tol {
        x_eq
    } else {
        match phase_one(q, &ae, x_eq, violation, opts) {
            Some((x, t, iters)) if t <= feas_tol => {
                iterations += iters;
                x
            }
            Some((x, _, _)) => return Ok(infeasible(q, x)),
            None => return Ok(infeasible(q, DVector::zeros(n))),
        }
    };

    let sub = Subproblem {
        g: &g,
        c: &q.v,
        a: &q.a_ineq,
        b: &q.b_ineq,
        ae: &ae,
    };
    let run = sub.solve(x0, Vec::new(), opts);
    iterations += run.iterations;

    let mut multipliers = DVector::zeros(q.b_ineq.len());
    for (&i, &l) in run.working.iter().zip(run.ineq_multipliers.iter()) {
        multipliers[i] = l;
    }
    let mut eq_multipliers = DVector::zeros(q.b_eq.len());
    for (&row, &l) in eq_rows.iter().zip(run.eq_multipliers.iter()) {
        eq_multipliers[row] = l;
    }
    let mut active_set = run.working.clone();
    active_set.sort_unstable();
    let residuals = kkt_residuals(q, &run.x, &multipliers, &eq_multipliers);
    Ok(QpSolution {
        objective: q.objective(&run.x),
        kkt_residual: residuals
            .primal
            .max(residuals.stationarity)
            .max(residuals.complementarity),
        residuals,
        xi: run.x,
        status: if run.converged {
            QpStatus::Optimal
        } else {
            QpStatus::MaxIter
        },
        active_set,
        multipliers,
        eq_multipliers,
        iterations,
    })
}

fn infeasible(q: &QpProblem, x: DVector<f64>) -> QpSolution {
    let zeros_i = DVector::zeros(q.b_ineq.len());
    let zeros_e = DVector::zeros(q.b_eq.len());
    let residuals = kkt_residuals(q, &x, &zeros_i, &zeros_e);
    QpSolution {
        objective: q.objective(&x),
        kkt_residual: residuals.primal,
        residuals,
        xi: x,
        status: QpStatus::Infeasible,
        active_set: Vec::new(),
        multipliers: zeros_i,
        eq_multipliers: zeros_e,
        iterations: 0,
    }
}

/// Stationarity, primal feasibility and complementarity at `x` against the
/// unshifted cost.
pub fn kkt_residuals(
    q: &QpProblem,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    mu: &DVector<f64>,
) -> KktResiduals {
    let grad = &q.w * x + &q.v + q.a_ineq.transpose() * lambda + q.a_eq.transpose() * mu;
    let slack = &q.b_ineq - &q.a_ineq * x;
    let complementarity = lambda
        .iter()
        .zip(slack.iter())
        .map(|(l, s)| (l * s).abs())
        .fold(0.0, f64::max);
    KktResiduals {
        primal: q.max_violation(x),
        stationarity: if grad.is_empty() { 0.0 } else { grad.amax() },
        complementarity,
    }
}

/// Minimizes a slack `t >= max(A x - b)` subject to the equalities.
fn phase_one(
    q: &QpProblem,
    ae: &DMatrix<f64>,
    x_start: DVector<f64>,
    violation: f64,
    opts: &QpOptions,
) -> Option<(DVector<f64>, f64, usize)> {
    let n = q.dim();
    let m = q.b_ineq.len();
    let g = DMatrix::identity(n + 1, n + 1) * opts.regularization;
    let mut c = DVector::zeros(n + 1);
    c[n] = 1.0;
    let mut a = DMatrix::zeros(m + 1, n + 1);
    a.view_mut((0, 0), (m, n)).copy_from(&q.a_ineq);
    for r in 0..m {
        a[(r, n)] = -1.0;
    }
    a[(m, n)] = -1.0;
    let mut b = DVector::zeros(m + 1);
    b.rows_mut(0, m).copy_from(&q.b_ineq);
    let mut ae1 = DMatrix::zeros(ae.nrows(), n + 1);
    ae1.view_mut((0, 0), (ae.nrows(), n)).copy_from(ae);
    let mut y0 = DVector::zeros(n + 1);
    y0.rows_mut(0, n).copy_from(&x_start);
    y0[n] = violation;
    let sub = Subproblem {
        g: &g,
        c: &c,
        a: &a,
        b: &b,
        ae: &ae1,
    };
    let run = sub.solve(y0, Vec::new(), opts);
    let t = run.x[n];
    if !t.is_finite() {
        return None;
    }
    Some((run.x.rows(0, n).into_owned(), t.max(0.0), run.iterations))
}

struct Subproblem<'a> {
    g: &'a DMatrix<f64>,
    c: &'a DVector<f64>,
    a: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    ae: &'a DMatrix<f64>,
}

struct Run {
    x: DVector<f64>,
    working: Vec<usize>,
    ineq_multipliers: Vec<f64>,
    eq_multipliers: Vec<f64>,
    iterations: usize,
    converged: bool,
}

impl Subproblem<'_> {
    fn working_matrix(&self, working: &[usize]) -> DMatrix<f64> {
        let n = self.g.nrows();
        let ne = self.ae.nrows();
        let mut aw = DMatrix::zeros(ne + working.len(), n);
        aw.view_mut((0, 0), (ne, n)).copy_from(self.ae);
        for (k, &i) in working.iter().enumerate() {
            aw.row_mut(ne + k).copy_from(&self.a.row(i));
        }
        aw
    }

    /// Runs from a feasible `x` until the KKT conditions hold on the working set.
    fn solve(&self, mut x: DVector<f64>, mut working: Vec<usize>, opts: &QpOptions) -> Run {
        let ne = self.ae.nrows();
        let mut iterations = 0;
        loop {
            let aw = self.working_matrix(&working);
            let grad = self.g * &x + self.c;
            let tol = opts.optimality_tol * (1.0 + grad.amax());
            let z = null_space(&aw);
            let gr = z.transpose() * &grad;
            let stationary = gr.is_empty() || gr.amax() <= tol;

            if !stationary {
                if iterations >= opts.max_iter {
                    return self.finish(x, working, &aw, &grad, iterations, false);
                }
                iterations += 1;
                let hr = z.transpose() * self.g * &z;
                let step = match hr.cholesky() {
                    Some(ch) => ch.solve(&(-&gr)),
                    None => -&gr,
                };
                let p = &z * step;
                let p_norm = p.norm();
                let mut alpha = 1.0;
                let mut blocking = None;
                for i in 0..self.b.len() {
                    if working.contains(&i) {
                        continue;
                    }
                    let row = self.a.row(i);
                    let ap = row.dot(&p.transpose());
                    if ap > 1e-14 * row.norm() * p_norm {
                        let slack = (self.b[i] - row.dot(&x.transpose())).max(0.0);
                        let t = slack / ap;
                        if t < alpha {
                            alpha = t;
                            blocking = Some(i);
                        }
                    }
                }
                x += p * alpha;
                if let Some(i) = blocking {
                    working.push(i);
                }
                continue;
            }

            let lambda = multipliers(&aw, &grad);
            let mut drop: Option<(usize, f64)> = None;
            for (k, &i) in working.iter().enumerate() {
                let l = lambda[ne + k];
                if l < -tol {
                    match drop {
                        Some((kd, ld)) if l > ld || (l == ld && i > working[kd]) => {}
                        _ => drop = Some((k, l)),
                    }
                }
            }
            match drop {
                None => return self.finish(x, working, &aw, &grad, iterations, true),
                Some(_) if iterations >= opts.max_iter => {
                    return self.finish(x, working, &aw, &grad, iterations, false)
                }
                Some((k, _)) => {
                    iterations += 1;
                    working.remove(k);
                }
            }
        }
    }

    fn finish(
        &self,
        x: DVector<f64>,
        working: Vec<usize>,
        aw: &DMatrix<f64>,
        grad: &DVector<f64>,
        iterations: usize,
        converged: bool,
    ) -> Run {
        let ne = self.ae.nrows();
        let lambda = multipliers(aw, grad);
        Run {
            x,
            ineq_multipliers: lambda.iter().skip(ne).map(|l| l.max(0.0)).collect(),
            eq_multipliers: lambda.iter().take(ne).copied().collect(),
            working,
            iterations,
            converged,
        }
    }
}

/// Least-squares solution of `aw' lambda = -grad`.
fn multipliers(aw: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    if aw.nrows() == 0 {
        return DVector::zeros(0);
    }
    let gram = aw * aw.transpose();
    let rhs = -(aw * grad);
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .pseudo_inverse(1e-14)
            .map(|pinv| pinv * rhs)
            .unwrap_or_else(|_| DVector::zeros(aw.nrows())),
    }
}

/// Orthonormal basis of the null space of `aw` (columns).
fn null_space(aw: &DMatrix<f64>) -> DMatrix<f64> {
    let n = aw.ncols();
    if aw.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let gram = aw.transpose() * aw;
    let eig = SymmetricEigen::new(gram);
    let scale = eig.eigenvalues.amax().max(1e-300);
    let cols: Vec<usize> = (0..n)
        .filter(|&k| eig.eigenvalues[k] <= 1e-12 * scale)
        .collect();
    let mut z = DMatrix::zeros(n, cols.len());
    for (j, &k) in cols.iter().enumerate() {
        z.set_column(j, &eig.eigenvectors.column(k));
    }
    z
}

/// Greedy selection of linearly independent rows, in index order.
fn independent_rows(a: &DMatrix<f64>) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for r in 0..a.nrows() {
        let mut candidate = keep.clone();
        candidate.push(r);
        let sub = a.select_rows(&candidate);
        let sv = (&sub * sub.transpose()).symmetric_eigenvalues();
        let scale = sv.amax().max(1e-300);
        if sv.min() > 1e-12 * scale {
            keep = candidate;
        }
    }
    keep
}

/// `ae' (ae ae')^-1 be`, or zero without equality rows.
fn min_norm_solution(ae: &DMatrix<f64>, be: &DVector<f64>) -> DVector<f64> {
    let n = ae.ncols();
    if ae.nrows() == 0 {
        return DVector::zeros(n);
    }
    let gram = ae * ae.transpose();
    match gram.cholesky() {
        Some(ch) => ae.transpose() * ch.solve(be),
        None => DVector::zeros(n),
    }
}
