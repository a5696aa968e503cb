//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use fracbal::fom::FomParams;
use fracbal::qp::QpProblem;
use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::gamma;

/// `(-1)^j Gamma(mu + 1) / (Gamma(j + 1) Gamma(mu - j + 1))`. `None` where a
/// Gamma argument sits on a pole.
pub fn gl_gamma(mu: f64, j: usize) -> Option<f64> {
    let arg = mu - j as f64 + 1.0;
    if arg <= 0.0 && arg.fract() == 0.0 {
        return None;
    }
    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
    Some(sign * gamma(mu + 1.0) / (gamma(j as f64 + 1.0) * gamma(arg)))
}

fn ocv(p: &FomParams, z: f64) -> f64 {
    p.ocv.coeffs().iter().rev().fold(0.0, |acc, a| acc * z + a)
}

/// Truncated Grünwald-Letnikov simulation that recomputes every memory sum
/// from the full state record. Returns `(states, voltages)`; `states[k]` is
/// `x_k` and `voltages[k]` is the output at `x_k` under `currents[k]`.
pub fn truncated_gl(p: &FomParams, z0: f64, currents: &[f64]) -> (Vec<[f64; 3]>, Vec<f64>) {
    let orders = [p.alpha, p.beta, 1.0];
    let weight = |r: usize, j: usize| -> f64 {
        let mu = orders[r];
        // For integer orders only j <= mu is nonzero.
        gl_gamma(mu, j).unwrap_or(0.0)
    };
    let ta = p.ts.powf(p.alpha);
    let tb = p.ts.powf(p.beta);
    let a = [
        p.alpha - ta / (p.r1 * p.c1),
        p.beta - tb / (p.r2 * p.c2),
        1.0,
    ];
    let b = [ta / p.c1, tb / p.c2, -p.eta * p.ts / p.capacity];
    let mut xs: Vec<[f64; 3]> = vec![[0.0, 0.0, z0]];
    let mut ys = Vec::with_capacity(currents.len());
    for (k, &i) in currents.iter().enumerate() {
        let x = xs[k];
        ys.push(ocv(p, x[2]) - x[0] - x[1] - p.r0 * i);
        let mut next = [0.0; 3];
        for r in 0..3 {
            let mut acc = a[r] * x[r] + b[r] * i;
            for j in 2..=p.memory + 1 {
                // x_{k+1-j}; indices before the start read as zero.
                if k + 1 >= j {
                    acc -= weight(r, j) * xs[k + 1 - j][r];
                }
            }
            next[r] = acc;
        }
        next[2] = next[2].clamp(0.0, 1.0);
        xs.push(next);
    }
    (xs, ys)
}

/// Integer-order two-RC model: `u' = -u / RC + i / C` by forward Euler.
pub fn first_order_rc(p: &FomParams, z0: f64, currents: &[f64]) -> Vec<f64> {
    let (mut u1, mut u2, mut z) = (0.0, 0.0, z0);
    let mut out = Vec::with_capacity(currents.len());
    for &i in currents {
        out.push(ocv(p, z) - u1 - u2 - p.r0 * i);
        u1 += p.ts * (-u1 / (p.r1 * p.c1) + i / p.c1);
        u2 += p.ts * (-u2 / (p.r2 * p.c2) + i / p.c2);
        z -= p.eta * p.ts * i / p.capacity;
    }
    out
}

/// Minimum of a convex QP with a bounded feasible set, by enumerating every
/// candidate active set of size at most `n` and solving its KKT system.
pub fn enumerate_qp(q: &QpProblem, tol: f64) -> Option<(DVector<f64>, f64)> {
    let n = q.dim();
    let m = q.a_ineq.nrows();
    let me = q.a_eq.nrows();
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut subset = Vec::new();
    let mut visit = |rows: &[usize]| {
        let k = me + rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&q.w);
        for c in 0..n {
            rhs[c] = -q.v[c];
        }
        let row_of = |r: usize| -> (DVector<f64>, f64) {
            if r < me {
                (q.a_eq.row(r).transpose(), q.b_eq[r])
            } else {
                let i = rows[r - me];
                (q.a_ineq.row(i).transpose(), q.b_ineq[i])
            }
        };
        for r in 0..k {
            let (a, b) = row_of(r);
            for c in 0..n {
                kkt[(n + r, c)] = a[c];
                kkt[(c, n + r)] = a[c];
            }
            rhs[n + r] = b;
        }
        // The KKT matrix is symmetric: pseudo-invert through its eigenbasis.
        let eig = kkt.clone().symmetric_eigen();
        let cutoff = 1e-11 * eig.eigenvalues.amax().max(1.0);
        let proj = eig.eigenvectors.transpose() * &rhs;
        let scaled = DVector::from_fn(n + k, |i, _| {
            let l = eig.eigenvalues[i];
            if l.abs() > cutoff {
                proj[i] / l
            } else {
                0.0
            }
        });
        let sol = &eig.eigenvectors * scaled;
        if (&kkt * &sol - &rhs).amax() > 1e-7 * (1.0 + rhs.amax()) {
            return;
        }
        let x = sol.rows(0, n).into_owned();
        if q.max_violation(&x) > tol {
            return;
        }
        let f = q.objective(&x);
        if best.as_ref().is_none_or(|(_, b)| f < *b) {
            best = Some((x, f));
        }
    };
    fn walk(
        start: usize,
        m: usize,
        limit: usize,
        subset: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        visit(subset);
        if subset.len() == limit {
            return;
        }
        for i in start..m {
            subset.push(i);
            walk(i + 1, m, limit, subset, visit);
            subset.pop();
        }
    }
    walk(0, m, n, &mut subset, &mut visit);
    best
}

/// Minimum of `f` over a rectangular grid followed by successive local
/// refinement. Returns `(argmin, min)`; `f` returns `None` off the feasible set.
pub fn grid_min<F>(f: F, lo: &[f64], hi: &[f64], points: usize, rounds: usize) -> Option<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let dim = lo.len();
    let (mut lo, mut hi) = (lo.to_vec(), hi.to_vec());
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..rounds {
        let total = points.pow(dim as u32);
        for idx in 0..total {
            let mut x = vec![0.0; dim];
            let mut rest = idx;
            for d in 0..dim {
                let t = (rest % points) as f64 / (points - 1) as f64;
                rest /= points;
                x[d] = lo[d] + t * (hi[d] - lo[d]);
            }
            if let Some(v) = f(&x) {
                if best.as_ref().is_none_or(|(_, b)| v < *b) {
                    best = Some((x, v));
                }
            }
        }
        let (centre, _) = best.as_ref()?;
        for d in 0..dim {
            let half = 2.0 * (hi[d] - lo[d]) / (points - 1) as f64;
            let (l, h) = (centre[d] - half, centre[d] + half);
            lo[d] = l.max(lo[d]);
            hi[d] = h.min(hi[d]);
        }
    }
    best
}

/// Deterministic urban-like current profile with rests, accelerations and
/// regenerative pulses (A).
pub fn urban_profile(len: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64) / ((1u64 << 53) as f64)
    };
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let seg = 20 + (next() * 60.0) as usize;
        let level = match (next() * 4.0) as usize {
            0 => 0.0,
            1 => -0.8 * next(),
            _ => 0.5 + 3.5 * next(),
        };
        for _ in 0..seg {
            out.push(level);
        }
    }
    out.truncate(len);
    out
}

/// Shape of a generated QP Hessian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Curvature {
    /// `y y'`.
    RankOne,
    /// `M M'` with a random inner rank, possibly singular.
    Semidefinite,
    /// `M M' + 0.1 I`.
    Definite,
}

/// Random convex QP with box bounds on every variable, a few general rows
/// and an optional equality. Returns the problem and a point that satisfies
/// the equality and lies in the box; the point is feasible when `feasible`.
pub fn random_qp<R: rand::Rng>(
    rng: &mut R,
    curvature: Curvature,
    feasible: bool,
) -> (QpProblem, DVector<f64>) {
    let n = rng.random_range(1..=5);
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let w = match curvature {
        Curvature::RankOne => {
            let y = DVector::from_fn(n, |_, _| u(-2.0, 2.0));
            &y * y.transpose()
        }
        Curvature::Semidefinite | Curvature::Definite => {
            let r = 1 + (u(0.0, n as f64) as usize).min(n - 1);
            let m = DMatrix::from_fn(n, r, |_, _| u(-1.5, 1.5));
            let mut w = &m * m.transpose();
            if curvature == Curvature::Definite {
                w += DMatrix::identity(n, n) * 0.1;
            }
            w
        }
    };
    let v = DVector::from_fn(n, |_, _| u(-3.0, 3.0));
    let bound = DVector::from_fn(n, |_, _| u(0.5, 3.0));
    let x0 = DVector::from_fn(n, |i, _| u(-0.9, 0.9) * bound[i]);
    let extra = (u(0.0, 4.0) as usize).min(3);
    let m = 2 * n + extra;
    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    for i in 0..n {
        a[(i, i)] = 1.0;
        b[i] = bound[i];
        a[(n + i, i)] = -1.0;
        b[n + i] = bound[i];
    }
    for r in 2 * n..m {
        for c in 0..n {
            a[(r, c)] = u(-1.0, 1.0);
        }
        let slack = if feasible { u(0.0, 1.0) } else { u(-0.5, 1.0) };
        b[r] = (a.row(r) * &x0)[0] + slack;
    }
    let mut q = QpProblem::new(w, v).with_inequalities(a, b);
    if u(0.0, 1.0) < 0.3 && n > 1 {
        let ae = DMatrix::from_fn(1, n, |_, _| u(-1.0, 1.0));
        let be = &ae * &x0;
        q = q.with_equalities(ae, be);
    }
    (q, x0)
}

/// Null-space basis of `a` (columns), from the SVD.
pub fn null_space(a: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let full = a.clone().resize_vertically(n.max(a.nrows()), 0.0);
    let svd = full.svd(false, true);
    let vt = svd.v_t.unwrap();
    let smax = svd.singular_values.max();
    let cols: Vec<usize> = (0..n)
        .filter(|&i| svd.singular_values[i] <= 1e-12 * smax.max(1.0))
        .collect();
    DMatrix::from_fn(n, cols.len(), |r, c| vt[(cols[c], r)])
}

/// Noise-free log of `p` from rest at `z0`: a short rest followed by an
/// urban-like profile.
pub fn synthetic_log(p: &FomParams, z0: f64, len: usize, seed: u64) -> fracbal::cycle::MeasurementLog {
    let mut current = vec![0.0; 10];
    current.extend(urban_profile(len - 10, seed));
    let model = fracbal::fom::CellModel::new(*p).unwrap();
    let voltage = model.simulate(fracbal::fom::CellState::rest(z0), &current);
    fracbal::cycle::MeasurementLog::new(p.ts, current, voltage).unwrap()
}
