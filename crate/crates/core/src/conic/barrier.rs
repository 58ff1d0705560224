//! Primal log-barrier interior-point method.
//!
//! Equalities are eliminated through a null-space basis. A Phase I problem
//! `min tau s.t. S(z) + tau I > 0, h - Gz + tau > 0, tau > -1` finds a
//! strictly feasible start unless a feasible hint is supplied. Each
//! centering step is a damped Newton iteration with backtracking on the
//! barrier objective, so that objective never increases within a stage.

use nalgebra::{DMatrix, DVector};

use super::{ConicProblem, ConicSolution, LmiSet, Method, SolveStatus, SolverOptions, SparseRows};
use crate::error::Result;
use crate::linalg::{cholesky_regularized, cholesky_solve, eig_extremes};

/// Proximal weight tying Phase I to its starting point; keeps variables that
/// appear in no constraint from drifting.
const PHASE1_PROX: f64 = 1e-8;
const NEWTON_EPS: f64 = 1e-9;
const ARMIJO: f64 = 0.01;
const ROUNDOFF: f64 = 1e-13;

struct Borrowed<'a>(&'a dyn LmiSet);

impl LmiSet for Borrowed<'_> {
    fn n_vars(&self) -> usize {
        self.0.n_vars()
    }
    fn block_dims(&self) -> Vec<usize> {
        self.0.block_dims()
    }
    fn eval(&self, z: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.0.eval(z)
    }
    fn adjoint(&self, xs: &[DMatrix<f64>]) -> DVector<f64> {
        self.0.adjoint(xs)
    }
    fn add_hessian(&self, xs: &[DMatrix<f64>], hess: &mut DMatrix<f64>) {
        self.0.add_hessian(xs, hess)
    }
}

/// An LMI set composed with `z = z0 + N w`.
struct Substituted<'a> {
    inner: &'a dyn LmiSet,
    z0: DVector<f64>,
    basis: DMatrix<f64>,
}

impl LmiSet for Substituted<'_> {
    fn n_vars(&self) -> usize {
        self.basis.ncols()
    }
    fn block_dims(&self) -> Vec<usize> {
        self.inner.block_dims()
    }
    fn eval(&self, w: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.inner.eval(&(&self.z0 + &self.basis * w))
    }
    fn adjoint(&self, xs: &[DMatrix<f64>]) -> DVector<f64> {
        self.basis.tr_mul(&self.inner.adjoint(xs))
    }
    fn add_hessian(&self, xs: &[DMatrix<f64>], hess: &mut DMatrix<f64>) {
        let n = self.inner.n_vars();
        let mut full = DMatrix::zeros(n, n);
        self.inner.add_hessian(xs, &mut full);
        *hess += self.basis.tr_mul(&(full * &self.basis));
    }
}

/// The inequality-only problem the barrier method actually runs on.
pub(super) struct Core<'a> {
    pub n: usize,
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub c: f64,
    pub g: SparseRows,
    pub h: DVector<f64>,
    pub psd: Vec<Box<dyn LmiSet + 'a>>,
    /// Sum of PSD block sizes plus the number of linear inequalities.
    pub barrier_degree: usize,
}

struct Point {
    /// Inverse of each shifted block, grouped by set.
    inv: Vec<Vec<DMatrix<f64>>>,
    /// Linear slacks `h - Gz + tau`.
    r: DVector<f64>,
    phi: f64,
}

struct Derivs {
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl<'a> Core<'a> {
    fn point(&self, z: &DVector<f64>, tau: f64) -> Option<Point> {
        let mut phi = 0.0;
        let mut inv = Vec::with_capacity(self.psd.len());
        for set in &self.psd {
            let mut group = Vec::new();
            for mut s in set.eval(z) {
                for i in 0..s.nrows() {
                    s[(i, i)] += tau;
                }
                let chol = s.cholesky()?;
                phi -= 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                group.push(chol.inverse());
            }
            inv.push(group);
        }
        let mut r = &self.h - self.g.mul(z);
        r.add_scalar_mut(tau);
        if r.iter().any(|v| !(*v > 0.0)) {
            return None;
        }
        phi -= r.iter().map(|v| v.ln()).sum::<f64>();
        phi.is_finite().then_some(Point { inv, r, phi })
    }

    /// Barrier derivatives in `z` (and in `tau` as the last coordinate when
    /// `phase1`).
    fn derivs(&self, pt: &Point, tau: f64, phase1: bool) -> Derivs {
        let n = self.n;
        let dim = n + usize::from(phase1);
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        {
            let mut hz = hess.view_mut((0, 0), (n, n)).clone_owned();
            for (set, xs) in self.psd.iter().zip(&pt.inv) {
                let adj = set.adjoint(xs);
                grad.rows_mut(0, n).axpy(-1.0, &adj, 1.0);
                set.add_hessian(xs, &mut hz);
            }
            for (row, &ri) in self.g.rows.iter().zip(pt.r.iter()) {
                let w1 = 1.0 / ri;
                let w2 = w1 * w1;
                for &(j, v) in row {
                    grad[j] += v * w1;
                    for &(k, u) in row {
                        hz[(j, k)] += w2 * v * u;
                    }
                }
            }
            hess.view_mut((0, 0), (n, n)).copy_from(&hz);
        }
        if phase1 {
            let mut g_tau = -1.0 / (tau + 1.0);
            let mut h_tt = 1.0 / (tau + 1.0).powi(2);
            let mut h_zt = DVector::zeros(n);
            for (set, xs) in self.psd.iter().zip(&pt.inv) {
                let sq: Vec<DMatrix<f64>> = xs.iter().map(|x| x * x).collect();
                h_zt += set.adjoint(&sq);
                g_tau -= xs.iter().map(|x| x.trace()).sum::<f64>();
                h_tt += sq.iter().map(|x| x.trace()).sum::<f64>();
            }
            for (row, &ri) in self.g.rows.iter().zip(pt.r.iter()) {
                g_tau -= 1.0 / ri;
                h_tt += 1.0 / (ri * ri);
                for &(j, v) in row {
                    h_zt[j] -= v / (ri * ri);
                }
            }
            grad[n] = g_tau;
            hess[(n, n)] = h_tt;
            hess.view_mut((0, n), (n, 1)).copy_from(&h_zt);
            hess.view_mut((n, 0), (1, n)).copy_from(&h_zt.transpose());
        }
        Derivs { grad, hess }
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + self.q.dot(z) + self.c
    }
}

enum Phase<'b> {
    /// `min tau + prox/2 |z - anchor|^2`
    One { anchor: &'b DVector<f64> },
    Two,
}

struct Run<'c, 'a> {
    core: &'c Core<'a>,
    budget: usize,
    steps: usize,
    trace: Vec<(i32, f64)>,
}

enum Centering {
    Done,
    OutOfBudget,
}

impl Run<'_, '_> {
    fn split<'v>(&self, v: &'v DVector<f64>, phase: &Phase) -> (DVector<f64>, f64) {
        match phase {
            Phase::One { .. } => (v.rows(0, self.core.n).clone_owned(), v[self.core.n]),
            Phase::Two => (v.clone(), 0.0),
        }
    }

    /// Gradient and Hessian of the stage objective.
    fn objective(&self, v: &DVector<f64>, phase: &Phase) -> (DVector<f64>, DMatrix<f64>) {
        let core = self.core;
        match phase {
            Phase::Two => (&core.p * v + &core.q, core.p.clone()),
            Phase::One { anchor } => {
                let n = core.n;
                let d = v.rows(0, n) - *anchor;
                let mut grad = DVector::zeros(n + 1);
                grad.rows_mut(0, n).copy_from(&(&d * PHASE1_PROX));
                grad[n] = 1.0;
                let mut hess = DMatrix::zeros(n + 1, n + 1);
                for i in 0..n {
                    hess[(i, i)] = PHASE1_PROX;
                }
                (grad, hess)
            }
        }
    }

    fn total(&self, v: &DVector<f64>, t: f64, phase: &Phase) -> Option<(f64, Point)> {
        let (z, tau) = self.split(v, phase);
        if let Phase::One { .. } = phase {
            if !(tau > -1.0) {
                return None;
            }
        }
        let pt = self.core.point(&z, tau)?;
        let mut phi = pt.phi;
        let f = match phase {
            Phase::One { anchor } => {
                phi -= (tau + 1.0).ln();
                tau + 0.5 * PHASE1_PROX * (z - *anchor).norm_squared()
            }
            Phase::Two => self.core.objective(&z),
        };
        Some((t * f + phi, pt))
    }

    fn center(&mut self, v: &mut DVector<f64>, t: f64, phase: &Phase, stage: i32) -> Centering {
        let phase1 = matches!(phase, Phase::One { .. });
        loop {
            let Some((value, pt)) = self.total(v, t, phase) else {
                // the caller guarantees strict feasibility of v
                return Centering::Done;
            };
            let (_, tau) = self.split(v, phase);
            let d = self.core.derivs(&pt, tau, phase1);
            let (gf, hf) = self.objective(v, phase);
            let grad = gf * t + d.grad;
            let hess = hf * t + d.hess;
            let Some((l, _)) = cholesky_regularized(&hess, 0.0) else {
                return Centering::Done;
            };
            let step = -cholesky_solve(&l, &grad);
            let slope = grad.dot(&step);
            // below the round-off floor of the merit value further steps stall
            let floor = NEWTON_EPS.max(ROUNDOFF * value.abs());
            if -slope / 2.0 <= floor || !slope.is_finite() {
                return Centering::Done;
            }
            let mut s = 1.0;
            let accepted = loop {
                let cand = &*v + &step * s;
                if let Some((cv, _)) = self.total(&cand, t, phase) {
                    if cv <= value + ARMIJO * s * slope {
                        break Some((cand, cv));
                    }
                }
                s *= 0.5;
                if s < 1e-14 {
                    break None;
                }
            };
            let Some((cand, cv)) = accepted else {
                return Centering::Done;
            };
            *v = cand;
            self.trace.push((stage, cv));
            self.steps += 1;
            if self.steps >= self.budget {
                return Centering::OutOfBudget;
            }
        }
    }
}

fn null_space(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let (p, n) = a.shape();
    // pad to square so the SVD returns a complete right basis
    let mut sq = DMatrix::zeros(p.max(n), n);
    sq.view_mut((0, 0), (p, n)).copy_from(a);
    let mut rhs = DVector::zeros(p.max(n));
    rhs.rows_mut(0, p).copy_from(b);
    let svd = sq.svd(true, true);
    let v_t = svd.v_t.as_ref().expect("requested");
    let u = svd.u.as_ref().expect("requested");
    let tol = 1e-12 * svd.singular_values.max().max(1.0) * n as f64;
    let mut z0 = DVector::zeros(n);
    let mut null_rows = Vec::new();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            z0 += v_t.row(k).transpose() * (u.column(k).dot(&rhs) / s);
        } else {
            null_rows.push(k);
        }
    }
    if (a * &z0 - b).amax() > 1e-9 * (1.0 + b.amax()) {
        return None;
    }
    let mut basis = DMatrix::zeros(n, null_rows.len());
    for (c, &k) in null_rows.iter().enumerate() {
        basis.set_column(c, &v_t.row(k).transpose());
    }
    Some((z0, basis))
}

fn primal_residual(prob: &ConicProblem, z: &DVector<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    if !prob.g.is_empty() {
        worst = worst.max((prob.g.mul(z) - &prob.h).max());
    }
    if prob.a_eq.nrows() > 0 {
        worst = worst.max((&prob.a_eq * z - &prob.b_eq).amax());
    }
    for set in &prob.psd {
        for s in set.eval(z) {
            worst = worst.max(-eig_extremes(&s).0);
        }
    }
    worst.max(0.0)
}

pub fn solve_conic(prob: &ConicProblem, opts: &SolverOptions) -> Result<ConicSolution> {
    prob.validate()?;
    let n_full = prob.n_vars;
    let (z0, basis) = if prob.a_eq.nrows() > 0 {
        match null_space(&prob.a_eq, &prob.b_eq) {
            Some(pair) => (pair.0, Some(pair.1)),
            None => {
                let z = DVector::zeros(n_full);
                let res = (&prob.a_eq * &z - &prob.b_eq).amax();
                return Ok(ConicSolution {
                    objective: prob.objective(&z),
                    z,
                    status: SolveStatus::Infeasible,
                    primal_residual: res,
                    gap: f64::INFINITY,
                    newton_steps: 0,
                    barrier_trace: Vec::new(),
                });
            }
        }
    } else {
        (DVector::zeros(n_full), None)
    };

    let barrier_degree =
        prob.psd.iter().map(|s| s.block_dims().iter().sum::<usize>()).sum::<usize>() + prob.g.len();
    let core = match &basis {
        None => Core {
            n: n_full,
            p: prob.p.clone(),
            q: prob.q.clone(),
            c: prob.c,
            g: prob.g.clone(),
            h: prob.h.clone(),
            psd: prob.psd.iter().map(|s| Box::new(Borrowed(s.as_ref())) as Box<dyn LmiSet>).collect(),
            barrier_degree,
        },
        Some(nb) => {
            let pz0 = &prob.p * &z0;
            let g_rows = SparseRows {
                rows: prob
                    .g
                    .rows
                    .iter()
                    .map(|row| {
                        (0..nb.ncols())
                            .filter_map(|k| {
                                let v: f64 = row.iter().map(|&(j, a)| a * nb[(j, k)]).sum();
                                (v != 0.0).then_some((k, v))
                            })
                            .collect()
                    })
                    .collect(),
            };
            Core {
                n: nb.ncols(),
                p: nb.tr_mul(&(&prob.p * nb)),
                q: nb.tr_mul(&(&pz0 + &prob.q)),
                c: prob.c + 0.5 * z0.dot(&pz0) + prob.q.dot(&z0),
                g: g_rows,
                h: &prob.h - prob.g.mul(&z0),
                psd: prob
                    .psd
                    .iter()
                    .map(|s| {
                        Box::new(Substituted {
                            inner: s.as_ref(),
                            z0: z0.clone(),
                            basis: nb.clone(),
                        }) as Box<dyn LmiSet>
                    })
                    .collect(),
                barrier_degree,
            }
        }
    };
    let lift = |w: &DVector<f64>| match &basis {
        None => w.clone(),
        Some(nb) => &z0 + nb * w,
    };
    let n = core.n;
    let start = match (&opts.hint, &basis) {
        (Some(hnt), None) => hnt.clone(),
        (Some(hnt), Some(nb)) => nb.tr_mul(&(hnt - &z0)),
        (None, _) => DVector::zeros(n),
    };

    let mut run = Run {
        core: &core,
        budget: opts.max_iter.max(1),
        steps: 0,
        trace: Vec::new(),
    };
    let finish = |w: &DVector<f64>, status: SolveStatus, gap: f64, run: &Run| {
        let z = lift(w);
        let residual = primal_residual(prob, &z);
        ConicSolution {
            objective: prob.objective(&z),
            z,
            status,
            primal_residual: residual,
            gap,
            newton_steps: run.steps,
            barrier_trace: run.trace.clone(),
        }
    };

    if opts.method == Method::PrimalDual {
        let out = super::pd::run(&core, start, opts.tol, opts.max_iter);
        run.steps = out.iterations;
        run.trace = out.trace;
        return Ok(finish(&out.w, out.status, out.gap, &run));
    }

    // Phase I
    let mut w = start.clone();
    if core.point(&w, 0.0).is_none() {
        let mut tau0: f64 = 0.0;
        for set in &core.psd {
            for s in set.eval(&w) {
                tau0 = tau0.max(-eig_extremes(&s).0);
            }
        }
        if !core.g.is_empty() {
            tau0 = tau0.max((core.g.mul(&w) - &core.h).max());
        }
        let mut v = w.clone().insert_row(n, tau0 + 1.0);
        let phase = Phase::One { anchor: &start };
        let degree = (core.barrier_degree + 1) as f64;
        let mut t = 1.0;
        let mut stage = -1;
        loop {
            let outcome = run.center(&mut v, t, &phase, stage);
            let tau = v[n];
            if tau < 0.0 {
                w = v.rows(0, n).clone_owned();
                break;
            }
            let gap = degree / t;
            if tau - gap > 0.0 || gap < 1e-3 * opts.tol {
                return Ok(finish(&v.rows(0, n).clone_owned(), SolveStatus::Infeasible, gap, &run))
                    .map(|mut s| {
                        s.primal_residual = s.primal_residual.max(tau);
                        s
                    });
            }
            if let Centering::OutOfBudget = outcome {
                return Ok(finish(&v.rows(0, n).clone_owned(), SolveStatus::MaxIter, gap, &run));
            }
            t *= opts.mu;
            stage -= 1;
        }
    }

    // Phase II
    let degree = core.barrier_degree as f64;
    if degree == 0.0 {
        run.center(&mut w, 1.0, &Phase::Two, 0);
        return Ok(finish(&w, SolveStatus::Optimal, 0.0, &run));
    }
    let mut t = (degree / (1.0 + core.objective(&w).abs())).clamp(1e-4, 1e8);
    let mut stage = 0;
    loop {
        let outcome = run.center(&mut w, t, &Phase::Two, stage);
        let gap = degree / t;
        if gap <= opts.tol * (1.0 + core.objective(&w).abs()) {
            return Ok(finish(&w, SolveStatus::Optimal, gap, &run));
        }
        if let Centering::OutOfBudget = outcome {
            return Ok(finish(&w, SolveStatus::MaxIter, gap, &run));
        }
        t *= opts.mu;
        stage += 1;
    }
}
