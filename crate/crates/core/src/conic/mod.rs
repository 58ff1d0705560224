//! Convex quadratic programs with linear and linear-matrix-inequality
//! constraints:
//!
//! ```text
//! minimize    1/2 z'Pz + q'z + c
//! subject to  G z <= h,  A z = b,  S_k(z) = C0_k + sum_i z_i C_ik  PSD
//! ```
//!
//! PSD constraints are supplied through [`LmiSet`], which lets callers
//! exploit structure when assembling barrier Hessians; [`DenseLmi`] is the
//! plain `C0 + sum z_i C_i` form.

mod barrier;
mod pd;

pub use barrier::solve_conic;

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A family of affine symmetric-matrix maps of the decision vector.
pub trait LmiSet {
    fn n_vars(&self) -> usize;
    fn block_dims(&self) -> Vec<usize>;
    /// Every block evaluated at `z`.
    fn eval(&self, z: &DVector<f64>) -> Vec<DMatrix<f64>>;
    /// `(sum_k tr(C_ik X_k))_i` for symmetric `X_k` (linear part only).
    fn adjoint(&self, xs: &[DMatrix<f64>]) -> DVector<f64>;
    /// `hess[i, j] += sum_k tr(X_k C_ik X_k C_jk)`.
    fn add_hessian(&self, xs: &[DMatrix<f64>], hess: &mut DMatrix<f64>);
}

/// One PSD block `C0 + sum_i z_i C_i` with dense coefficient matrices.
#[derive(Debug, Clone)]
pub struct DenseLmi {
    pub c0: DMatrix<f64>,
    /// One coefficient matrix per decision variable.
    pub coeffs: Vec<DMatrix<f64>>,
}

impl DenseLmi {
    pub fn new(c0: DMatrix<f64>, coeffs: Vec<DMatrix<f64>>) -> Result<Self> {
        let d = c0.nrows();
        let symmetric = |m: &DMatrix<f64>| m.shape() == (d, d) && (m - m.transpose()).amax() <= 1e-14 * (1.0 + m.amax());
        if !symmetric(&c0) || !coeffs.iter().all(symmetric) {
            return Err(Error::Dimension("LMI coefficients must be square, symmetric and equally sized".into()));
        }
        Ok(Self { c0, coeffs })
    }
}

impl LmiSet for DenseLmi {
    fn n_vars(&self) -> usize {
        self.coeffs.len()
    }
    fn block_dims(&self) -> Vec<usize> {
        vec![self.c0.nrows()]
    }
    fn eval(&self, z: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let mut s = self.c0.clone();
        for (c, zi) in self.coeffs.iter().zip(z.iter()) {
            s += c * *zi;
        }
        vec![s]
    }
    fn adjoint(&self, xs: &[DMatrix<f64>]) -> DVector<f64> {
        DVector::from_iterator(self.coeffs.len(), self.coeffs.iter().map(|c| c.dot(&xs[0])))
    }
    fn add_hessian(&self, xs: &[DMatrix<f64>], hess: &mut DMatrix<f64>) {
        let t: Vec<DMatrix<f64>> = self.coeffs.iter().map(|c| &xs[0] * c).collect();
        for i in 0..t.len() {
            for j in 0..=i {
                // tr(T_i T_j)
                let v = t[i].dot(&t[j].transpose());
                hess[(i, j)] += v;
                if i != j {
                    hess[(j, i)] += v;
                }
            }
        }
    }
}

/// Sparse rows of the inequality matrix `G`.
#[derive(Debug, Clone, Default)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn from_dense(g: &DMatrix<f64>) -> Self {
        let rows = (0..g.nrows())
            .map(|i| (0..g.ncols()).filter(|&j| g[(i, j)] != 0.0).map(|j| (j, g[(i, j)])).collect())
            .collect();
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Vec<(usize, f64)>) {
        self.rows.push(row);
    }

    pub fn mul(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.iter().map(|&(j, v)| v * z[j]).sum()))
    }
}

pub struct ConicProblem {
    pub n_vars: usize,
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub c: f64,
    pub g: SparseRows,
    pub h: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub psd: Vec<Box<dyn LmiSet>>,
}

impl std::fmt::Debug for ConicProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConicProblem")
            .field("n_vars", &self.n_vars)
            .field("n_ineq", &self.g.len())
            .field("n_eq", &self.a_eq.nrows())
            .field("psd_sets", &self.psd.len())
            .finish()
    }
}

impl ConicProblem {
    /// Unconstrained problem with zero objective over `n` variables.
    pub fn new(n: usize) -> Self {
        Self {
            n_vars: n,
            p: DMatrix::zeros(n, n),
            q: DVector::zeros(n),
            c: 0.0,
            g: SparseRows::default(),
            h: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            psd: Vec::new(),
        }
    }

    /// Adds `row . z <= bound`.
    pub fn add_inequality(&mut self, row: Vec<(usize, f64)>, bound: f64) {
        self.g.push(row);
        self.h = self.h.clone().insert_row(self.h.len(), bound);
    }

    pub fn add_equality(&mut self, row: &[f64], value: f64) {
        let k = self.a_eq.nrows();
        self.a_eq = self.a_eq.clone().insert_row(k, 0.0);
        self.a_eq.row_mut(k).copy_from_slice(row);
        self.b_eq = self.b_eq.clone().insert_row(k, value);
    }

    pub fn add_psd(&mut self, lmi: impl LmiSet + 'static) {
        self.psd.push(Box::new(lmi));
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + self.q.dot(z) + self.c
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars;
        if self.p.shape() != (n, n) || self.q.len() != n || self.a_eq.ncols() != n {
            return Err(Error::Dimension("objective or equality shapes do not match n_vars".into()));
        }
        if self.g.len() != self.h.len() || self.a_eq.nrows() != self.b_eq.len() {
            return Err(Error::Dimension("constraint right-hand sides do not match".into()));
        }
        if self.g.rows.iter().flatten().any(|&(j, _)| j >= n) {
            return Err(Error::Dimension("inequality row references a missing variable".into()));
        }
        if (&self.p - self.p.transpose()).amax() > 1e-12 * (1.0 + self.p.amax()) {
            return Err(Error::Domain("P must be symmetric".into()));
        }
        if let Some(bad) = self.psd.iter().find(|s| s.n_vars() != n) {
            return Err(Error::Dimension(format!("LMI set over {} variables, problem has {n}", bad.n_vars())));
        }
        Ok(())
    }

    /// Plain-text dump for offline debugging: sizes, objective and linear
    /// constraints in full, and every PSD block evaluated at `z`.
    pub fn dump(&self, out: &mut impl Write, z: &DVector<f64>) -> std::io::Result<()> {
        writeln!(out, "n_vars {}", self.n_vars)?;
        writeln!(out, "objective_constant {}", self.c)?;
        writeln!(out, "q {:?}", self.q.as_slice())?;
        for i in 0..self.n_vars {
            writeln!(out, "P[{i}] {:?}", self.p.row(i).iter().collect::<Vec<_>>())?;
        }
        for (row, h) in self.g.rows.iter().zip(self.h.iter()) {
            writeln!(out, "ineq {row:?} <= {h}")?;
        }
        for i in 0..self.a_eq.nrows() {
            writeln!(out, "eq {:?} = {}", self.a_eq.row(i).iter().collect::<Vec<_>>(), self.b_eq[i])?;
        }
        for (k, set) in self.psd.iter().enumerate() {
            for (b, s) in set.eval(z).iter().enumerate() {
                writeln!(out, "psd {k}.{b} at z: {:?}", s.as_slice())?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    /// Worst violation of any linear or PSD constraint (0 when strictly
    /// feasible); for `Infeasible`, the Phase I certificate value.
    pub primal_residual: f64,
    /// Duality-gap bound at exit (`m / t` for the barrier method,
    /// `<s, y>` for the primal-dual method).
    pub gap: f64,
    /// Newton steps (barrier) or predictor-corrector iterations.
    pub newton_steps: usize,
    /// Barrier: objective after every accepted Newton step, tagged with the
    /// centering stage (Phase I stages are negative). Primal-dual: duality
    /// measure per iteration.
    pub barrier_trace: Vec<(i32, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Nesterov-Todd primal-dual path following (predictor-corrector).
    PrimalDual,
    /// Primal log-barrier method with a Phase I start.
    Barrier,
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub method: Method,
    /// Barrier parameter growth factor.
    pub mu: f64,
    /// Starting point; used directly when strictly feasible.
    pub hint: Option<DVector<f64>>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 200,
            method: Method::PrimalDual,
            mu: 20.0,
            hint: None,
        }
    }
}
