//! Feature-parameterized dynamics `f(x) + B u` and dual metric `W(x)`.
//!
//! Dynamics coefficients use the Kronecker lift of the scalar features with
//! `I_n`: `f_k(x) = sum_j phi_j(x) alpha[j * n + k]`. Metric entries are
//! stored upper-triangular; entries inside the leading `(n - m)` block use the
//! reduced basis (no dependence on the last `m` states), the rest use the full
//! basis. Both metric feature maps carry one extra constant feature.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::RffBasis;
use crate::linalg::svec_pairs;
use crate::system::{ControlAffine, RiemannianMetric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    pub f_basis: RffBasis,
    /// Length `2s * n`.
    pub alpha: DVector<f64>,
    /// Constant input matrix, `n x m`; the first `n - m` rows are zero.
    pub b_consts: DMatrix<f64>,
}

/// Everything the trainer and planners need from one dynamics evaluation.
#[derive(Debug, Clone)]
pub struct DynamicsEval {
    pub f: DVector<f64>,
    pub b: DMatrix<f64>,
    pub xdot: DVector<f64>,
    /// `df/dx`
    pub jac: DMatrix<f64>,
}

impl DynamicsModel {
    pub fn new(f_basis: RffBasis, alpha: DVector<f64>, b_consts: DMatrix<f64>) -> Result<Self> {
        let n = f_basis.state_dim();
        if alpha.len() != f_basis.dim() * n {
            return Err(Error::Dimension(format!(
                "alpha has {} entries, expected {}",
                alpha.len(),
                f_basis.dim() * n
            )));
        }
        if b_consts.nrows() != n || b_consts.ncols() == 0 || b_consts.ncols() > n {
            return Err(Error::Dimension(format!("input matrix has shape {:?}", b_consts.shape())));
        }
        let m = b_consts.ncols();
        if b_consts.rows(0, n - m).iter().any(|v| *v != 0.0) {
            return Err(Error::Domain("input matrix must vanish on the first n - m rows".into()));
        }
        let sv = b_consts.rows(n - m, m).clone_owned().singular_values();
        if !(sv.min() > 1e-8) {
            return Err(Error::Domain(format!(
                "lower input block is singular (smallest singular value {:e})",
                sv.min()
            )));
        }
        Ok(Self {
            f_basis,
            alpha,
            b_consts,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.f_basis.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.b_consts.ncols()
    }

    /// `alpha` viewed as the `n x 2s` matrix `A` with `f(x) = A phi(x)`.
    pub fn alpha_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.state_dim(), self.f_basis.dim(), self.alpha.as_slice())
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> DynamicsEval {
        let a = self.alpha_matrix();
        let fe = self.f_basis.eval(x);
        let f = &a * &fe.phi;
        let jac = &a * &fe.dphi;
        let xdot = &f + &self.b_consts * DVector::from_column_slice(u);
        DynamicsEval {
            f,
            b: self.b_consts.clone(),
            xdot,
            jac,
        }
    }
}

impl ControlAffine for DynamicsModel {
    fn state_dim(&self) -> usize {
        DynamicsModel::state_dim(self)
    }
    fn control_dim(&self) -> usize {
        DynamicsModel::control_dim(self)
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.alpha_matrix() * self.f_basis.phi(x.as_slice())
    }
    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b_consts.clone()
    }
    fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.alpha_matrix() * self.f_basis.eval(x.as_slice()).dphi
    }
    fn drift_hessian_contract(&self, x: &DVector<f64>, weights: &DVector<f64>) -> DMatrix<f64> {
        let g = self.alpha_matrix().transpose() * weights;
        self.f_basis.hessian_contract(x.as_slice(), &g)
    }
}

/// One stored entry `(i, j)`, `i <= j`, of the dual metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricEntry {
    pub i: usize,
    pub j: usize,
    /// Uses the reduced basis (both indices inside the leading block).
    pub reduced: bool,
    /// Column in `theta_hat` (reduced) or `theta` (full).
    pub col: usize,
}

/// Upper-triangular entries of an `n x n` dual metric in row-major order.
pub fn metric_entries(n: usize, m: usize) -> Vec<MetricEntry> {
    let (mut nr, mut nf) = (0, 0);
    svec_pairs(n)
        .into_iter()
        .map(|(i, j)| {
            let reduced = j < n - m;
            let col = if reduced { &mut nr } else { &mut nf };
            let e = MetricEntry { i, j, reduced, col: *col };
            *col += 1;
            e
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricModel {
    pub w_basis: RffBasis,
    pub w_hat_basis: RffBasis,
    /// `(2s + 1) x (#full entries)`
    pub theta: DMatrix<f64>,
    /// `(2s + 1) x (#reduced entries)`
    pub theta_hat: DMatrix<f64>,
    pub w_low: f64,
    pub w_high: f64,
    /// Number of controls `m`; fixes the reduced block size `n - m`.
    pub control_dim: usize,
}

/// Metric features with the trailing constant feature.
#[derive(Debug, Clone)]
pub struct MetricFeatures {
    pub psi: DVector<f64>,
    pub dpsi: DMatrix<f64>,
    pub psi_hat: DVector<f64>,
    pub dpsi_hat: DMatrix<f64>,
}

fn with_constant(phi: &DVector<f64>, dphi: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let k = phi.len();
    let psi = phi.clone().insert_row(k, 1.0);
    let dpsi = dphi.clone().insert_row(k, 0.0);
    (psi, dpsi)
}

impl MetricModel {
    pub fn new(
        w_basis: RffBasis,
        w_hat_basis: RffBasis,
        theta: DMatrix<f64>,
        theta_hat: DMatrix<f64>,
        w_low: f64,
        w_high: f64,
        control_dim: usize,
    ) -> Result<Self> {
        let n = w_basis.state_dim();
        let entries = metric_entries(n, control_dim);
        let n_red = entries.iter().filter(|e| e.reduced).count();
        if theta.shape() != (w_basis.dim() + 1, entries.len() - n_red)
            || theta_hat.shape() != (w_hat_basis.dim() + 1, n_red)
        {
            return Err(Error::Dimension("metric coefficient shapes do not match the bases".into()));
        }
        if w_hat_basis.active_dims.iter().any(|&d| d >= n - control_dim) {
            return Err(Error::Domain("reduced metric basis depends on actuated states".into()));
        }
        if !(w_low <= w_high) {
            return Err(Error::Domain(format!("w_low {w_low} exceeds w_high {w_high}")));
        }
        Ok(Self {
            w_basis,
            w_hat_basis,
            theta,
            theta_hat,
            w_low,
            w_high,
            control_dim,
        })
    }

    /// `W(x) = c I` through the constant features.
    pub fn constant(w_basis: RffBasis, w_hat_basis: RffBasis, control_dim: usize, c: f64) -> Self {
        let n = w_basis.state_dim();
        let entries = metric_entries(n, control_dim);
        let n_red = entries.iter().filter(|e| e.reduced).count();
        let mut theta = DMatrix::zeros(w_basis.dim() + 1, entries.len() - n_red);
        let mut theta_hat = DMatrix::zeros(w_hat_basis.dim() + 1, n_red);
        for e in entries.iter().filter(|e| e.i == e.j) {
            if e.reduced {
                theta_hat[(w_hat_basis.dim(), e.col)] = c;
            } else {
                theta[(w_basis.dim(), e.col)] = c;
            }
        }
        Self {
            w_basis,
            w_hat_basis,
            theta,
            theta_hat,
            w_low: c,
            w_high: c,
            control_dim,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.w_basis.state_dim()
    }

    pub fn entries(&self) -> Vec<MetricEntry> {
        metric_entries(self.state_dim(), self.control_dim)
    }

    pub fn features(&self, x: &[f64]) -> MetricFeatures {
        let full = self.w_basis.eval(x);
        let red = self.w_hat_basis.eval(x);
        let (psi, dpsi) = with_constant(&full.phi, &full.dphi);
        let (psi_hat, dpsi_hat) = with_constant(&red.phi, &red.dphi);
        MetricFeatures {
            psi,
            dpsi,
            psi_hat,
            dpsi_hat,
        }
    }

    /// Coefficient column of an entry.
    pub fn coeffs(&self, e: &MetricEntry) -> nalgebra::DVectorView<'_, f64> {
        if e.reduced {
            self.theta_hat.column(e.col)
        } else {
            self.theta.column(e.col)
        }
    }

    /// `(W(x), dW/dx . v)`
    pub fn eval(&self, x: &[f64], v: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.state_dim();
        let mf = self.features(x);
        let v = DVector::from_column_slice(v);
        let dv = &mf.dpsi * &v;
        let dv_hat = &mf.dpsi_hat * &v;
        let mut w = DMatrix::zeros(n, n);
        let mut dw = DMatrix::zeros(n, n);
        for e in self.entries() {
            let c = self.coeffs(&e);
            let (val, der) = if e.reduced {
                (mf.psi_hat.dot(&c), dv_hat.dot(&c))
            } else {
                (mf.psi.dot(&c), dv.dot(&c))
            };
            w[(e.i, e.j)] = val;
            w[(e.j, e.i)] = val;
            dw[(e.i, e.j)] = der;
            dw[(e.j, e.i)] = der;
        }
        (w, dw)
    }

    pub fn w(&self, x: &[f64]) -> DMatrix<f64> {
        self.eval(x, &vec![0.0; self.state_dim()]).0
    }

    /// `M(x) = W(x)^{-1}`.
    pub fn metric_inverse(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        crate::system::invert_dual(&self.w(x))
    }
}

impl RiemannianMetric for MetricModel {
    fn dim(&self) -> usize {
        self.state_dim()
    }
    fn dual(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.w(x.as_slice())
    }
    fn dual_directional(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        self.eval(x.as_slice(), v.as_slice()).1
    }
}

/// Dynamics together with the dual metric and contraction rate certifying it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedModel {
    pub dynamics: DynamicsModel,
    pub metric: MetricModel,
    /// Contraction rate, 1/s.
    pub lambda: f64,
}
