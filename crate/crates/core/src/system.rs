//! The control-affine system interface shared by the true plant, learned
//! models and the small analytic test systems.

use nalgebra::{DMatrix, DVector};

/// `xdot = f(x) + B(x) u`.
///
/// Derivative methods have finite-difference defaults; implementors with
/// closed forms override them. `jacobian_x` and `drift_hessian_contract`
/// ignore any state dependence of `B`, which is exact for every system in
/// this crate (their input matrices are constant).
pub trait ControlAffine {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.input_matrix(x) * u
    }

    fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            let h = 1e-6 * (1.0 + x[k].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            jac.set_column(k, &((self.drift(&xp) - self.drift(&xm)) / (2.0 * h)));
        }
        jac
    }

    /// `d(f + B u)/dx`.
    fn jacobian_x(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.drift_jacobian(x)
    }

    /// `sum_k weights[k] * hess(f_k)(x)`, the curvature term of a Lagrangian.
    fn drift_hessian_contract(&self, x: &DVector<f64>, weights: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut hess = DMatrix::zeros(n, n);
        for k in 0..n {
            let h = 1e-5 * (1.0 + x[k].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let col = (self.drift_jacobian(&xp) - self.drift_jacobian(&xm)).transpose() * weights / (2.0 * h);
            hess.set_column(k, &col);
        }
        (&hess + hess.transpose()) * 0.5
    }
}

/// Linear time-invariant system `xdot = A x + B u`; used as an analytic
/// reference in tests and examples.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearSystem {
    /// `x1' = x2, x2' = u`.
    pub fn double_integrator() -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        }
    }
}

impl ControlAffine for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }
    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
    fn drift_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }
    fn drift_hessian_contract(&self, _x: &DVector<f64>, _w: &DVector<f64>) -> DMatrix<f64> {
        let n = self.state_dim();
        DMatrix::zeros(n, n)
    }
}

/// A Riemannian metric given through its dual `W(x) = M(x)^{-1}`.
pub trait RiemannianMetric {
    fn dim(&self) -> usize;
    /// `W(x)`, symmetric.
    fn dual(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Directional derivative `sum_k v_k dW/dx_k`.
    fn dual_directional(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64>;

    /// `M(x) = W(x)^{-1}`; fails if `W(x)` is not positive definite.
    fn metric(&self, x: &DVector<f64>) -> crate::Result<DMatrix<f64>> {
        invert_dual(&self.dual(x))
    }
}

/// Symmetrized inverse of a positive definite dual metric.
pub fn invert_dual(w: &DMatrix<f64>) -> crate::Result<DMatrix<f64>> {
    let (lo, _) = crate::linalg::eig_extremes(w);
    if !(lo > 0.0) {
        return Err(crate::Error::Certificate {
            message: "dual metric is not positive definite".into(),
            eigenvalue: lo,
        });
    }
    let m = w.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| crate::Error::Certificate {
        message: "dual metric Cholesky failed".into(),
        eigenvalue: lo,
    })?;
    Ok(crate::linalg::symmetrize(&m))
}

/// State-independent metric, `W` fixed.
#[derive(Debug, Clone)]
pub struct ConstantMetric {
    pub w: DMatrix<f64>,
}

impl RiemannianMetric for ConstantMetric {
    fn dim(&self) -> usize {
        self.w.nrows()
    }
    fn dual(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.w.clone()
    }
    fn dual_directional(&self, _x: &DVector<f64>, _v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dim(), self.dim())
    }
}
