//! Fixed-endpoint, fixed-horizon minimum-energy trajectories on a
//! control-affine model by Chebyshev-Gauss-Lobatto collocation and an SQP
//! with the exact Lagrangian Hessian.

use std::ops::SubAssign;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::ControlAffine;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChebGrid {
    pub n: usize,
    /// `cos(j pi / N)`, `j = 0..=N` (descending from 1 to -1).
    pub nodes: Vec<f64>,
    pub d: DMatrix<f64>,
    /// Clenshaw-Curtis weights on `[-1, 1]`.
    pub quad_w: Vec<f64>,
}

pub fn cheb_grid(n: usize) -> Result<ChebGrid> {
    if n < 2 {
        return Err(Error::Config(format!("Chebyshev grid needs N >= 2, got {n}")));
    }
    let pi = std::f64::consts::PI;
    let nodes: Vec<f64> = (0..=n).map(|j| (j as f64 * pi / n as f64).cos()).collect();
    let c = |j: usize| if j == 0 || j == n { 2.0 } else { 1.0 };
    let mut d = DMatrix::zeros(n + 1, n + 1);
    for i in 0..=n {
        for j in 0..=n {
            if i != j {
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                d[(i, j)] = c(i) / c(j) * sign / (nodes[i] - nodes[j]);
            }
        }
        // negative-sum trick: rows annihilate constants
        let s: f64 = (0..=n).filter(|&j| j != i).map(|j| d[(i, j)]).sum();
        d[(i, i)] = -s;
    }
    let theta: Vec<f64> = (0..=n).map(|j| j as f64 * pi / n as f64).collect();
    let mut w = vec![0.0; n + 1];
    let mut v = vec![1.0; n.saturating_sub(1)];
    let nf = n as f64;
    if n % 2 == 0 {
        w[0] = 1.0 / (nf * nf - 1.0);
        w[n] = w[0];
        for k in 1..n / 2 {
            for (i, vi) in v.iter_mut().enumerate() {
                *vi -= 2.0 * (2.0 * k as f64 * theta[i + 1]).cos() / (4.0 * (k * k) as f64 - 1.0);
            }
        }
        for (i, vi) in v.iter_mut().enumerate() {
            *vi -= (nf * theta[i + 1]).cos() / (nf * nf - 1.0);
        }
    } else {
        w[0] = 1.0 / (nf * nf);
        w[n] = w[0];
        for k in 1..=(n - 1) / 2 {
            for (i, vi) in v.iter_mut().enumerate() {
                *vi -= 2.0 * (2.0 * k as f64 * theta[i + 1]).cos() / (4.0 * (k * k) as f64 - 1.0);
            }
        }
    }
    for (i, vi) in v.iter().enumerate() {
        w[i + 1] = 2.0 * vi / nf;
    }
    Ok(ChebGrid { n, nodes, d, quad_w: w })
}

impl ChebGrid {
    /// Barycentric interpolation of node values at `tau` in `[-1, 1]`.
    pub fn interpolate(&self, values: &[DVector<f64>], tau: f64) -> DVector<f64> {
        let n = self.n;
        if let Some(j) = self.nodes.iter().position(|&t| (t - tau).abs() < 1e-14) {
            return values[j].clone();
        }
        let mut num = DVector::zeros(values[0].len());
        let mut den = 0.0;
        for j in 0..=n {
            let mut wj = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == n {
                wj *= 0.5;
            }
            let c = wj / (tau - self.nodes[j]);
            num += &values[j] * c;
            den += c;
        }
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajoptStatus {
    Converged,
    /// Iteration cap reached; the best iterate is returned.
    MaxIter,
    /// Line search or linear algebra broke down.
    Failed,
}

impl TrajoptStatus {
    pub fn label(&self) -> &'static str {
        match self {
            TrajoptStatus::Converged => "ok",
            TrajoptStatus::MaxIter => "max_iter",
            TrajoptStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlpConfig {
    /// Bound on the KKT residual (stationarity and collocation).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NlpConfig {
    fn default() -> Self {
        Self { tol: 1e-7, max_iter: 150 }
    }
}

/// Default collocation order.
pub const DEFAULT_NODES: usize = 30;

/// Horizon used for a transfer of `distance` m: `max(2, distance / 1.5)` s.
pub fn transfer_time(distance: f64) -> f64 {
    (distance / 1.5).max(2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalTrajectory {
    /// Node times, ascending from 0 to `T`.
    pub times: Vec<f64>,
    pub x_nodes: Vec<DVector<f64>>,
    pub u_nodes: Vec<DVector<f64>>,
    /// `int_0^T |u|^2 dt` by quadrature.
    pub cost: f64,
    pub kkt_residual: f64,
    /// Largest collocation defect over the nodes.
    pub collocation_residual: f64,
    pub status: TrajoptStatus,
    pub grid: ChebGrid,
}

impl NominalTrajectory {
    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }

    fn tau(&self, t: f64) -> f64 {
        (2.0 * t.clamp(0.0, self.horizon()) / self.horizon() - 1.0).clamp(-1.0, 1.0)
    }

    /// Nodes in grid order (descending `tau`).
    fn grid_order(v: &[DVector<f64>]) -> Vec<DVector<f64>> {
        v.iter().rev().cloned().collect()
    }

    /// Polynomial interpolant of the states; clamped outside `[0, T]`.
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        self.grid.interpolate(&Self::grid_order(&self.x_nodes), self.tau(t))
    }

    pub fn control_at(&self, t: f64) -> DVector<f64> {
        self.grid.interpolate(&Self::grid_order(&self.u_nodes), self.tau(t))
    }

    /// A constant trajectory at `x` with input `u`, used when no transfer
    /// is needed.
    pub fn constant(x: DVector<f64>, u: DVector<f64>, horizon: f64, grid: &ChebGrid) -> Self {
        let n = grid.n;
        let times = (0..=n).map(|j| horizon * (grid.nodes[n - j] + 1.0) / 2.0).collect();
        Self {
            times,
            x_nodes: vec![x; n + 1],
            cost: horizon * u.norm_squared(),
            u_nodes: vec![u; n + 1],
            kkt_residual: 0.0,
            collocation_residual: 0.0,
            status: TrajoptStatus::Converged,
            grid: grid.clone(),
        }
    }
}

struct Layout {
    n: usize,
    m: usize,
    nodes: usize,
}

impl Layout {
    fn x(&self, j: usize) -> usize {
        j * self.n
    }
    fn u(&self, j: usize) -> usize {
        self.nodes * self.n + j * self.m
    }
    fn len(&self) -> usize {
        self.nodes * (self.n + self.m)
    }
}

const MAX_RESTORATIONS: usize = 20;

/// Least-norm `d` with `A d = -c`.
fn min_norm_correction(a: &DMatrix<f64>, c: &DVector<f64>) -> DVector<f64> {
    let mut aat = a * a.transpose();
    for i in 0..aat.nrows() {
        aat[(i, i)] += 1e-12;
    }
    match aat.cholesky() {
        Some(ch) => -a.tr_mul(&ch.solve(c)),
        None => DVector::zeros(a.ncols()),
    }
}

/// Gauss-Newton steps on the constraint residual alone. True when the
/// residual dropped below `start`.
fn restore_feasibility(
    z: &mut DVector<f64>,
    constraints: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    jacobian: &dyn Fn(&DVector<f64>) -> DMatrix<f64>,
    start: f64,
) -> bool {
    let mut best = start;
    for _ in 0..10 {
        let c = constraints(z);
        let d = min_norm_correction(&jacobian(z), &c);
        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-6 {
            let cand = &*z + &d * alpha;
            let v = constraints(&cand).lp_norm(1);
            if v < (1.0 - 1e-4 * alpha) * c.lp_norm(1) {
                *z = cand;
                best = best.min(v);
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved || best < 1e-3 * start {
            break;
        }
    }
    best < 0.9 * start
}

/// Minimum-energy transfer `x0 -> xt` over `[0, horizon]` with collocation at
/// every grid node, started from the straight line between the endpoints.
pub fn solve_trajopt(
    model: &dyn ControlAffine,
    x0: &DVector<f64>,
    xt: &DVector<f64>,
    horizon: f64,
    grid: &ChebGrid,
    cfg: &NlpConfig,
) -> Result<NominalTrajectory> {
    let line = |t: f64| {
        let s = t / horizon;
        x0 * (1.0 - s) + xt * s
    };
    solve_trajopt_from(model, x0, xt, horizon, grid, cfg, &line)
}

/// As [`solve_trajopt`] with the initial state path `guess(t)`.
pub fn solve_trajopt_from(
    model: &dyn ControlAffine,
    x0: &DVector<f64>,
    xt: &DVector<f64>,
    horizon: f64,
    grid: &ChebGrid,
    cfg: &NlpConfig,
    guess: &dyn Fn(f64) -> DVector<f64>,
) -> Result<NominalTrajectory> {
    if !(horizon > 0.0) {
        return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
    }
    let n = model.state_dim();
    let m = model.control_dim();
    if x0.len() != n || xt.len() != n {
        return Err(Error::Dimension("boundary states do not match the model".into()));
    }
    let nn = grid.n + 1;
    let lay = Layout { n, m, nodes: nn };
    let nz = lay.len();
    let nc = nn * n + 2 * n;
    let scale = 2.0 / horizon;
    // grid node j sits at time T (tau_j + 1) / 2; node N is t = 0
    let mut z = DVector::zeros(nz);
    for j in 0..nn {
        let x = guess(horizon * (grid.nodes[j] + 1.0) / 2.0);
        if x.len() != n {
            return Err(Error::Dimension("initial guess does not match the model".into()));
        }
        z.rows_mut(lay.x(j), n).copy_from(&x);
    }
    for j in 0..nn {
        // hover-like control: cancel the drift as well as the inputs allow
        let x = z.rows(lay.x(j), n).clone_owned();
        let u = model.input_matrix(&x).svd(true, true).solve(&(-model.drift(&x)), 1e-12).unwrap_or_else(|_| DVector::zeros(m));
        z.rows_mut(lay.u(j), m).copy_from(&u);
    }
    let qw: Vec<f64> = grid.quad_w.iter().map(|w| w * horizon / 2.0).collect();

    let cost = |z: &DVector<f64>| -> f64 { (0..nn).map(|j| qw[j] * z.rows(lay.u(j), m).norm_squared()).sum() };
    let constraints = |z: &DVector<f64>| -> DVector<f64> {
        let mut c = DVector::zeros(nc);
        for j in 0..nn {
            let mut dx = DVector::zeros(n);
            for k in 0..nn {
                dx.axpy(scale * grid.d[(j, k)], &z.rows(lay.x(k), n), 1.0);
            }
            let x = z.rows(lay.x(j), n).clone_owned();
            let u = z.rows(lay.u(j), m).clone_owned();
            c.rows_mut(j * n, n).copy_from(&(dx - model.eval(&x, &u)));
        }
        c.rows_mut(nn * n, n).copy_from(&(z.rows(lay.x(nn - 1), n) - x0));
        c.rows_mut(nn * n + n, n).copy_from(&(z.rows(lay.x(0), n) - xt));
        c
    };
    let jacobian = |z: &DVector<f64>| -> DMatrix<f64> {
        let mut a = DMatrix::zeros(nc, nz);
        for j in 0..nn {
            let x = z.rows(lay.x(j), n).clone_owned();
            let u = z.rows(lay.u(j), m).clone_owned();
            for k in 0..nn {
                for i in 0..n {
                    a[(j * n + i, lay.x(k) + i)] += scale * grid.d[(j, k)];
                }
            }
            let jx = model.jacobian_x(&x, &u);
            let b = model.input_matrix(&x);
            for r in 0..n {
                for c in 0..n {
                    a[(j * n + r, lay.x(j) + c)] -= jx[(r, c)];
                }
                for c in 0..m {
                    a[(j * n + r, lay.u(j) + c)] -= b[(r, c)];
                }
            }
        }
        for i in 0..n {
            a[(nn * n + i, lay.x(nn - 1) + i)] = 1.0;
            a[(nn * n + n + i, lay.x(0) + i)] = 1.0;
        }
        a
    };
    let grad = |z: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(nz);
        for j in 0..nn {
            g.rows_mut(lay.u(j), m).copy_from(&(z.rows(lay.u(j), m) * (2.0 * qw[j])));
        }
        g
    };

    let mut nu = DVector::zeros(nc);
    let mut rho: f64 = 1.0;
    let mut status = TrajoptStatus::MaxIter;
    let mut kkt = f64::INFINITY;
    let mut restorations = 0;
    for _ in 0..cfg.max_iter {
        let c = constraints(&z);
        let a = jacobian(&z);
        let g = grad(&z);
        let stat = &g + a.tr_mul(&nu);
        kkt = stat.amax().max(c.amax());
        if kkt <= cfg.tol {
            status = TrajoptStatus::Converged;
            break;
        }
        // Lagrangian Hessian: cost plus collocation curvature
        let mut h = DMatrix::zeros(nz, nz);
        for j in 0..nn {
            for i in 0..m {
                h[(lay.u(j) + i, lay.u(j) + i)] = 2.0 * qw[j];
            }
            let x = z.rows(lay.x(j), n).clone_owned();
            let w = nu.rows(j * n, n).clone_owned();
            let curv = model.drift_hessian_contract(&x, &w);
            h.view_mut((lay.x(j), lay.x(j)), (n, n)).sub_assign(&curv);
        }
        let mut shift = 0.0;
        let mut step = None;
        for _ in 0..40 {
            let mut k = DMatrix::zeros(nz + nc, nz + nc);
            k.view_mut((0, 0), (nz, nz)).copy_from(&h);
            for i in 0..nz {
                k[(i, i)] += shift;
            }
            k.view_mut((nz, 0), (nc, nz)).copy_from(&a);
            k.view_mut((0, nz), (nz, nc)).copy_from(&a.transpose());
            for i in 0..nc {
                // tiny dual regularization keeps redundant rows solvable
                k[(nz + i, nz + i)] = -1e-12;
            }
            let mut rhs = DVector::zeros(nz + nc);
            rhs.rows_mut(0, nz).copy_from(&(-&g));
            rhs.rows_mut(nz, nc).copy_from(&(-&c));
            if let Some(sol) = k.lu().solve(&rhs) {
                let dz = sol.rows(0, nz).clone_owned();
                let curv = dz.dot(&(&h * &dz)) + shift * dz.norm_squared();
                if sol.iter().all(|v| v.is_finite()) && curv >= 1e-10 * dz.norm_squared() {
                    step = Some((dz, sol.rows(nz, nc).clone_owned()));
                    break;
                }
            }
            shift = if shift == 0.0 { 1e-6 } else { shift * 10.0 };
        }
        let Some((dz, nu_new)) = step else {
            status = TrajoptStatus::Failed;
            break;
        };
        rho = rho.max(nu_new.amax() * 1.5 + 1e-6);
        let merit = |z: &DVector<f64>| cost(z) + rho * constraints(z).lp_norm(1);
        let m0 = merit(&z);
        let slope = g.dot(&dz) + rho * ((&c + &a * &dz).lp_norm(1) - c.lp_norm(1));
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-10 {
            let cand = &z + &dz * alpha;
            if merit(&cand) <= m0 + 1e-4 * alpha * slope.min(0.0) {
                z = cand;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if slope.abs() < 1e-12 * (1.0 + m0.abs()) {
                // merit model flat at round-off level
                z += &dz;
                alpha = 1.0;
            } else if restore_feasibility(&mut z, &constraints, &jacobian, c.lp_norm(1)) {
                restorations += 1;
                if restorations > MAX_RESTORATIONS {
                    status = TrajoptStatus::Failed;
                    break;
                }
                continue;
            } else {
                status = TrajoptStatus::Failed;
                break;
            }
        }
        nu = &nu + (nu_new - &nu) * alpha;
    }
    if status == TrajoptStatus::MaxIter {
        // report the residual at the returned iterate
        let c = constraints(&z);
        let stat = grad(&z) + jacobian(&z).tr_mul(&nu);
        kkt = stat.amax().max(c.amax());
        if kkt <= cfg.tol {
            status = TrajoptStatus::Converged;
        }
    }
    let defects = constraints(&z);
    let collocation_residual = defects.rows(0, nn * n).amax();
    let idx: Vec<usize> = (0..nn).rev().collect();
    Ok(NominalTrajectory {
        times: idx.iter().map(|&j| horizon * (grid.nodes[j] + 1.0) / 2.0).collect(),
        x_nodes: idx.iter().map(|&j| z.rows(lay.x(j), n).clone_owned()).collect(),
        u_nodes: idx.iter().map(|&j| z.rows(lay.u(j), m).clone_owned()).collect(),
        cost: cost(&z),
        kkt_residual: kkt,
        collocation_residual,
        status,
        grid: grid.clone(),
    })
}
