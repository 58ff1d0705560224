//! Feedback around nominal trajectories: time-varying LQR and the geodesic
//! (control contraction metric) controller.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learned::CertifiedModel;
use crate::plant::simulate;
use crate::system::{ControlAffine, RiemannianMetric};
use crate::trajopt::{cheb_grid, NominalTrajectory};
use crate::types::Trajectory;

/// Riccati integration step, s.
/// Local error bound per RK4 sub-step, relative to `1 + max |P|`.
const RICCATI_TOL: f64 = 1e-10;

pub const RICCATI_DT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
}

impl LqrWeights {
    /// `Q = diag(10, 10, 10, 1, 1, 1)`, `R = I`, `Qf = 10 Q`.
    pub fn pvtol() -> Self {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 10.0, 10.0, 1.0, 1.0, 1.0]));
        Self {
            qf: &q * 10.0,
            q,
            r: DMatrix::identity(2, 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSchedule {
    pub times: Vec<f64>,
    pub k: Vec<DMatrix<f64>>,
    pub p: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    /// All-zero gains (open loop) on `times`.
    pub fn zero(times: Vec<f64>, n: usize, m: usize) -> Self {
        let len = times.len();
        Self {
            times,
            k: vec![DMatrix::zeros(m, n); len],
            p: vec![DMatrix::zeros(n, n); len],
        }
    }

    /// Linear interpolation in time, clamped at the ends.
    pub fn gain_at(&self, t: f64) -> DMatrix<f64> {
        let ts = &self.times;
        if t <= ts[0] {
            return self.k[0].clone();
        }
        if t >= ts[ts.len() - 1] {
            return self.k[ts.len() - 1].clone();
        }
        let i = ts.partition_point(|&s| s <= t) - 1;
        let a = (t - ts[i]) / (ts[i + 1] - ts[i]);
        &self.k[i] * (1.0 - a) + &self.k[i + 1] * a
    }
}

/// Backward RK4 integration of the Riccati equation along the linearization
/// of `model` about `nominal`; `K = R^{-1} B' P`.
pub fn tvlqr_gains(model: &dyn ControlAffine, nominal: &NominalTrajectory, w: &LqrWeights) -> Result<GainSchedule> {
    let n = model.state_dim();
    let m = model.control_dim();
    if w.q.shape() != (n, n) || w.qf.shape() != (n, n) || w.r.shape() != (m, m) {
        return Err(Error::Dimension("LQR weights do not match the model".into()));
    }
    let r_inv = w
        .r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("R must be positive definite".into()))?
        .inverse();
    let horizon = nominal.horizon();
    let steps = (horizon / RICCATI_DT).ceil().max(1.0) as usize;
    let h = horizon / steps as f64;
    let lin = |t: f64| {
        let x = nominal.state_at(t);
        let u = nominal.control_at(t);
        (model.jacobian_x(&x, &u), model.input_matrix(&x))
    };
    // dP/d(tau) with tau = T - t
    let rhs = |t: f64, p: &DMatrix<f64>| {
        let (a, b) = lin(t);
        let pb = p * &b;
        a.tr_mul(p) + p * &a - &pb * &r_inv * pb.transpose() + &w.q
    };
    let rk4 = |t: f64, p: &DMatrix<f64>, h: f64| {
        let k1 = rhs(t, p);
        let k2 = rhs(t - 0.5 * h, &(p + &k1 * (0.5 * h)));
        let k3 = rhs(t - 0.5 * h, &(p + &k2 * (0.5 * h)));
        let k4 = rhs(t - h, &(p + &k3 * h));
        p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    };
    let mut p = w.qf.clone();
    let mut ps = vec![p.clone()];
    // large gains make the equation stiff near t = T; each schedule interval
    // is crossed in RK4 sub-steps sized by step doubling
    let mut sub = h;
    for k in 0..steps {
        let t_end = horizon - (k + 1) as f64 * h;
        let mut t = horizon - k as f64 * h;
        while t > t_end + 1e-12 * horizon {
            let step = sub.min(t - t_end);
            let full = rk4(t, &p, step);
            let half = rk4(t - 0.5 * step, &rk4(t, &p, 0.5 * step), 0.5 * step);
            let err = (&full - &half).amax() / (1.0 + half.amax());
            if !(err <= RICCATI_TOL) && step > 1e-12 * horizon {
                sub = 0.5 * step;
                continue;
            }
            p = half;
            t -= step;
            if err < RICCATI_TOL / 64.0 {
                sub = (2.0 * step).min(h);
            }
        }
        let scale = 1.0 + p.amax();
        let asym = (&p - p.transpose()).amax();
        let lo = p.clone().symmetric_eigenvalues().min();
        if !p.iter().all(|v| v.is_finite()) || asym > 1e-6 * scale || lo < -1e-6 * scale {
            return Err(Error::Integration {
                time: t_end,
                message: format!("Riccati solution lost symmetry or definiteness (asymmetry {asym:.3e}, min eigenvalue {lo:.3e})"),
            });
        }
        p = (&p + p.transpose()) * 0.5;
        ps.push(p.clone());
    }
    ps.reverse();
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * h).collect();
    let k = times
        .iter()
        .zip(&ps)
        .map(|(&t, p)| {
            let (_, b) = lin(t);
            &r_inv * b.tr_mul(p)
        })
        .collect();
    Ok(GainSchedule { times, k, p: ps })
}

/// Rolls out `plant` from `x0` under `u = u*(t) - K(t)(x - x*(t))` over the
/// nominal horizon. Divergence is reported through the trajectory.
pub fn track_closed_loop(
    plant: &dyn ControlAffine,
    nominal: &NominalTrajectory,
    gains: &GainSchedule,
    x0: &DVector<f64>,
    dt: f64,
) -> Result<Trajectory> {
    let policy = |t: f64, x: &DVector<f64>| nominal.control_at(t) - gains.gain_at(t) * (x - nominal.state_at(t));
    simulate(|x, u| plant.eval(x, u), policy, x0, nominal.horizon(), dt)
}

/// Default number of curve nodes.
pub const GEODESIC_NODES: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Geodesic {
    /// Curve parameter at the nodes, ascending from 0 to 1.
    pub s: Vec<f64>,
    /// `gamma(s)`; the first node is `x*`, the last is `x`.
    pub nodes: Vec<DVector<f64>>,
    /// `d gamma / ds` at the nodes.
    pub tangents: Vec<DVector<f64>>,
    /// `int_0^1 gamma_s' M(gamma) gamma_s ds`.
    pub energy: f64,
}

struct CurveProblem<'a> {
    metric: &'a dyn RiemannianMetric,
    /// `d/ds` on the ascending nodes.
    d: DMatrix<f64>,
    /// Quadrature weights on `[0, 1]`.
    w: Vec<f64>,
    n: usize,
    nodes: usize,
    x0: DVector<f64>,
    x1: DVector<f64>,
}

impl CurveProblem<'_> {
    fn curve(&self, v: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut c = Vec::with_capacity(self.nodes);
        c.push(self.x0.clone());
        for j in 1..self.nodes - 1 {
            c.push(v.rows((j - 1) * self.n, self.n).clone_owned());
        }
        c.push(self.x1.clone());
        c
    }

    fn tangents(&self, c: &[DVector<f64>]) -> Vec<DVector<f64>> {
        (0..self.nodes)
            .map(|j| {
                let mut t = DVector::zeros(self.n);
                for (k, ck) in c.iter().enumerate() {
                    t.axpy(self.d[(j, k)], ck, 1.0);
                }
                t
            })
            .collect()
    }

    /// Energy and its gradient in the interior nodes.
    fn energy(&self, v: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let c = self.curve(v);
        let t = self.tangents(&c);
        let n = self.n;
        let mut e = 0.0;
        let mut g_full = vec![DVector::zeros(n); self.nodes];
        for j in 0..self.nodes {
            let m = self.metric.metric(&c[j])?;
            let md = &m * &t[j];
            e += self.w[j] * t[j].dot(&md);
            for k in 0..self.nodes {
                g_full[k].axpy(2.0 * self.w[j] * self.d[(j, k)], &md, 1.0);
            }
            // d/dx_l (d' M d) = -(M d)' dW/dx_l (M d)
            for l in 0..n {
                let mut el = DVector::zeros(n);
                el[l] = 1.0;
                let dw = self.metric.dual_directional(&c[j], &el);
                g_full[j][l] -= self.w[j] * md.dot(&(&dw * &md));
            }
        }
        let mut g = DVector::zeros((self.nodes - 2) * n);
        for j in 1..self.nodes - 1 {
            g.rows_mut((j - 1) * n, n).copy_from(&g_full[j]);
        }
        Ok((e, g))
    }
}

/// Minimum-energy curve from `x_star` to `x` under `M = W^{-1}`, by BFGS on
/// the interior nodes of a Chebyshev polynomial curve.
pub fn geodesic(metric: &dyn RiemannianMetric, x_star: &DVector<f64>, x: &DVector<f64>, n_nodes: usize) -> Result<Geodesic> {
    let n = metric.dim();
    if x_star.len() != n || x.len() != n {
        return Err(Error::Dimension("geodesic endpoints do not match the metric".into()));
    }
    if !x_star.iter().chain(x.iter()).all(|v| v.is_finite()) {
        return Err(Error::Domain("geodesic endpoints must be finite".into()));
    }
    let grid = cheb_grid(n_nodes.max(3) - 1)?;
    let nodes = grid.n + 1;
    // s = (1 + tau) / 2 with the grid order reversed so s ascends
    let d = DMatrix::from_fn(nodes, nodes, |i, j| 2.0 * grid.d[(nodes - 1 - i, nodes - 1 - j)]);
    let s: Vec<f64> = (0..nodes).map(|j| (1.0 + grid.nodes[nodes - 1 - j]) / 2.0).collect();
    let w: Vec<f64> = (0..nodes).map(|j| grid.quad_w[nodes - 1 - j] / 2.0).collect();
    let prob = CurveProblem {
        metric,
        d,
        w,
        n,
        nodes,
        x0: x_star.clone(),
        x1: x.clone(),
    };
    let mut v = DVector::zeros((nodes - 2) * n);
    for j in 1..nodes - 1 {
        v.rows_mut((j - 1) * n, n).copy_from(&(x_star + (x - x_star) * s[j]));
    }
    if (x - x_star).amax() > 0.0 {
        v = bfgs(|v| prob.energy(v), v, 1e-10, 200)?;
    }
    let (energy, _) = prob.energy(&v)?;
    let nodes_v = prob.curve(&v);
    let tangents = prob.tangents(&nodes_v);
    Ok(Geodesic {
        s,
        nodes: nodes_v,
        tangents,
        energy,
    })
}

/// BFGS with a backtracking Armijo search; stops on a small gradient or
/// when no decrease is possible.
fn bfgs(
    f: impl Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    mut x: DVector<f64>,
    gtol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let dim = x.len();
    let (mut fx, mut g) = f(&x)?;
    let mut h = DMatrix::<f64>::identity(dim, dim);
    for _ in 0..max_iter {
        if g.amax() <= gtol * (1.0 + fx.abs()) {
            break;
        }
        let mut p = -(&h * &g);
        if p.dot(&g) >= 0.0 {
            h = DMatrix::identity(dim, dim);
            p = -g.clone();
        }
        let slope = p.dot(&g);
        let mut step = 1.0;
        let mut next = None;
        while step > 1e-12 {
            let cand = &x + &p * step;
            // points where the metric is undefined count as a failed trial
            if let Ok((fc, gc)) = f(&cand) {
                if fc <= fx + 1e-4 * step * slope {
                    next = Some((cand, fc, gc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = next else { break };
        let sv = &xn - &x;
        let yv = &gn - &g;
        let sy = sv.dot(&yv);
        if sy > 1e-14 * sv.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            h += (&sv * sv.transpose()) * ((1.0 + rho * yhy) * rho) - (&hy * sv.transpose() + &sv * hy.transpose()) * rho;
        }
        x = xn;
        fx = fn_;
        g = gn;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcmFeedback {
    pub k: DVector<f64>,
    /// `E_d(k) = a + b' k`.
    pub a: f64,
    pub b: DVector<f64>,
}

/// Minimum-norm feedback `k` with `E_d(k) <= -2 lambda E` along `geo`.
pub fn ccm_feedback_with(
    model: &dyn ControlAffine,
    metric: &dyn RiemannianMetric,
    lambda: f64,
    x_star: &DVector<f64>,
    u_star: &DVector<f64>,
    x: &DVector<f64>,
    geo: &Geodesic,
) -> Result<CcmFeedback> {
    let m = model.control_dim();
    let d0 = &geo.tangents[0];
    let d1 = geo.tangents.last().expect("nonempty");
    let m_x = metric.metric(x)?;
    let m_star = metric.metric(x_star)?;
    let md1 = &m_x * d1;
    let a = 2.0 * md1.dot(&model.eval(x, u_star)) - 2.0 * d0.dot(&(&m_star * model.eval(x_star, u_star)));
    let b = model.input_matrix(x).tr_mul(&md1) * 2.0;
    let bound = -2.0 * lambda * geo.energy;
    if a <= bound {
        return Ok(CcmFeedback { k: DVector::zeros(m), a, b });
    }
    let bb = b.norm_squared();
    if !(bb > 0.0) {
        return Err(Error::Certificate {
            message: "no feedback satisfies the contraction inequality (input direction vanishes)".into(),
            eigenvalue: a - bound,
        });
    }
    let k = &b * (-(a - bound) / bb);
    Ok(CcmFeedback { k, a, b })
}

pub fn ccm_feedback(
    cm: &CertifiedModel,
    x_star: &DVector<f64>,
    u_star: &DVector<f64>,
    x: &DVector<f64>,
    geo: &Geodesic,
) -> Result<CcmFeedback> {
    ccm_feedback_with(&cm.dynamics, &cm.metric, cm.lambda, x_star, u_star, x, geo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{ConstantMetric, LinearSystem};
    use crate::trajopt::{solve_trajopt, NlpConfig};

    fn di_weights() -> LqrWeights {
        LqrWeights {
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(1, 1),
            qf: DMatrix::zeros(2, 2),
        }
    }

    fn rest(horizon: f64) -> NominalTrajectory {
        let g = cheb_grid(4).unwrap();
        NominalTrajectory::constant(DVector::zeros(2), DVector::zeros(1), horizon, &g)
    }

    #[test]
    fn double_integrator_steady_state_gain() {
        let sys = LinearSystem::double_integrator();
        let gs = tvlqr_gains(&sys, &rest(20.0), &di_weights()).unwrap();
        let k0 = &gs.k[0];
        assert!((k0[(0, 0)] - 1.0).abs() < 1e-3);
        assert!((k0[(0, 1)] - 3f64.sqrt()).abs() < 1e-3);
        let longer = tvlqr_gains(&sys, &rest(40.0), &di_weights()).unwrap();
        assert!((&longer.k[0] - k0).amax() < 1e-6);
        for p in &gs.p {
            assert!((p - p.transpose()).amax() <= 1e-8);
        }
    }

    #[test]
    fn zero_cost_gives_zero_gain() {
        let sys = LinearSystem::double_integrator();
        let w = LqrWeights {
            q: DMatrix::zeros(2, 2),
            r: DMatrix::identity(1, 1),
            qf: DMatrix::zeros(2, 2),
        };
        let gs = tvlqr_gains(&sys, &rest(3.0), &w).unwrap();
        assert!(gs.k.iter().all(|k| k.amax() == 0.0));
        assert!(gs.p.iter().all(|p| p.amax() == 0.0));
    }

    #[test]
    fn weight_scaling_leaves_gains() {
        let sys = LinearSystem::double_integrator();
        let w = di_weights();
        let scaled = LqrWeights {
            q: &w.q * 7.0,
            r: &w.r * 7.0,
            qf: &w.qf * 7.0,
        };
        let a = tvlqr_gains(&sys, &rest(5.0), &w).unwrap();
        let b = tvlqr_gains(&sys, &rest(5.0), &scaled).unwrap();
        for (ka, kb) in a.k.iter().zip(&b.k) {
            assert!((ka - kb).amax() <= 1e-10);
        }
    }

    #[test]
    fn matched_model_tracking_error_is_first_order_in_dt() {
        let sys = LinearSystem::double_integrator();
        let g = cheb_grid(20).unwrap();
        let nom = solve_trajopt(
            &sys,
            &DVector::from_vec(vec![0.0, 0.0]),
            &DVector::from_vec(vec![1.0, 0.0]),
            2.0,
            &g,
            &NlpConfig::default(),
        )
        .unwrap();
        let gs = tvlqr_gains(&sys, &nom, &di_weights()).unwrap();
        // only the zero-order hold on u separates the runs from the plan
        let worst = |dt: f64| {
            let tr = track_closed_loop(&sys, &nom, &gs, &nom.x_nodes[0], dt).unwrap();
            tr.times.iter().zip(&tr.states).map(|(t, x)| (x - nom.state_at(*t)).amax()).fold(0.0, f64::max)
        };
        let (e1, e2) = (worst(0.01), worst(0.005));
        assert!(e1 < 1e-2, "{e1}");
        assert!((e1 / e2 - 2.0).abs() < 0.2, "{e1} {e2}");
        // an initial offset decays under feedback
        let x0 = DVector::from_vec(vec![0.3, -0.2]);
        let tr = track_closed_loop(&sys, &nom, &gs, &x0, 0.01).unwrap();
        let end = (tr.final_state() - nom.state_at(2.0)).norm();
        assert!(end < (x0 - nom.state_at(0.0)).norm());
    }

    #[test]
    fn constant_metric_geodesic_is_straight() {
        let w = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5]);
        let metric = ConstantMetric { w: w.clone() };
        let a = DVector::from_vec(vec![0.1, -0.4, 1.0]);
        let b = DVector::from_vec(vec![1.3, 0.2, -0.5]);
        let geo = geodesic(&metric, &a, &b, GEODESIC_NODES).unwrap();
        let d = &b - &a;
        let expect = d.dot(&(w.clone().try_inverse().unwrap() * &d));
        assert!((geo.energy - expect).abs() < 1e-6);
        assert_eq!(geo.nodes[0], a);
        assert_eq!(geo.nodes[GEODESIC_NODES - 1], b);
        let same = geodesic(&metric, &a, &a, GEODESIC_NODES).unwrap();
        assert!(same.energy < 1e-20);
    }

    struct Warped;

    impl RiemannianMetric for Warped {
        fn dim(&self) -> usize {
            1
        }
        fn dual(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, (1.0 + x[0]).powi(-2))
        }
        fn dual_directional(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, -2.0 * (1.0 + x[0]).powi(-3) * v[0])
        }
    }

    #[test]
    fn warped_line_energy() {
        let geo = geodesic(&Warped, &DVector::from_vec(vec![0.0]), &DVector::from_vec(vec![1.0]), GEODESIC_NODES).unwrap();
        assert!((geo.energy - 2.25).abs() < 1e-4, "{}", geo.energy);
        // never worse than the straight line, whose energy is 7/3
        assert!(geo.energy <= 7.0 / 3.0);
    }

    #[test]
    fn scalar_feedback_matches_projection() {
        // xdot = x + u with M = 2 (W = 1/2), lambda = 1
        let sys = LinearSystem {
            a: DMatrix::from_element(1, 1, 1.0),
            b: DMatrix::from_element(1, 1, 1.0),
        };
        let metric = ConstantMetric { w: DMatrix::from_element(1, 1, 0.5) };
        let xs = DVector::from_vec(vec![0.0]);
        let us = DVector::from_vec(vec![0.0]);
        let x = DVector::from_vec(vec![1.0]);
        let geo = geodesic(&metric, &xs, &x, GEODESIC_NODES).unwrap();
        assert!((geo.energy - 2.0).abs() < 1e-10);
        let fb = ccm_feedback_with(&sys, &metric, 1.0, &xs, &us, &x, &geo).unwrap();
        // a = 2*1*2*1 - 0 = 4, b = 2*1*2*1 = 4, k = -(4 + 4)/16 * 4 = -2
        assert!((fb.a - 4.0).abs() < 1e-10);
        assert!((fb.b[0] - 4.0).abs() < 1e-10);
        assert!((fb.k[0] + 2.0).abs() < 1e-10);
        assert!(fb.a + fb.b.dot(&fb.k) <= -2.0 * 1.0 * geo.energy + 1e-9);
        let on = geodesic(&metric, &xs, &xs, GEODESIC_NODES).unwrap();
        let fb0 = ccm_feedback_with(&sys, &metric, 1.0, &xs, &us, &xs, &on).unwrap();
        assert_eq!(fb0.k[0], 0.0);
    }
}
