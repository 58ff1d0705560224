//! Ground-truth planar quadrotor (PVTOL) dynamics and fixed-step simulation.

use nalgebra::{DMatrix, DVector, Matrix6, Matrix6x2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::ControlAffine;
use crate::types::{ControlVec, StateVec, Trajectory, CONTROL_DIM, STATE_DIM};

/// State norm beyond which a rollout is declared divergent.
pub const BLOW_UP_NORM: f64 = 1e6;
/// Default integration step in s.
pub const DEFAULT_DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PvtolParams {
    /// Gravitational acceleration, m/s^2.
    pub g: f64,
    /// kg
    pub mass: f64,
    /// Thruster moment arm, m.
    pub arm_l: f64,
    /// Roll inertia, kg m^2.
    pub inertia_j: f64,
}

impl Default for PvtolParams {
    fn default() -> Self {
        Self {
            g: 9.81,
            mass: 0.486,
            arm_l: 0.25,
            inertia_j: 0.00383,
        }
    }
}

impl PvtolParams {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [self.g, self.mass, self.arm_l, self.inertia_j]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if all_positive {
            Ok(())
        } else {
            Err(Error::Config(format!("PVTOL parameters must be positive: {self:?}")))
        }
    }

    /// Per-thruster hover input `(m g / 2, m g / 2)`.
    pub fn hover_control(&self) -> ControlVec {
        ControlVec::repeat(0.5 * self.mass * self.g)
    }

    /// Constant input matrix; rows 1-4 are zero.
    pub fn input_matrix(&self) -> Matrix6x2<f64> {
        let mut b = Matrix6x2::zeros();
        b[(4, 0)] = 1.0 / self.mass;
        b[(4, 1)] = 1.0 / self.mass;
        b[(5, 0)] = self.arm_l / self.inertia_j;
        b[(5, 1)] = -self.arm_l / self.inertia_j;
        b
    }
}

fn drift(x: &StateVec, g: f64) -> StateVec {
    let (s, c) = x[2].sin_cos();
    let (vx, vz, w) = (x[3], x[4], x[5]);
    StateVec::new(
        vx * c - vz * s,
        vx * s + vz * c,
        w,
        vz * w - g * s,
        -vx * w - g * c,
        0.0,
    )
}

fn drift_jacobian(x: &StateVec, g: f64) -> Matrix6<f64> {
    let (s, c) = x[2].sin_cos();
    let (vx, vz, w) = (x[3], x[4], x[5]);
    let mut j = Matrix6::zeros();
    j[(0, 2)] = -vx * s - vz * c;
    j[(0, 3)] = c;
    j[(0, 4)] = -s;
    j[(1, 2)] = vx * c - vz * s;
    j[(1, 3)] = s;
    j[(1, 4)] = c;
    j[(2, 5)] = 1.0;
    j[(3, 2)] = -g * c;
    j[(3, 4)] = w;
    j[(3, 5)] = vz;
    j[(4, 2)] = g * s;
    j[(4, 3)] = -w;
    j[(4, 5)] = -vx;
    j
}

/// `xdot = f(x) + B u` for the PVTOL.
pub fn pvtol_dynamics(x: &StateVec, u: &ControlVec, p: &PvtolParams) -> Result<StateVec> {
    if !x.iter().chain(u.iter()).all(|v| v.is_finite()) {
        return Err(Error::Domain(format!("non-finite PVTOL input x={x:?} u={u:?}")));
    }
    Ok(drift(x, p.g) + p.input_matrix() * u)
}

/// Analytic `d xdot / dx`; the input matrix is constant so `u` drops out.
pub fn pvtol_jacobian(x: &StateVec, p: &PvtolParams) -> Matrix6<f64> {
    drift_jacobian(x, p.g)
}

/// The PVTOL as a [`ControlAffine`] system.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pvtol {
    pub params: PvtolParams,
}

impl Pvtol {
    pub fn new(params: PvtolParams) -> Self {
        Self { params }
    }
}

fn as_state(x: &DVector<f64>) -> StateVec {
    StateVec::from_column_slice(x.as_slice())
}

impl ControlAffine for Pvtol {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }
    fn control_dim(&self) -> usize {
        CONTROL_DIM
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(drift(&as_state(x), self.params.g).as_slice())
    }
    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let b = self.params.input_matrix();
        DMatrix::from_column_slice(STATE_DIM, CONTROL_DIM, b.as_slice())
    }
    fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let j = drift_jacobian(&as_state(x), self.params.g);
        DMatrix::from_column_slice(STATE_DIM, STATE_DIM, j.as_slice())
    }
}

fn rk4_step<F>(field: &F, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let k1 = field(x, u);
    let k2 = field(&(x + &k1 * (0.5 * h)), u);
    let k3 = field(&(x + &k2 * (0.5 * h)), u);
    let k4 = field(&(x + &k3 * h), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Classical RK4 rollout over `[0, horizon]` with the control held constant
/// over each step. The step is shrunk slightly so an integer number of steps
/// lands exactly on `horizon`.
///
/// Divergence is data: when the state norm exceeds [`BLOW_UP_NORM`] (or goes
/// non-finite) the rollout stops and `diverged_at` records the time.
pub fn simulate<F, P>(field: F, mut policy: P, x0: &DVector<f64>, horizon: f64, dt: f64) -> Result<Trajectory>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
    P: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    if !(dt > 0.0) || !(horizon >= dt) {
        return Err(Error::Config(format!("simulate needs dt > 0 and T >= dt (dt={dt}, T={horizon})")));
    }
    let steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
    let h = horizon / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps);
    times.push(0.0);
    states.push(x0.clone());
    let mut diverged_at = None;
    let mut x = x0.clone();
    for k in 0..steps {
        let t = k as f64 * h;
        let u = policy(t, &x);
        let next = rk4_step(&field, &x, &u, h);
        let t_next = (k + 1) as f64 * h;
        if !next.iter().all(|v| v.is_finite()) || next.norm() > BLOW_UP_NORM {
            diverged_at = Some(t_next);
            break;
        }
        controls.push(u);
        times.push(t_next);
        states.push(next.clone());
        x = next;
    }
    Ok(Trajectory {
        times,
        states,
        controls,
        diverged_at,
    })
}

/// Closed-loop rollout of the true PVTOL.
pub fn simulate_pvtol<P>(params: &PvtolParams, policy: P, x0: &StateVec, horizon: f64, dt: f64) -> Result<Trajectory>
where
    P: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let plant = Pvtol::new(*params);
    let x0 = DVector::from_column_slice(x0.as_slice());
    simulate(|x, u| plant.eval(x, u), policy, &x0, horizon, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn rest_state_falls_at_g() {
        let p = PvtolParams::default();
        let xd = pvtol_dynamics(&StateVec::zeros(), &ControlVec::zeros(), &p).unwrap();
        assert_eq!(xd, StateVec::new(0.0, 0.0, 0.0, 0.0, -p.g, 0.0));
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let p = PvtolParams::default();
        let xd = pvtol_dynamics(&StateVec::zeros(), &p.hover_control(), &p).unwrap();
        assert!(xd.amax() < 1e-15, "{xd:?}");
    }

    #[test]
    fn banked_ninety_degrees() {
        let p = PvtolParams::default();
        let mut x = StateVec::zeros();
        x[2] = FRAC_PI_2;
        let xd = pvtol_dynamics(&x, &ControlVec::zeros(), &p).unwrap();
        let expected = StateVec::new(0.0, 0.0, 0.0, -p.g, 0.0, 0.0);
        assert!((xd - expected).amax() < 1e-15);
    }

    #[test]
    fn non_finite_input_is_a_domain_error() {
        let mut x = StateVec::zeros();
        x[0] = f64::NAN;
        let err = pvtol_dynamics(&x, &ControlVec::zeros(), &PvtolParams::default()).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn zero_field_keeps_state() {
        let x0 = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let traj = simulate(|x, _u| x * 0.0, |_t, _x| DVector::from_vec(vec![3.0]), &x0, 1.0, 0.1).unwrap();
        assert!(traj.states.iter().all(|x| *x == x0));
        assert_eq!(traj.controls.len() + 1, traj.states.len());
        traj.validate().unwrap();
    }

    fn exp_error(dt: f64) -> f64 {
        let x0 = DVector::from_vec(vec![1.0]);
        let traj = simulate(|x, _u| x.clone(), |_t, _x| DVector::zeros(0), &x0, 1.0, dt).unwrap();
        (traj.final_state()[0] - std::f64::consts::E).abs()
    }

    #[test]
    fn rk4_exponential_accuracy() {
        assert!(exp_error(1e-3) < 1e-9);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let ratio = exp_error(0.1) / exp_error(0.05);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn free_fall_matches_closed_form() {
        let p = PvtolParams::default();
        let horizon = 2.0;
        let traj = simulate_pvtol(&p, |_t, _x| DVector::zeros(2), &StateVec::zeros(), horizon, DEFAULT_DT).unwrap();
        let xf = traj.final_state();
        assert_relative_eq!(xf[4], -p.g * horizon, epsilon = 1e-9);
        assert_relative_eq!(xf[1], -0.5 * p.g * horizon * horizon, epsilon = 1e-8);
    }

    #[test]
    fn blow_up_is_flagged_not_raised() {
        let x0 = DVector::from_vec(vec![1.0]);
        let traj = simulate(|x, _u| x * 50.0, |_t, _x| DVector::zeros(0), &x0, 1.0, 0.01).unwrap();
        let t = traj.diverged_at.expect("should diverge");
        assert!(t > 0.2 && t < 0.4, "{t}");
        traj.validate().unwrap();
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let p = PvtolParams::default();
        let plant = Pvtol::new(p);
        let x = DVector::from_vec(vec![0.3, -1.2, 0.7, 1.1, -0.4, 0.9]);
        let analytic = plant.drift_jacobian(&x);
        let h = 1e-6;
        for k in 0..6 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let col = (plant.drift(&xp) - plant.drift(&xm)) / (2.0 * h);
            for i in 0..6 {
                let a = analytic[(i, k)];
                assert!((col[i] - a).abs() <= 1e-6 * a.abs().max(1.0), "({i},{k}) {a} vs {}", col[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn dynamics_affine_in_u(
            x in prop::array::uniform6(-3.0f64..3.0),
            u1 in prop::array::uniform2(-5.0f64..5.0),
            u2 in prop::array::uniform2(-5.0f64..5.0),
            lam in 0.0f64..1.0,
        ) {
            let p = PvtolParams::default();
            let x = StateVec::from_row_slice(&x);
            let u1 = ControlVec::from_row_slice(&u1);
            let u2 = ControlVec::from_row_slice(&u2);
            let mixed = pvtol_dynamics(&x, &(u1 * lam + u2 * (1.0 - lam)), &p).unwrap();
            let blend = pvtol_dynamics(&x, &u1, &p).unwrap() * lam + pvtol_dynamics(&x, &u2, &p).unwrap() * (1.0 - lam);
            prop_assert!((mixed - blend).amax() < 1e-12);
        }
    }
}
