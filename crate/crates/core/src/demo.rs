//! Demonstration data: random waypoint paths, perturbed minimum-snap
//! splines, an imperfect PD tracker on the true plant, then sub-sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{pvtol_dynamics, simulate_pvtol, PvtolParams, DEFAULT_DT};
use crate::types::{ControlVec, Dataset, SeedStreams, StateVec, Stream, Trajectory, TrainingTuple};

const COEFFS: usize = 8;

/// Piecewise degree-7 polynomials in `(p_x, p_z)`; each segment uses local
/// time starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolySpline {
    /// `segments[s][axis][k]` multiplies `t^k`.
    pub segments: Vec<[[f64; COEFFS]; 2]>,
    pub segment_times: Vec<f64>,
}

fn falling(k: usize, r: usize) -> f64 {
    (0..r).map(|i| (k - i) as f64).product()
}

/// Row of `d^r/dt^r t^k` evaluated at `t`.
fn deriv_row(t: f64, r: usize) -> [f64; COEFFS] {
    let mut row = [0.0; COEFFS];
    for (k, v) in row.iter_mut().enumerate().skip(r) {
        *v = falling(k, r) * t.powi((k - r) as i32);
    }
    row
}

impl PolySpline {
    pub fn duration(&self) -> f64 {
        self.segment_times.iter().sum()
    }

    /// `r`-th time derivative of the position at `t`, clamped to the
    /// spline's time range.
    pub fn eval(&self, t: f64, r: usize) -> [f64; 2] {
        let mut tl = t.max(0.0);
        let mut s = 0;
        while s + 1 < self.segments.len() && tl > self.segment_times[s] {
            tl -= self.segment_times[s];
            s += 1;
        }
        let tl = tl.min(self.segment_times[s]);
        let row = deriv_row(tl, r);
        let c = &self.segments[s];
        [0, 1].map(|a| row.iter().zip(c[a].iter()).map(|(x, y)| x * y).sum())
    }

    /// `sum_s int (d^4 p / dt^4)^2 dt` summed over both axes.
    pub fn snap_cost(&self) -> f64 {
        let mut total = 0.0;
        for (c, &t) in self.segments.iter().zip(&self.segment_times) {
            let h = snap_hessian(t);
            for axis in c {
                let v = DVector::from_column_slice(axis);
                total += 0.5 * v.dot(&(&h * &v));
            }
        }
        total
    }
}

/// Hessian of `int_0^T (p'''')^2 dt` in the monomial coefficients.
fn snap_hessian(t: f64) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(COEFFS, COEFFS);
    for k in 4..COEFFS {
        for l in 4..COEFFS {
            let p = (k + l - 7) as i32;
            h[(k, l)] = 2.0 * falling(k, 4) * falling(l, 4) * t.powi(p) / p as f64;
        }
    }
    h
}

/// Rest-to-rest minimum-snap spline through `waypoints` with the given
/// segment durations, from the KKT system of the equality-constrained QP.
pub fn min_snap_spline(waypoints: &[[f64; 2]], seg_times: &[f64]) -> Result<PolySpline> {
    if waypoints.len() < 2 || seg_times.len() != waypoints.len() - 1 {
        return Err(Error::Dimension(format!(
            "{} waypoints need {} segment times, got {}",
            waypoints.len(),
            waypoints.len().saturating_sub(1),
            seg_times.len()
        )));
    }
    if let Some(t) = seg_times.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(Error::Singular(format!("segment time {t} is not positive")));
    }
    let ns = seg_times.len();
    let nv = ns * COEFFS;
    let mut rows: Vec<(Vec<(usize, f64)>, [f64; 2])> = Vec::new();
    let dense = |s: usize, row: [f64; COEFFS], sign: f64| row.into_iter().enumerate().map(move |(k, v)| (s * COEFFS + k, sign * v));
    for (s, &t) in seg_times.iter().enumerate() {
        rows.push((dense(s, deriv_row(0.0, 0), 1.0).collect(), waypoints[s]));
        rows.push((dense(s, deriv_row(t, 0), 1.0).collect(), waypoints[s + 1]));
        if s + 1 < ns {
            for r in 1..4 {
                let mut row: Vec<_> = dense(s, deriv_row(t, r), 1.0).collect();
                row.extend(dense(s + 1, deriv_row(0.0, r), -1.0));
                rows.push((row, [0.0, 0.0]));
            }
        }
    }
    for r in 1..4 {
        rows.push((dense(0, deriv_row(0.0, r), 1.0).collect(), [0.0, 0.0]));
        rows.push((dense(ns - 1, deriv_row(seg_times[ns - 1], r), 1.0).collect(), [0.0, 0.0]));
    }
    let nc = rows.len();
    let mut kkt = DMatrix::zeros(nv + nc, nv + nc);
    for (s, &t) in seg_times.iter().enumerate() {
        kkt.view_mut((s * COEFFS, s * COEFFS), (COEFFS, COEFFS)).copy_from(&snap_hessian(t));
    }
    let mut rhs = DMatrix::zeros(nv + nc, 2);
    for (i, (row, b)) in rows.iter().enumerate() {
        for &(j, v) in row {
            kkt[(nv + i, j)] += v;
            kkt[(j, nv + i)] += v;
        }
        rhs[(nv + i, 0)] = b[0];
        rhs[(nv + i, 1)] = b[1];
    }
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("minimum-snap KKT system is singular".into()))?;
    if !sol.iter().all(|v| v.is_finite()) {
        return Err(Error::Singular("minimum-snap KKT system is singular".into()));
    }
    let segments = (0..ns)
        .map(|s| [0, 1].map(|a| std::array::from_fn(|k| sol[(s * COEFFS + k, a)])))
        .collect();
    Ok(PolySpline {
        segments,
        segment_times: seg_times.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdGains {
    pub kp_pos: f64,
    pub kd_pos: f64,
    pub kp_att: f64,
    pub kd_att: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self {
            kp_pos: 1.5,
            kd_pos: 2.0,
            kp_att: 30.0,
            kd_att: 8.0,
        }
    }
}

/// Largest commanded roll, rad.
const MAX_ROLL: f64 = 1.0;

/// Outer PD on position to a desired acceleration, the flat map to roll and
/// total thrust, inner PD on roll to differential thrust.
pub fn pd_control(spline: &PolySpline, p: &PvtolParams, gains: &PdGains, t: f64, x: &StateVec) -> ControlVec {
    let r = spline.eval(t, 0);
    let rd = spline.eval(t, 1);
    let rdd = spline.eval(t, 2);
    let (s, c) = x[2].sin_cos();
    let vel = [x[3] * c - x[4] * s, x[3] * s + x[4] * c];
    let acc: [f64; 2] = std::array::from_fn(|a| rdd[a] + gains.kp_pos * (r[a] - x[a]) + gains.kd_pos * (rd[a] - vel[a]));
    let (ax, az) = (acc[0], acc[1] + p.g);
    let roll_des = (-ax).atan2(az.max(0.1 * p.g)).clamp(-MAX_ROLL, MAX_ROLL);
    let thrust = p.mass * (ax * ax + az * az).sqrt();
    let roll_acc = gains.kp_att * (roll_des - x[2]) - gains.kd_att * x[5];
    let diff = p.inertia_j * roll_acc / p.arm_l;
    ControlVec::new(0.5 * (thrust + diff), 0.5 * (thrust - diff))
}

/// Closed-loop rollout of the true plant under [`pd_control`] over the
/// spline's duration.
pub fn pd_demonstrator(spline: &PolySpline, p: &PvtolParams, gains: &PdGains, x0: &StateVec) -> Result<Trajectory> {
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("initial state must be finite".into()));
    }
    let policy = |t: f64, x: &DVector<f64>| {
        let u = pd_control(spline, p, gains, t, &StateVec::from_column_slice(x.as_slice()));
        DVector::from_column_slice(u.as_slice())
    };
    simulate_pvtol(p, policy, x0, spline.duration(), DEFAULT_DT)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub n_waypoint_paths: usize,
    pub splines_per_path: usize,
    /// Waypoints per path are drawn from this inclusive range.
    pub waypoints_min: usize,
    pub waypoints_max: usize,
    /// Half-width of the square waypoint box, m.
    pub waypoint_box: f64,
    /// Std of the per-spline waypoint perturbation, m.
    pub waypoint_sigma: f64,
    /// Nominal cruise speed used to time segments, m/s.
    pub nominal_speed: f64,
    /// Segment times are scaled by `1 + U(-j, j)`.
    pub time_jitter_frac: f64,
    pub pd_gains: PdGains,
    /// Std of the initial-state perturbation, applied per coordinate.
    pub ic_sigma: f64,
    pub sample_dt: f64,
    /// Std of optional Gaussian noise on the `xdot` labels (0 = exact).
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            n_waypoint_paths: 10,
            splines_per_path: 5,
            waypoints_min: 3,
            waypoints_max: 5,
            waypoint_box: 5.0,
            waypoint_sigma: 0.3,
            nominal_speed: 1.5,
            time_jitter_frac: 0.2,
            pd_gains: PdGains::default(),
            ic_sigma: 0.2,
            sample_dt: 0.1,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl DemoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sample_dt > 0.0
            && self.waypoint_sigma >= 0.0
            && self.ic_sigma >= 0.0
            && self.label_noise >= 0.0
            && self.waypoint_box > 0.0
            && self.nominal_speed > 0.0
            && (0.0..1.0).contains(&self.time_jitter_frac)
            && self.waypoints_min >= 2
            && self.waypoints_min <= self.waypoints_max
            && self.n_waypoint_paths > 0
            && self.splines_per_path > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid demonstration config: {self:?}")))
        }
    }
}

/// Samples `(x, u, xdot)` from a rollout every `sample_dt`, strictly before
/// the final time.
pub fn sample_trajectory(
    traj: &Trajectory,
    p: &PvtolParams,
    sample_dt: f64,
    noise: Option<(&mut dyn rand::RngCore, f64)>,
) -> Result<Vec<TrainingTuple>> {
    let dt = traj.times.get(1).map_or(DEFAULT_DT, |t| t - traj.times[0]);
    let stride = (sample_dt / dt).round().max(1.0) as usize;
    let mut out = Vec::new();
    let mut noise = noise;
    let mut k = 0;
    while k < traj.controls.len() {
        let x = StateVec::from_column_slice(traj.states[k].as_slice());
        let u = ControlVec::from_column_slice(traj.controls[k].as_slice());
        let mut xdot = pvtol_dynamics(&x, &u, p)?;
        if let Some((rng, sigma)) = noise.as_mut() {
            if *sigma > 0.0 {
                let nd = Normal::new(0.0, *sigma).expect("positive std");
                for v in xdot.iter_mut() {
                    *v += nd.sample(&mut **rng);
                }
            }
        }
        out.push(TrainingTuple { t: traj.times[k], x, u, xdot });
        k += stride;
    }
    Ok(out)
}

/// The full demonstration pool for `cfg`.
pub fn build_dataset(cfg: &DemoConfig, p: &PvtolParams) -> Result<Dataset> {
    cfg.validate()?;
    p.validate()?;
    let streams = SeedStreams::new(cfg.seed);
    let mut wp_rng = streams.rng(Stream::Waypoints);
    let mut noise_rng = streams.rng(Stream::LabelNoise);
    let pert = Normal::new(0.0, cfg.waypoint_sigma.max(1e-300)).expect("valid std");
    let ic = Normal::new(0.0, cfg.ic_sigma.max(1e-300)).expect("valid std");
    let mut tuples = Vec::new();
    let mut ids = Vec::new();
    let mut attempted = 0;
    let mut diverged = 0;
    for path in 0..cfg.n_waypoint_paths {
        let count = wp_rng.random_range(cfg.waypoints_min..=cfg.waypoints_max);
        let base: Vec<[f64; 2]> = (0..count)
            .map(|_| [0, 1].map(|_| wp_rng.random_range(-cfg.waypoint_box..cfg.waypoint_box)))
            .collect();
        for k in 0..cfg.splines_per_path {
            let traj_id = path * cfg.splines_per_path + k;
            let mut rng = streams.indexed(Stream::InitialConditions, traj_id as u32);
            let wps: Vec<[f64; 2]> = base
                .iter()
                .map(|w| {
                    if cfg.waypoint_sigma > 0.0 {
                        [w[0] + pert.sample(&mut rng), w[1] + pert.sample(&mut rng)]
                    } else {
                        *w
                    }
                })
                .collect();
            let times: Vec<f64> = wps
                .windows(2)
                .map(|s| {
                    let dist = ((s[1][0] - s[0][0]).powi(2) + (s[1][1] - s[0][1]).powi(2)).sqrt();
                    let jitter = 1.0 + cfg.time_jitter_frac * rng.random_range(-1.0..=1.0);
                    (dist / cfg.nominal_speed).max(1.0) * jitter
                })
                .collect();
            let spline = min_snap_spline(&wps, &times)?;
            let mut x0 = StateVec::zeros();
            x0[0] = wps[0][0];
            x0[1] = wps[0][1];
            if cfg.ic_sigma > 0.0 {
                for v in x0.iter_mut() {
                    *v += ic.sample(&mut rng);
                }
            }
            attempted += 1;
            let traj = pd_demonstrator(&spline, p, &cfg.pd_gains, &x0)?;
            if traj.diverged() {
                diverged += 1;
                continue;
            }
            let noise: Option<(&mut dyn rand::RngCore, f64)> =
                (cfg.label_noise > 0.0).then_some((&mut noise_rng as &mut dyn rand::RngCore, cfg.label_noise));
            for t in sample_trajectory(&traj, p, cfg.sample_dt, noise)? {
                tuples.push(t);
                ids.push(traj_id);
            }
        }
    }
    if diverged == attempted {
        return Err(Error::Integration {
            time: 0.0,
            message: format!("all {attempted} demonstrations diverged; retune the PD gains"),
        });
    }
    Dataset::new(tuples, ids, cfg.sample_dt)
}
