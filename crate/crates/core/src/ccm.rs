//! Contraction LMI, violation scores and the exchange update of the active
//! constraint set.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::learned::{DynamicsModel, MetricModel};
use crate::linalg::eig_extremes;
use crate::types::StateVec;

/// Sampling box for extra constraint points: `[-5,5]^2 m x [-pi/3,pi/3] rad x
/// [-2,2]^2 m/s x [-1,1] rad/s`.
pub const STATE_BOX: [(f64, f64); 6] = [
    (-5.0, 5.0),
    (-5.0, 5.0),
    (-std::f64::consts::FRAC_PI_3, std::f64::consts::FRAC_PI_3),
    (-2.0, 2.0),
    (-2.0, 2.0),
    (-1.0, 1.0),
];

/// `B_perp^T (-d_f W + J W + W J^T + 2 lambda W) B_perp` with
/// `B_perp = [I; 0]`, i.e. the leading `k x k` block. `dw_f` is the
/// derivative of `W` along the drift.
pub fn f_matrix(jac: &DMatrix<f64>, w: &DMatrix<f64>, dw_f: &DMatrix<f64>, lambda_eff: f64, k: usize) -> DMatrix<f64> {
    let jw = jac.rows(0, k) * w.columns(0, k);
    let mut f = -dw_f.view((0, 0), (k, k)).clone_owned() + &jw + jw.transpose() + w.view((0, 0), (k, k)) * (2.0 * lambda_eff);
    // exact symmetry
    for i in 0..k {
        for j in 0..i {
            let v = 0.5 * (f[(i, j)] + f[(j, i)]);
            f[(i, j)] = v;
            f[(j, i)] = v;
        }
    }
    f
}

/// The contraction matrix of a model at `x`, for the effective rate
/// `lambda_eff` (callers add any rate margin themselves).
pub fn assemble_f(dynamics: &DynamicsModel, metric: &MetricModel, lambda_eff: f64, x: &StateVec) -> DMatrix<f64> {
    let n = dynamics.state_dim();
    let m = dynamics.control_dim();
    let zero_u = vec![0.0; m];
    let ev = dynamics.eval(x.as_slice(), &zero_u);
    let (w, dw) = metric.eval(x.as_slice(), ev.f.as_slice());
    f_matrix(&ev.jac, &w, &dw, lambda_eff, n - m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintPointReport {
    pub idx: usize,
    pub f_max_eig: f64,
    pub w_min_eig: f64,
    pub nu: f64,
}

/// `nu = max(lambda_max(F), (delta_w + eps_w) - lambda_min(W))`.
pub fn violation(
    dynamics: &DynamicsModel,
    metric: &MetricModel,
    lambda_eff: f64,
    x: &StateVec,
    delta_w: f64,
    eps_w: f64,
    idx: usize,
) -> ConstraintPointReport {
    let n = dynamics.state_dim();
    let m = dynamics.control_dim();
    let ev = dynamics.eval(x.as_slice(), &vec![0.0; m]);
    let (w, dw) = metric.eval(x.as_slice(), ev.f.as_slice());
    let f = f_matrix(&ev.jac, &w, &dw, lambda_eff, n - m);
    let f_max_eig = eig_extremes(&f).1;
    let w_min_eig = eig_extremes(&w).0;
    ConstraintPointReport {
        idx,
        f_max_eig,
        w_min_eig,
        nu: f_max_eig.max(delta_w + eps_w - w_min_eig),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub all_points: Vec<StateVec>,
    /// Sorted indices into `all_points`.
    pub active: Vec<usize>,
}

impl ConstraintSet {
    /// All training states followed by uniform samples from [`STATE_BOX`]
    /// up to `n_c` points in total.
    pub fn build<'a, R: Rng>(training: impl Iterator<Item = &'a StateVec>, n_c: usize, rng: &mut R) -> Self {
        let mut all_points: Vec<StateVec> = training.copied().collect();
        while all_points.len() < n_c {
            all_points.push(StateVec::from_fn(|i, _| rng.random_range(STATE_BOX[i].0..STATE_BOX[i].1)));
        }
        Self {
            all_points,
            active: Vec::new(),
        }
    }

    /// Random initial active set of `n0` distinct points.
    pub fn with_random_active<R: Rng>(mut self, n0: usize, rng: &mut R) -> Self {
        let n0 = n0.min(self.all_points.len());
        let mut active = rand::seq::index::sample(rng, self.all_points.len(), n0).into_vec();
        active.sort_unstable();
        self.active = active;
        self
    }

    pub fn active_points(&self) -> impl Iterator<Item = &StateVec> {
        self.active.iter().map(|&i| &self.all_points[i])
    }
}

/// Keeps active points with `nu > -delta` and adds the (at most `k_max`)
/// worst inactive violators with `nu > 0`; ties go to the lower index.
pub fn update_constraint_set(
    cs: &ConstraintSet,
    reports: &[ConstraintPointReport],
    delta: f64,
    k_max: usize,
) -> Result<ConstraintSet> {
    if reports.len() != cs.all_points.len() {
        return Err(Error::Dimension(format!(
            "{} reports for {} constraint points",
            reports.len(),
            cs.all_points.len()
        )));
    }
    let mut nu = vec![0.0; reports.len()];
    for r in reports {
        nu[r.idx] = r.nu;
    }
    let mut is_active = vec![false; nu.len()];
    for &i in &cs.active {
        is_active[i] = true;
    }
    let mut next: Vec<usize> = cs.active.iter().copied().filter(|&i| nu[i] > -delta).collect();
    let mut violators: Vec<usize> = (0..nu.len()).filter(|&i| !is_active[i] && nu[i] > 0.0).collect();
    violators.sort_by(|&a, &b| nu[b].total_cmp(&nu[a]).then(a.cmp(&b)));
    next.extend(violators.into_iter().take(k_max));
    next.sort_unstable();
    Ok(ConstraintSet {
        all_points: cs.all_points.clone(),
        active: next,
    })
}

pub fn write_reports_csv(path: &Path, reports: &[ConstraintPointReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["idx", "F_max_eig", "W_min_eig", "nu"])
        .map_err(|e| Error::io(path, e.into()))?;
    for r in reports {
        w.write_record([r.idx.to_string(), r.f_max_eig.to_string(), r.w_min_eig.to_string(), r.nu.to_string()])
            .map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
