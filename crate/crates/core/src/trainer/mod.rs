//! Ridge baselines, the two convex sub-problems of the constrained fit, and
//! the alternating loop that exchanges constraint points between them.

mod lmi;

use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ccm::{update_constraint_set, violation, ConstraintPointReport, ConstraintSet};
use crate::conic::{solve_conic, ConicProblem, ConicSolution, SolveStatus, SolverOptions};
use crate::error::{Error, Result};
use crate::features::{sample_rff, RffBasis, DYNAMICS_FREQS, DYNAMICS_SIGMA, METRIC_FREQS, METRIC_SIGMA};
use crate::learned::{CertifiedModel, DynamicsModel, MetricModel};
use crate::linalg::{eig_extremes, svec_len, svec_pairs};
use crate::types::{Dataset, SeedStreams, StateVec, Stream, TrainerConfig};

use lmi::{Combo, ComboBlock, ComboLmi, SharedLmi, SvecBlock};

/// The three random-feature bases of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bases {
    pub f: RffBasis,
    pub w: RffBasis,
    /// Depends on the unactuated coordinates only.
    pub w_hat: RffBasis,
}

impl Bases {
    pub fn sample(streams: &SeedStreams, n: usize, m: usize) -> Result<Self> {
        let all: Vec<usize> = (0..n).collect();
        let unactuated: Vec<usize> = (0..n - m).collect();
        Ok(Self {
            f: sample_rff(&mut streams.rng(Stream::DynamicsFeatures), DYNAMICS_SIGMA, DYNAMICS_FREQS, n, &all)?,
            w: sample_rff(&mut streams.rng(Stream::MetricFeatures), METRIC_SIGMA, METRIC_FREQS, n, &all)?,
            w_hat: sample_rff(
                &mut streams.rng(Stream::MetricReducedFeatures),
                METRIC_SIGMA,
                METRIC_FREQS,
                n,
                &unactuated,
            )?,
        })
    }
}

fn design(data: &Dataset, basis: &RffBasis) -> DMatrix<f64> {
    let mut phi = DMatrix::zeros(data.len(), basis.dim());
    for (i, t) in data.tuples.iter().enumerate() {
        phi.set_row(i, &basis.phi(t.x.as_slice()).transpose());
    }
    phi
}

fn solve_normal(a: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = a.diagonal().amax();
    let singular = || {
        Error::Singular("ridge normal matrix is singular; use positive regularization weights (mu_f, mu_b > 0)".into())
    };
    let chol = a.cholesky().ok_or_else(singular)?;
    let pivot = chol.l_dirty().diagonal().min();
    if !(pivot * pivot > 1e-15 * scale) {
        return Err(singular());
    }
    Ok(chol.solve(rhs))
}

/// Row-wise ridge regression of `xdot` on the features (and, for actuated
/// rows, the controls), shrinking towards `prior` when given.
fn ridge_rows(
    data: &Dataset,
    mu_f: f64,
    mu_b: f64,
    basis: &RffBasis,
    prior: Option<&DynamicsModel>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if data.is_empty() {
        return Err(Error::Config("ridge regression needs at least one sample".into()));
    }
    if !(mu_f >= 0.0 && mu_b >= 0.0) {
        return Err(Error::Config(format!("regularization weights must be >= 0 (mu_f={mu_f}, mu_b={mu_b})")));
    }
    let n = basis.state_dim();
    let m = data.tuples[0].u.len();
    let d = basis.dim();
    let nd = data.len();
    let phi = design(data, basis);
    let u = DMatrix::from_fn(nd, m, |i, j| data.tuples[i].u[j]);
    let gram = phi.tr_mul(&phi);
    let mut alpha = DVector::zeros(d * n);
    let mut b = DMatrix::zeros(n, m);
    for k in 0..n {
        let y = DVector::from_fn(nd, |i, _| data.tuples[i].xdot[k]);
        let a0 = DVector::from_fn(d, |j, _| prior.map_or(0.0, |p| p.alpha[j * n + k]));
        let sol = if k < n - m {
            let a = &gram + DMatrix::identity(d, d) * mu_f;
            solve_normal(a, &(phi.tr_mul(&y) + &a0 * mu_f))?
        } else {
            let mut a = DMatrix::zeros(d + m, d + m);
            a.view_mut((0, 0), (d, d)).copy_from(&(&gram + DMatrix::identity(d, d) * mu_f));
            let pu = phi.tr_mul(&u);
            a.view_mut((0, d), (d, m)).copy_from(&pu);
            a.view_mut((d, 0), (m, d)).copy_from(&pu.transpose());
            a.view_mut((d, d), (m, m)).copy_from(&(u.tr_mul(&u) + DMatrix::identity(m, m) * mu_b));
            let b0 = DVector::from_fn(m, |j, _| prior.map_or(0.0, |p| p.b_consts[(k, j)]));
            let mut rhs = DVector::zeros(d + m);
            rhs.rows_mut(0, d).copy_from(&(phi.tr_mul(&y) + &a0 * mu_f));
            rhs.rows_mut(d, m).copy_from(&(u.tr_mul(&y) + b0 * mu_b));
            solve_normal(a, &rhs)?
        };
        for j in 0..d {
            alpha[j * n + k] = sol[j];
        }
        if k >= n - m {
            for j in 0..m {
                b[(k, j)] = sol[d + j];
            }
        }
    }
    Ok((alpha, b))
}

/// Closed-form ridge fit of `f = Phi' alpha` and a constant input matrix.
pub fn ridge_fit(data: &Dataset, mu_f: f64, mu_b: f64, f_basis: &RffBasis) -> Result<DynamicsModel> {
    let (alpha, b) = ridge_rows(data, mu_f, mu_b, f_basis, None)?;
    DynamicsModel::new(f_basis.clone(), alpha, b)
}

/// `sum_i |f(x_i) + B u_i - xdot_i|^2`
pub fn regression_loss(model: &DynamicsModel, data: &Dataset) -> f64 {
    data.tuples
        .iter()
        .map(|t| {
            let ev = model.eval(t.x.as_slice(), t.u.as_slice());
            (ev.xdot - DVector::from_column_slice(t.xdot.as_slice())).norm_squared()
        })
        .sum()
}

/// Mean squared prediction error per sample.
pub fn training_mse(model: &DynamicsModel, data: &Dataset) -> f64 {
    regression_loss(model, data) / data.len().max(1) as f64
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub j_d: f64,
    pub j_m: f64,
    pub active: usize,
    pub max_nu: f64,
    pub delta: f64,
    pub wall_time: f64,
    pub s_bar: f64,
    pub lambda: f64,
}

pub fn write_history_csv(path: &Path, history: &[IterationRecord]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["iteration", "J_d", "J_m", "active", "max_nu", "delta", "wall_time"])
        .map_err(io)?;
    for r in history {
        w.write_record([
            r.iteration.to_string(),
            r.j_d.to_string(),
            r.j_m.to_string(),
            r.active.to_string(),
            r.max_nu.to_string(),
            r.delta.to_string(),
            r.wall_time.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainingState {
    pub dynamics: DynamicsModel,
    pub metric: MetricModel,
    pub lambda: f64,
    /// Worst `lambda_max(F)` over all constraint points, with the rate margin.
    pub s_bar: f64,
    pub cs: ConstraintSet,
    /// Completed iterations.
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
}

/// Worst contraction-matrix eigenvalue over `points` at the effective rate.
pub fn worst_violation(dynamics: &DynamicsModel, metric: &MetricModel, lambda_eff: f64, points: &[StateVec]) -> f64 {
    points
        .iter()
        .map(|x| eig_extremes(&crate::ccm::assemble_f(dynamics, metric, lambda_eff, x)).1)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Violation reports over every constraint point at the certified rate.
pub fn constraint_reports(
    dynamics: &DynamicsModel,
    metric: &MetricModel,
    lambda: f64,
    points: &[StateVec],
    cfg: &TrainerConfig,
) -> Vec<ConstraintPointReport> {
    points
        .iter()
        .enumerate()
        .map(|(i, x)| violation(dynamics, metric, lambda, x, cfg.delta_wlow, cfg.eps_wlow, i))
        .collect()
}

impl TrainingState {
    /// Ridge dynamics, `W = I`, `lambda = delta_lambda` and a random initial
    /// active set.
    pub fn initial(data: &Dataset, points: Vec<StateVec>, bases: &Bases, cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let dynamics = ridge_fit(data, cfg.mu_f, cfg.mu_b, &bases.f)?;
        let m = dynamics.control_dim();
        let metric = MetricModel::constant(bases.w.clone(), bases.w_hat.clone(), m, 1.0);
        let lambda = cfg.delta_lambda;
        let s_bar = worst_violation(&dynamics, &metric, lambda + cfg.eps_lambda, &points);
        let mut rng = SeedStreams::new(cfg.seed).rng(Stream::ActiveSet);
        let cs = ConstraintSet {
            all_points: points,
            active: Vec::new(),
        }
        .with_random_active(cfg.nc0, &mut rng);
        Ok(Self {
            dynamics,
            metric,
            lambda,
            s_bar,
            cs,
            iteration: 0,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> CertifiedModel {
        CertifiedModel {
            dynamics: self.dynamics.clone(),
            metric: self.metric.clone(),
            lambda: self.lambda,
        }
    }

    fn active_points(&self) -> Vec<StateVec> {
        self.cs.active_points().copied().collect()
    }
}

fn solver_options(cfg: &TrainerConfig, hint: DVector<f64>) -> SolverOptions {
    SolverOptions {
        tol: cfg.solver_tol,
        max_iter: cfg.solver_max_iter,
        hint: Some(hint),
        ..SolverOptions::default()
    }
}

/// Runs `build(s_bar)` and retries with a padded slack cap when the solver
/// reports the cap infeasible (the previous iterate can sit exactly on it).
fn solve_with_cap(
    what: &str,
    s_bar: f64,
    cfg: &TrainerConfig,
    mut build: impl FnMut(f64) -> Result<(ConicProblem, DVector<f64>)>,
) -> Result<(ConicSolution, f64)> {
    let mut cap = s_bar;
    for attempt in 0..4 {
        let (prob, hint) = build(cap)?;
        let sol = solve_conic(&prob, &solver_options(cfg, hint))?;
        match sol.status {
            SolveStatus::Optimal => return Ok((sol, cap)),
            SolveStatus::MaxIter => {
                warn!("{what}: iteration cap reached (gap {:.3e}); using the last iterate", sol.gap);
                return Ok((sol, cap));
            }
            SolveStatus::Infeasible => {
                let padded = cap + (0.1 * cap.abs()).max(1e-3);
                warn!("{what}: infeasible with slack cap {cap:.4e} (attempt {attempt}); retrying with {padded:.4e}");
                cap = padded;
            }
        }
    }
    Err(Error::Solver(format!("{what}: no feasible point even after padding the slack cap to {cap:.4e}")))
}

/// Mid-point slack hints strictly inside `(max(lambda_max(F), 0), cap)`.
fn slack_hints(f_max: &[f64], cap: f64) -> Vec<f64> {
    f_max.iter().map(|&v| 0.5 * (v.max(0.0) + cap)).collect()
}

/// Result of the dynamics step.
#[derive(Debug, Clone)]
pub struct DynamicsStep {
    pub dynamics: DynamicsModel,
    pub lambda: f64,
    pub slacks: Vec<f64>,
    /// Regression loss plus regularization (slack cost excluded).
    pub objective: f64,
    pub newton_steps: usize,
}

/// Fits the dynamics with the metric held fixed. Rows of `f` that leave the
/// contraction matrix untouched (the actuated ones) and the input matrix are
/// solved in closed form; the remaining rows go through the conic solver.
pub fn dynamics_subproblem(data: &Dataset, ts: &TrainingState, cfg: &TrainerConfig) -> Result<DynamicsStep> {
    let basis = &ts.dynamics.f_basis;
    let n = ts.dynamics.state_dim();
    let m = ts.dynamics.control_dim();
    let kc = n - m;
    let d = basis.dim();
    let prior = (ts.iteration >= 1).then_some(&ts.dynamics);
    let (mut alpha, b) = ridge_rows(data, cfg.mu_f, cfg.mu_b, basis, prior)?;

    let active = ts.active_points();
    let na = active.len();
    let has_lmi = na > 0;
    let nl = kc * d;
    let lam_idx = nl;
    let ns = if has_lmi { nl + 1 } else { nl };

    // regression part of the constrained rows
    let phi = design(data, basis);
    let gram = phi.tr_mul(&phi);
    let reg_a = DMatrix::identity(d, d) * cfg.mu_f;
    let mut q_rows = Vec::with_capacity(kc);
    let mut c_const = 0.0;
    for k in 0..kc {
        let y = DVector::from_fn(data.len(), |i, _| data.tuples[i].xdot[k]);
        let a0 = DVector::from_fn(d, |j, _| prior.map_or(0.0, |p| p.alpha[j * n + k]));
        q_rows.push(-(phi.tr_mul(&y) + &a0 * cfg.mu_f) * 2.0);
        c_const += y.norm_squared() + cfg.mu_f * a0.norm_squared();
    }

    // per-point data that does not depend on the slack cap
    struct PointData {
        c0: DVector<f64>,
        shared: DMatrix<f64>,
    }
    let lam_eff_margin = cfg.eps_lambda;
    let pairs = svec_pairs(kc);
    let len = svec_len(kc);
    let mut pts = Vec::with_capacity(na);
    for x in &active {
        let fe = basis.eval(x.as_slice());
        let w = ts.metric.w(x.as_slice());
        let dws: Vec<DMatrix<f64>> = (0..n)
            .map(|k| {
                let mut e = vec![0.0; n];
                e[k] = 1.0;
                ts.metric.eval(x.as_slice(), &e).1
            })
            .collect();
        // closed-form rows enter only through the constant
        let f_fixed: Vec<f64> = (kc..n)
            .map(|k| (0..d).map(|j| alpha[j * n + k] * fe.phi[j]).sum())
            .collect();
        let g: Vec<DVector<f64>> = (0..kc).map(|c| &fe.dphi * w.column(c)).collect();
        let mut shared = DMatrix::zeros(len, ns);
        let mut c0 = DVector::zeros(len);
        for (r, &(a, bb)) in pairs.iter().enumerate() {
            for k in 0..kc {
                // coefficient of alpha_k in F_ab, negated for S = sI - F
                let mut coef = &fe.phi * dws[k][(a, bb)];
                if k == a {
                    coef -= &g[bb];
                }
                if k == bb {
                    coef -= &g[a];
                }
                shared.view_mut((r, k * d), (1, d)).copy_from(&coef.transpose());
            }
            shared[(r, lam_idx)] = -2.0 * w[(a, bb)];
            c0[r] = -2.0 * lam_eff_margin * w[(a, bb)]
                + (kc..n).map(|k| f_fixed[k - kc] * dws[k][(a, bb)]).sum::<f64>();
        }
        pts.push(PointData { c0, shared });
    }
    let diag: DVector<f64> = DVector::from_iterator(len, pairs.iter().map(|&(a, bb)| if a == bb { 1.0 } else { 0.0 }));

    let mut z_prev = DVector::zeros(ns);
    for k in 0..kc {
        for j in 0..d {
            z_prev[k * d + j] = ts.dynamics.alpha[j * n + k];
        }
    }
    if has_lmi {
        z_prev[lam_idx] = ts.lambda.max(cfg.delta_lambda + 1e-4);
    }

    let build = |cap: f64| -> Result<(ConicProblem, DVector<f64>)> {
        let slacks = has_lmi && cap > 0.0;
        let nv = ns + if slacks { na } else { 0 };
        let mut prob = ConicProblem::new(nv);
        for k in 0..kc {
            prob.p.view_mut((k * d, k * d), (d, d)).copy_from(&((&gram + &reg_a) * 2.0));
            prob.q.rows_mut(k * d, d).copy_from(&q_rows[k]);
        }
        prob.c = c_const;
        let mut hint = z_prev.clone().resize_vertically(nv, 0.0);
        if has_lmi {
            prob.add_inequality(vec![(lam_idx, -1.0)], -cfg.delta_lambda);
            let blocks: Vec<SvecBlock> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| SvecBlock {
                    dim: kc,
                    c0: p.c0.clone(),
                    shared: p.shared.clone(),
                    private: if slacks { vec![(ns + i, diag.clone())] } else { Vec::new() },
                })
                .collect();
            let lmi = SharedLmi { n_vars: nv, ns, blocks };
            if slacks {
                for i in 0..na {
                    prob.q[ns + i] = cfg.mu_s;
                    prob.add_inequality(vec![(ns + i, -1.0)], 0.0);
                    prob.add_inequality(vec![(ns + i, 1.0)], cap);
                }
                use crate::conic::LmiSet;
                let f_max: Vec<f64> = lmi.eval(&hint).iter().map(|s| -eig_extremes(s).0).collect();
                for (i, s) in slack_hints(&f_max, cap).into_iter().enumerate() {
                    hint[ns + i] = s;
                }
            }
            prob.add_psd(lmi);
        }
        Ok((prob, hint))
    };
    let (sol, _) = solve_with_cap("dynamics sub-problem", ts.s_bar, cfg, build)?;

    for k in 0..kc {
        for j in 0..d {
            alpha[j * n + k] = sol.z[k * d + j];
        }
    }
    let lambda = if has_lmi { sol.z[lam_idx] } else { ts.lambda };
    let slacks = sol.z.rows(ns, sol.z.len() - ns).iter().copied().collect();
    let dynamics = DynamicsModel::new(basis.clone(), alpha, b)?;
    let objective = dynamics_objective(&dynamics, data, prior, cfg);
    Ok(DynamicsStep {
        dynamics,
        lambda,
        slacks,
        objective,
        newton_steps: sol.newton_steps,
    })
}

fn dynamics_objective(model: &DynamicsModel, data: &Dataset, prior: Option<&DynamicsModel>, cfg: &TrainerConfig) -> f64 {
    let (da, db) = match prior {
        Some(p) => ((&model.alpha - &p.alpha).norm_squared(), (&model.b_consts - &p.b_consts).norm_squared()),
        None => (model.alpha.norm_squared(), model.b_consts.norm_squared()),
    };
    regression_loss(model, data) + cfg.mu_f * da + cfg.mu_b * db
}

/// Result of the metric step.
#[derive(Debug, Clone)]
pub struct MetricStep {
    pub metric: MetricModel,
    pub slacks: Vec<f64>,
    /// `(w_high - w_low) + mu_w |theta - theta_ref|^2 + |s|_1 / mu_s`
    pub objective: f64,
    pub newton_steps: usize,
}

/// Fits the dual metric with the dynamics and rate held fixed. With no
/// active points the sandwich bounds are unconstrained, so the metric is
/// returned unchanged.
pub fn metric_subproblem(ts: &TrainingState, cfg: &TrainerConfig) -> Result<MetricStep> {
    let mm = &ts.metric;
    let n = mm.state_dim();
    let m = mm.control_dim;
    let kc = n - m;
    let entries = mm.entries();
    let ne = entries.len();
    let delta_form = ts.iteration >= 1;
    let active = ts.active_points();
    let na = active.len();
    if na == 0 {
        return Ok(MetricStep {
            metric: mm.clone(),
            slacks: Vec::new(),
            objective: mm.w_high - mm.w_low + if delta_form { 0.0 } else { cfg.mu_w * theta_norm_sq(mm) },
            newton_steps: 0,
        });
    }

    let lens: Vec<usize> = entries
        .iter()
        .map(|e| if e.reduced { mm.w_hat_basis.dim() + 1 } else { mm.w_basis.dim() + 1 })
        .collect();
    let offsets: Vec<usize> = lens.iter().scan(0, |acc, l| {
        let o = *acc;
        *acc += l;
        Some(o)
    })
    .collect();
    let nt: usize = lens.iter().sum();
    let (wl, wh, s0) = (nt, nt + 1, nt + 2);
    let entry_at = |i: usize, j: usize| {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * n - i * (i + 1) / 2 + j
    };

    let mut theta_prev = DVector::zeros(nt);
    for (e, entry) in entries.iter().enumerate() {
        theta_prev.rows_mut(offsets[e], lens[e]).copy_from(&mm.coeffs(entry));
    }

    // combos: value of every entry, then drift derivative of every reduced entry
    let reduced: Vec<usize> = (0..ne).filter(|&e| entries[e].reduced).collect();
    let der_combo = |e: usize| ne + reduced.iter().position(|&r| r == e).expect("reduced entry");
    let nk = ne + reduced.len();
    let mut gammas: Vec<DMatrix<f64>> = (0..nk)
        .map(|k| {
            let e = if k < ne { k } else { reduced[k - ne] };
            DMatrix::zeros(na, lens[e])
        })
        .collect();
    let zero_u = vec![0.0; m];
    let mut jacs = Vec::with_capacity(na);
    for (p, x) in active.iter().enumerate() {
        let ev = ts.dynamics.eval(x.as_slice(), &zero_u);
        let mf = mm.features(x.as_slice());
        let dred = &mf.dpsi_hat * &ev.f;
        for (e, entry) in entries.iter().enumerate() {
            let v = if entry.reduced { &mf.psi_hat } else { &mf.psi };
            gammas[e].set_row(p, &v.transpose());
        }
        for r in 0..reduced.len() {
            gammas[ne + r].set_row(p, &dred.transpose());
        }
        jacs.push(ev.jac);
    }
    let combos: Vec<Combo> = gammas
        .into_iter()
        .enumerate()
        .map(|(k, gamma)| {
            let e = if k < ne { k } else { reduced[k - ne] };
            Combo { offset: offsets[e], gamma }
        })
        .collect();

    let lam_eff = ts.lambda + cfg.eps_lambda;
    let pairs_f = svec_pairs(kc);
    let len_f = svec_len(kc);
    let len_w = svec_len(n);
    let diag_f = DVector::from_iterator(len_f, pairs_f.iter().map(|&(a, b)| if a == b { 1.0 } else { 0.0 }));
    let diag_w = DVector::from_iterator(len_w, svec_pairs(n).into_iter().map(|(a, b)| if a == b { 1.0 } else { 0.0 }));
    // coefficient of each combo in F at each point
    let f_coeffs: Vec<DMatrix<f64>> = jacs
        .iter()
        .map(|jac| {
            let mut c = DMatrix::zeros(len_f, nk);
            for (r, &(a, b)) in pairs_f.iter().enumerate() {
                c[(r, der_combo(entry_at(a, b)))] -= 1.0;
                for k in 0..n {
                    c[(r, entry_at(k, b))] += jac[(a, k)];
                    c[(r, entry_at(k, a))] += jac[(b, k)];
                }
                c[(r, entry_at(a, b))] += 2.0 * lam_eff;
            }
            c
        })
        .collect();
    let mut w_sel = DMatrix::zeros(len_w, nk);
    for e in 0..ne {
        w_sel[(e, e)] = 1.0;
    }

    // hint: previous coefficients with sandwich bounds just outside the
    // eigenvalue range over the active set
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in &active {
        let (a, b) = eig_extremes(&mm.w(x.as_slice()));
        lo = lo.min(a);
        hi = hi.max(b);
    }
    let spread = 1e-3 * (1.0 + hi.abs());

    let build = |cap: f64| -> Result<(ConicProblem, DVector<f64>)> {
        let slacks = cap > 0.0;
        let nv = s0 + if slacks { na } else { 0 };
        let mut prob = ConicProblem::new(nv);
        for i in 0..nt {
            prob.p[(i, i)] = 2.0 * cfg.mu_w;
        }
        if delta_form {
            prob.q.rows_mut(0, nt).copy_from(&(&theta_prev * (-2.0 * cfg.mu_w)));
            prob.c = cfg.mu_w * theta_prev.norm_squared();
        }
        prob.q[wl] = -1.0;
        prob.q[wh] = 1.0;
        prob.add_inequality(vec![(wl, -1.0)], -cfg.delta_wlow);
        let points: Vec<Vec<ComboBlock>> = f_coeffs
            .iter()
            .enumerate()
            .map(|(p, cf)| {
                vec![
                    ComboBlock {
                        dim: kc,
                        c0: DVector::zeros(len_f),
                        c: -cf,
                        private: if slacks { vec![(s0 + p, diag_f.clone())] } else { Vec::new() },
                    },
                    ComboBlock {
                        dim: n,
                        c0: &diag_w * -cfg.eps_wlow,
                        c: w_sel.clone(),
                        private: vec![(wl, -&diag_w)],
                    },
                    ComboBlock {
                        dim: n,
                        c0: DVector::zeros(len_w),
                        c: -&w_sel,
                        private: vec![(wh, diag_w.clone())],
                    },
                ]
            })
            .collect();
        let lmi = ComboLmi {
            n_vars: nv,
            combos: combos.clone(),
            points,
        };
        let mut hint = DVector::zeros(nv);
        hint.rows_mut(0, nt).copy_from(&theta_prev);
        hint[wl] = (lo - cfg.eps_wlow - spread).max(cfg.delta_wlow + 1e-6);
        hint[wh] = hi + spread;
        if slacks {
            for i in 0..na {
                prob.q[s0 + i] = 1.0 / cfg.mu_s;
                prob.add_inequality(vec![(s0 + i, -1.0)], 0.0);
                prob.add_inequality(vec![(s0 + i, 1.0)], cap);
            }
            use crate::conic::LmiSet;
            let blocks = lmi.eval(&hint);
            let f_max: Vec<f64> = blocks.iter().step_by(3).map(|s| -eig_extremes(s).0).collect();
            for (i, s) in slack_hints(&f_max, cap).into_iter().enumerate() {
                hint[s0 + i] = s;
            }
        }
        prob.add_psd(lmi);
        Ok((prob, hint))
    };
    let (sol, _) = solve_with_cap("metric sub-problem", ts.s_bar, cfg, build)?;

    let mut theta = mm.theta.clone();
    let mut theta_hat = mm.theta_hat.clone();
    for (e, entry) in entries.iter().enumerate() {
        let col = sol.z.rows(offsets[e], lens[e]);
        if entry.reduced {
            theta_hat.set_column(entry.col, &col);
        } else {
            theta.set_column(entry.col, &col);
        }
    }
    let (w_low, w_high) = (sol.z[wl], sol.z[wh].max(sol.z[wl]));
    let metric = MetricModel::new(
        mm.w_basis.clone(),
        mm.w_hat_basis.clone(),
        theta,
        theta_hat,
        w_low,
        w_high,
        m,
    )?;
    let slacks: Vec<f64> = sol.z.rows(s0, sol.z.len() - s0).iter().copied().collect();
    Ok(MetricStep {
        metric,
        objective: sol.objective,
        slacks,
        newton_steps: sol.newton_steps,
    })
}

fn theta_norm_sq(mm: &MetricModel) -> f64 {
    mm.theta.norm_squared() + mm.theta_hat.norm_squared()
}

/// Largest absolute parameter change over `alpha`, the input columns, the
/// metric coefficient columns and the rate.
pub fn parameter_change(a: &CertifiedModel, b: &CertifiedModel) -> f64 {
    let inf = |x: f64, y: f64| x.max(y);
    let mut delta = (&a.dynamics.alpha - &b.dynamics.alpha).amax();
    for j in 0..a.dynamics.b_consts.ncols() {
        delta = inf(delta, (a.dynamics.b_consts.column(j) - b.dynamics.b_consts.column(j)).amax());
    }
    for j in 0..a.metric.theta.ncols() {
        delta = inf(delta, (a.metric.theta.column(j) - b.metric.theta.column(j)).amax());
    }
    for j in 0..a.metric.theta_hat.ncols() {
        delta = inf(delta, (a.metric.theta_hat.column(j) - b.metric.theta_hat.column(j)).amax());
    }
    inf(delta, (a.lambda - b.lambda).abs())
}

impl TrainingState {
    /// One alternation: dynamics step, metric step, violation scan and
    /// exchange update. Returns the new record; convergence is judged by
    /// the caller.
    pub fn step(&mut self, data: &Dataset, cfg: &TrainerConfig) -> Result<IterationRecord> {
        let start = Instant::now();
        let k = self.iteration + 1;
        let before = self.model();
        let ds = dynamics_subproblem(data, self, cfg)
            .map_err(|e| Error::Solver(format!("iteration {k}, dynamics step: {e}")))?;
        // the metric step sees the new dynamics and rate but the old
        // parameters as its regularization anchor
        let mut mid = self.clone();
        mid.dynamics = ds.dynamics.clone();
        mid.lambda = ds.lambda;
        let ms = metric_subproblem(&mid, cfg).map_err(|e| Error::Solver(format!("iteration {k}, metric step: {e}")))?;
        self.dynamics = ds.dynamics;
        self.lambda = ds.lambda;
        self.metric = ms.metric;
        let reports = constraint_reports(&self.dynamics, &self.metric, self.lambda, &self.cs.all_points, cfg);
        let max_nu = reports.iter().map(|r| r.nu).fold(f64::NEG_INFINITY, f64::max);
        self.s_bar = worst_violation(&self.dynamics, &self.metric, self.lambda + cfg.eps_lambda, &self.cs.all_points);
        let delta = parameter_change(&before, &self.model());
        let active_used = self.cs.active.len();
        self.cs = update_constraint_set(&self.cs, &reports, cfg.delta_discard, cfg.k_max_add)?;
        self.iteration = k;
        let record = IterationRecord {
            iteration: k,
            j_d: ds.objective,
            j_m: ms.objective,
            active: active_used,
            max_nu,
            delta,
            wall_time: start.elapsed().as_secs_f64(),
            s_bar: self.s_bar,
            lambda: self.lambda,
        };
        info!(
            "iteration {k}: J_d {:.5e} J_m {:.5e} |active| {} max nu {:.4e} delta {:.3e} lambda {:.4} newton {}+{} ({:.1} s)",
            record.j_d,
            record.j_m,
            record.active,
            record.max_nu,
            record.delta,
            record.lambda,
            ds.newton_steps,
            ms.newton_steps,
            record.wall_time
        );
        self.history.push(record.clone());
        if record.wall_time > cfg.iteration_time_limit {
            return Err(Error::Solver(format!(
                "iteration {k} took {:.1} s, over the {:.1} s guard; last record {record:?}",
                record.wall_time, cfg.iteration_time_limit
            )));
        }
        Ok(record)
    }
}

/// The alternating constrained fit. `points` is the constraint set `X_c` and
/// must contain every training state.
pub fn sndl_fit(
    data: &Dataset,
    points: Vec<StateVec>,
    bases: &Bases,
    cfg: &TrainerConfig,
) -> Result<(CertifiedModel, Vec<IterationRecord>)> {
    if data.is_empty() {
        return Err(Error::Config("training needs at least one sample".into()));
    }
    for t in &data.tuples {
        if !points.iter().any(|p| p == &t.x) {
            return Err(Error::Config("constraint points must include every training state".into()));
        }
    }
    let mut ts = TrainingState::initial(data, points, bases, cfg)?;
    while ts.iteration < cfg.n_max {
        let rec = ts.step(data, cfg)?;
        if rec.delta < cfg.eps_converge || rec.max_nu < cfg.eps_converge {
            break;
        }
    }
    Ok((ts.model(), ts.history))
}
