//! Infeasible-start primal-dual path following with Nesterov-Todd scaling
//! and a Mehrotra predictor-corrector step.
//!
//! Works on the equality-free core `min 1/2 w'Pw + q'w` with `Gw + s = h`,
//! `s >= 0` for the linear rows and `S_b = C0_b + L_b(w)` PSD for every
//! block, with duals `y >= 0` and `Y_b` PSD.

use nalgebra::{DMatrix, DVector};

use super::barrier::Core;
use super::SolveStatus;
use crate::linalg::{cholesky_regularized, cholesky_solve, symmetrize};

pub(super) struct Outcome {
    pub w: DVector<f64>,
    pub status: SolveStatus,
    /// `<s, y>` at exit.
    pub gap: f64,
    pub iterations: usize,
    /// Duality measure `<s, y> / degree` per iteration.
    pub trace: Vec<(i32, f64)>,
}

/// `R` with `R^{-1} S R^{-T} = R^T Y R = diag(lambda)`.
struct Scaling {
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    lambda: DVector<f64>,
    /// `(R R^T)^{-1}`
    w_inv: DMatrix<f64>,
}

fn nt_scaling(s: &DMatrix<f64>, y: &DMatrix<f64>) -> Option<Scaling> {
    let d = s.nrows();
    let l1 = s.clone().cholesky()?.unpack();
    let l2 = y.clone().cholesky()?.unpack();
    let svd = (l2.transpose() * &l1).svd(false, true);
    let v_t = svd.v_t?;
    let lambda = svd.singular_values;
    if lambda.iter().any(|l| !(*l > 0.0)) {
        return None;
    }
    let l1_inv = l1.solve_lower_triangular(&DMatrix::identity(d, d))?;
    let mut r = &l1 * v_t.transpose();
    let mut r_inv = &v_t * l1_inv;
    for k in 0..d {
        let sq = lambda[k].sqrt();
        r.column_mut(k).scale_mut(1.0 / sq);
        r_inv.row_mut(k).scale_mut(sq);
    }
    let w_inv = r_inv.tr_mul(&r_inv);
    Some(Scaling { r, r_inv, lambda, w_inv })
}

/// Largest `a <= big` with `x + a dx` PSD.
fn psd_step(x: &DMatrix<f64>, dx: &DMatrix<f64>, big: f64) -> f64 {
    let Some(chol) = x.clone().cholesky() else {
        return 0.0;
    };
    let l = chol.unpack();
    let d = x.nrows();
    let Some(li) = l.solve_lower_triangular(&DMatrix::identity(d, d)) else {
        return 0.0;
    };
    let m = symmetrize(&(&li * dx * li.transpose()));
    let e = m.symmetric_eigenvalues().min();
    if e >= -1.0 / big {
        big
    } else {
        -1.0 / e
    }
}

fn lp_step(x: &DVector<f64>, dx: &DVector<f64>, big: f64) -> f64 {
    x.iter().zip(dx.iter()).filter(|(_, d)| **d < 0.0).map(|(v, d)| -v / d).fold(big, f64::min)
}

type Blocks = Vec<Vec<DMatrix<f64>>>;

fn blocks_dot(a: &Blocks, b: &Blocks) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x.dot(y)).sum()
}

fn blocks_amax(a: &Blocks) -> f64 {
    a.iter().flatten().map(|x| x.amax()).fold(0.0, f64::max)
}

struct Direction {
    dw: DVector<f64>,
    ds_lp: DVector<f64>,
    dy_lp: DVector<f64>,
    ds: Blocks,
    dy: Blocks,
}

pub(super) fn run(core: &Core, start: DVector<f64>, tol: f64, max_iter: usize) -> Outcome {
    let n = core.n;
    let degree = core.barrier_degree as f64;
    let zero = DVector::zeros(n);
    let c0: Blocks = core.psd.iter().map(|set| set.eval(&zero)).collect();
    let linear = |w: &DVector<f64>| -> Blocks {
        core.psd
            .iter()
            .zip(&c0)
            .map(|(set, c)| set.eval(w).into_iter().zip(c).map(|(s, c)| s - c).collect())
            .collect()
    };
    let mut trace = Vec::new();

    if degree == 0.0 {
        let w = match cholesky_regularized(&core.p, 0.0) {
            Some((l, _)) => cholesky_solve(&l, &(-&core.q)),
            None => start,
        };
        return Outcome { w, status: SolveStatus::Optimal, gap: 0.0, iterations: 1, trace };
    }

    // interior start: shift the slacks to unit margin, unit duals
    let mut w = start;
    let mut s_lp = (&core.h - core.g.mul(&w)).map(|v| v.max(1.0));
    let mut y_lp = DVector::from_element(core.h.len(), 1.0);
    let mut s: Blocks = core
        .psd
        .iter()
        .map(|set| {
            set.eval(&w)
                .into_iter()
                .map(|mut b| {
                    let e = b.symmetric_eigenvalues().min();
                    if e < 1.0 {
                        for i in 0..b.nrows() {
                            b[(i, i)] += 1.0 - e;
                        }
                    }
                    b
                })
                .collect()
        })
        .collect();
    let mut y: Blocks = s.iter().map(|g| g.iter().map(|b| DMatrix::identity(b.nrows(), b.nrows())).collect()).collect();
    let q_scale = 1.0 + core.q.amax() + core.p.amax();

    for it in 0..max_iter {
        let lin_w = linear(&w);
        let rp_lp = core.g.mul(&w) + &s_lp - &core.h;
        let rp: Blocks = s
            .iter()
            .zip(&lin_w)
            .zip(&c0)
            .map(|((sg, lg), cg)| sg.iter().zip(lg).zip(cg).map(|((sb, lb), cb)| sb - lb - cb).collect())
            .collect();
        let mut gty = DVector::zeros(n);
        for (row, &yi) in core.g.rows.iter().zip(y_lp.iter()) {
            for &(j, v) in row {
                gty[j] += v * yi;
            }
        }
        for (set, yg) in core.psd.iter().zip(&y) {
            gty -= set.adjoint(yg);
        }
        let rd = &core.p * &w + &core.q + &gty;
        let gap = s_lp.dot(&y_lp) + blocks_dot(&s, &y);
        let mu = gap / degree;
        trace.push((it as i32, mu));
        let obj = core.objective(&w);
        let pres = rp_lp.amax().max(blocks_amax(&rp));
        if pres <= 0.1 * tol && rd.amax() <= tol * q_scale && gap <= tol * (1.0 + obj.abs()) {
            return Outcome { w, status: SolveStatus::Optimal, gap, iterations: it, trace };
        }
        // Farkas certificate: y >= 0, G'y ~ 0, h'y < 0
        let hy = core.h.dot(&y_lp) + blocks_dot(&c0, &y);
        if hy < 0.0 && gty.amax() <= 1e-9 * -hy && pres > tol {
            return Outcome { w, status: SolveStatus::Infeasible, gap, iterations: it, trace };
        }

        let ratio = y_lp.component_div(&s_lp);
        let mut scal = Vec::with_capacity(s.len());
        for (sg, yg) in s.iter().zip(&y) {
            let mut group = Vec::with_capacity(sg.len());
            for (sb, yb) in sg.iter().zip(yg) {
                match nt_scaling(sb, yb) {
                    Some(sc) => group.push(sc),
                    None => return Outcome { w, status: SolveStatus::MaxIter, gap, iterations: it, trace },
                }
            }
            scal.push(group);
        }
        let mut h = core.p.clone();
        for (row, &ri) in core.g.rows.iter().zip(ratio.iter()) {
            for &(j, v) in row {
                for &(k, u) in row {
                    h[(j, k)] += ri * v * u;
                }
            }
        }
        for (set, group) in core.psd.iter().zip(&scal) {
            let winv: Vec<DMatrix<f64>> = group.iter().map(|sc| sc.w_inv.clone()).collect();
            set.add_hessian(&winv, &mut h);
        }
        let Some((factor, _)) = cholesky_regularized(&h, 0.0) else {
            return Outcome { w, status: SolveStatus::MaxIter, gap, iterations: it, trace };
        };

        let solve = |rc_lp: &DVector<f64>, rc: &Blocks| -> Direction {
            let t_lp = (&rp_lp + rc_lp).component_mul(&ratio);
            let mut rhs = -&rd;
            for (row, &ti) in core.g.rows.iter().zip(t_lp.iter()) {
                for &(j, v) in row {
                    rhs[j] -= v * ti;
                }
            }
            for ((set, group), (rpg, rcg)) in core.psd.iter().zip(&scal).zip(rp.iter().zip(rc)) {
                let xs: Vec<DMatrix<f64>> = group
                    .iter()
                    .zip(rpg.iter().zip(rcg))
                    .map(|(sc, (a, b))| &sc.w_inv * (a + b) * &sc.w_inv)
                    .collect();
                rhs += set.adjoint(&xs);
            }
            let dw = cholesky_solve(&factor, &rhs);
            let gdw = core.g.mul(&dw);
            let dy_lp = (&gdw + &rp_lp + rc_lp).component_mul(&ratio);
            let ds_lp = -&rp_lp - &gdw;
            let ldw = linear(&dw);
            let mut ds = Vec::with_capacity(s.len());
            let mut dy = Vec::with_capacity(s.len());
            for (((group, lg), rpg), rcg) in scal.iter().zip(&ldw).zip(&rp).zip(rc) {
                let mut dsg = Vec::with_capacity(group.len());
                let mut dyg = Vec::with_capacity(group.len());
                for (((sc, l), a), b) in group.iter().zip(lg).zip(rpg).zip(rcg) {
                    dyg.push(symmetrize(&(&sc.w_inv * (a + b - l) * &sc.w_inv)));
                    dsg.push(l - a);
                }
                ds.push(dsg);
                dy.push(dyg);
            }
            Direction { dw, ds_lp, dy_lp, ds, dy }
        };
        let max_step = |d: &Direction| -> f64 {
            let mut a = lp_step(&s_lp, &d.ds_lp, 1e12).min(lp_step(&y_lp, &d.dy_lp, 1e12));
            for (sg, dg) in s.iter().zip(&d.ds) {
                for (sb, db) in sg.iter().zip(dg) {
                    a = a.min(psd_step(sb, db, 1e12));
                }
            }
            for (yg, dg) in y.iter().zip(&d.dy) {
                for (yb, db) in yg.iter().zip(dg) {
                    a = a.min(psd_step(yb, db, 1e12));
                }
            }
            a
        };

        // predictor
        let rc_lp = -&s_lp;
        let rc: Blocks = s.iter().map(|g| g.iter().map(|b| -b).collect()).collect();
        let aff = solve(&rc_lp, &rc);
        let a_aff = max_step(&aff).min(1.0);
        let mut gap_aff = (&s_lp + &aff.ds_lp * a_aff).dot(&(&y_lp + &aff.dy_lp * a_aff));
        for ((sg, dsg), (yg, dyg)) in s.iter().zip(&aff.ds).zip(y.iter().zip(&aff.dy)) {
            for ((sb, dsb), (yb, dyb)) in sg.iter().zip(dsg).zip(yg.iter().zip(dyg)) {
                gap_aff += (sb + dsb * a_aff).dot(&(yb + dyb * a_aff));
            }
        }
        let sigma = (gap_aff.max(0.0) / gap).powi(3).clamp(0.0, 1.0);
        let target = sigma * mu;

        // corrector with the second-order term
        let lam_lp = s_lp.component_mul(&y_lp).map(f64::sqrt);
        let rc_lp = DVector::from_fn(s_lp.len(), |i, _| {
            let sy = (s_lp[i] / y_lp[i]).sqrt();
            let dst = aff.ds_lp[i] / sy;
            let dyt = aff.dy_lp[i] * sy;
            let rho = (target - lam_lp[i] * lam_lp[i] - dst * dyt) / lam_lp[i];
            rho * sy
        });
        let rc: Blocks = scal
            .iter()
            .zip(aff.ds.iter().zip(&aff.dy))
            .map(|(group, (dsg, dyg))| {
                group
                    .iter()
                    .zip(dsg.iter().zip(dyg))
                    .map(|(sc, (dsb, dyb))| {
                        let dst = &sc.r_inv * dsb * sc.r_inv.transpose();
                        let dyt = sc.r.transpose() * dyb * &sc.r;
                        let mut x = -symmetrize(&(&dst * &dyt));
                        let d = x.nrows();
                        for i in 0..d {
                            x[(i, i)] += target - sc.lambda[i] * sc.lambda[i];
                        }
                        let rho = DMatrix::from_fn(d, d, |i, j| 2.0 * x[(i, j)] / (sc.lambda[i] + sc.lambda[j]));
                        symmetrize(&(&sc.r * rho * sc.r.transpose()))
                    })
                    .collect()
            })
            .collect();
        let dir = solve(&rc_lp, &rc);
        let alpha = (0.99 * max_step(&dir)).min(1.0);
        if !(alpha > 1e-12) || !dir.dw.iter().all(|v| v.is_finite()) {
            return Outcome { w, status: SolveStatus::MaxIter, gap, iterations: it, trace };
        }
        w += &dir.dw * alpha;
        s_lp += &dir.ds_lp * alpha;
        y_lp += &dir.dy_lp * alpha;
        for (sg, dg) in s.iter_mut().zip(&dir.ds) {
            for (sb, db) in sg.iter_mut().zip(dg) {
                *sb += db * alpha;
            }
        }
        for (yg, dg) in y.iter_mut().zip(&dir.dy) {
            for (yb, db) in yg.iter_mut().zip(dg) {
                *yb += db * alpha;
            }
        }
    }
    let gap = s_lp.dot(&y_lp) + blocks_dot(&s, &y);
    Outcome { w, status: SolveStatus::MaxIter, gap, iterations: max_iter, trace }
}
