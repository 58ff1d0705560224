//! Structured LMI operators for the two training sub-problems. Both assemble
//! barrier Hessians with a few large matrix products instead of one trace
//! per variable pair.

use nalgebra::{DMatrix, DVector};

use crate::conic::LmiSet;
use crate::linalg::{smat_add, svec_adjoint, svec_hessian, svec_len};

/// Factor `M = L L^T` of a block's svec Hessian, falling back to a clipped
/// eigen-decomposition when rounding makes `M` slightly indefinite.
fn hessian_root(x: &DMatrix<f64>) -> DMatrix<f64> {
    let m = svec_hessian(x);
    if let Some(c) = m.clone().cholesky() {
        return c.l();
    }
    let eig = m.symmetric_eigen();
    let mut r = eig.eigenvectors.clone();
    for (j, v) in eig.eigenvalues.iter().enumerate() {
        let s = v.max(0.0).sqrt();
        r.column_mut(j).scale_mut(s);
    }
    r
}

fn smat(dim: usize, y: &DVector<f64>) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(dim, dim);
    smat_add(&mut s, y.as_slice());
    s
}

/// One PSD block `smat(c0 + A z[..ns] + sum_v p_v z_v)`.
#[derive(Debug, Clone)]
pub struct SvecBlock {
    pub dim: usize,
    pub c0: DVector<f64>,
    /// `svec_len(dim) x ns` coefficients on the shared leading variables.
    pub shared: DMatrix<f64>,
    /// Variables outside the shared range with their svec coefficients.
    pub private: Vec<(usize, DVector<f64>)>,
}

/// Blocks that all depend densely on the first `ns` variables.
#[derive(Debug, Clone)]
pub struct SharedLmi {
    pub n_vars: usize,
    pub ns: usize,
    pub blocks: Vec<SvecBlock>,
}

impl LmiSet for SharedLmi {
    fn n_vars(&self) -> usize {
        self.n_vars
    }

    fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dim).collect()
    }

    fn eval(&self, z: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let zs = z.rows(0, self.ns);
        self.blocks
            .iter()
            .map(|b| {
                let mut y = &b.c0 + &b.shared * zs;
                for (v, p) in &b.private {
                    y.axpy(z[*v], p, 1.0);
                }
                smat(b.dim, &y)
            })
            .collect()
    }

    fn adjoint(&self, xs: &[DMatrix<f64>]) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_vars);
        for (b, x) in self.blocks.iter().zip(xs) {
            let a = svec_adjoint(x);
            g.rows_mut(0, self.ns).gemv_tr(1.0, &b.shared, &a, 1.0);
            for (v, p) in &b.private {
                g[*v] += p.dot(&a);
            }
        }
        g
    }

    fn add_hessian(&self, xs: &[DMatrix<f64>], hess: &mut DMatrix<f64>) {
        let rows: usize = self.blocks.iter().map(|b| svec_len(b.dim)).sum();
        let mut stack = DMatrix::zeros(rows, self.ns);
        let mut r0 = 0;
        for (b, x) in self.blocks.iter().zip(xs) {
            let l = hessian_root(x);
            let len = svec_len(b.dim);
            let t = l.tr_mul(&b.shared);
            let tp: Vec<(usize, DVector<f64>)> = b.private.iter().map(|(v, p)| (*v, l.tr_mul(p))).collect();
            for (v, pv) in &tp {
                let cross = t.tr_mul(pv);
                for i in 0..self.ns {
                    hess[(i, *v)] += cross[i];
                    hess[(*v, i)] += cross[i];
                }
                for (w, pw) in &tp {
                    hess[(*v, *w)] += pv.dot(pw);
                }
            }
            stack.view_mut((r0, 0), (len, self.ns)).copy_from(&t);
            r0 += len;
        }
        let gram = stack.transpose() * &stack;
        let mut h = hess.view_mut((0, 0), (self.ns, self.ns));
        h += gram;
    }
}

/// A group of decision variables multiplied by a per-point feature vector:
/// the scalar `Gamma[p, :] . z[offset..offset + len]` at point `p`.
#[derive(Debug, Clone)]
pub struct Combo {
    pub offset: usize,
    /// `n_points x len`
    pub gamma: DMatrix<f64>,
}

/// One per-point block `smat(c0 + C y_p + sum_v p_v z_v)`, `y_p` the combo
/// values at the point.
#[derive(Debug, Clone)]
pub struct ComboBlock {
    pub dim: usize,
    pub c0: DVector<f64>,
    /// `svec_len(dim) x n_combos`
    pub c: DMatrix<f64>,
    pub private: Vec<(usize, DVector<f64>)>,
}

/// LMIs whose coefficient vectors factor through a small dictionary of
/// combos. Combos sharing a variable range must share the same `offset`
/// and length, and ranges of different groups must not overlap.
#[derive(Debug, Clone)]
pub struct ComboLmi {
    pub n_vars: usize,
    pub combos: Vec<Combo>,
    /// `points[p]` lists the blocks at point `p`.
    pub points: Vec<Vec<ComboBlock>>,
}

impl ComboLmi {
    fn combo_values(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let np = self.points.len();
        let mut y = DMatrix::zeros(np, self.combos.len());
        for (k, c) in self.combos.iter().enumerate() {
            let zk = z.rows(c.offset, c.gamma.ncols());
            y.set_column(k, &(&c.gamma * zk));
        }
        y
    }

    /// Distinct variable ranges `(offset, len)` in increasing offset order.
    fn groups(&self) -> Vec<(usize, usize)> {
        let mut g: Vec<(usize, usize)> = self.combos.iter().map(|c| (c.offset, c.gamma.ncols())).collect();
        g.sort_unstable();
        g.dedup();
        g
    }
}

impl LmiSet for ComboLmi {
    fn n_vars(&self) -> usize {
        self.n_vars
    }

    fn block_dims(&self) -> Vec<usize> {
        self.points.iter().flat_map(|bs| bs.iter().map(|b| b.dim)).collect()
    }

    fn eval(&self, z: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let y = self.combo_values(z);
        let mut out = Vec::new();
        for (p, blocks) in self.points.iter().enumerate() {
            let yp = y.row(p).transpose();
            for b in blocks {
                let mut s = &b.c0 + &b.c * &yp;
                for (v, pv) in &b.private {
                    s.axpy(z[*v], pv, 1.0);
                }
                out.push(smat(b.dim, &s));
            }
        }
        out
    }

    fn adjoint(&self, xs: &[DMatrix<f64>]) -> DVector<f64> {
        let np = self.points.len();
        let mut u = DMatrix::zeros(np, self.combos.len());
        let mut g = DVector::zeros(self.n_vars);
        let mut it = xs.iter();
        for (p, blocks) in self.points.iter().enumerate() {
            for b in blocks {
                let a = svec_adjoint(it.next().expect("one inverse per block"));
                let up = b.c.tr_mul(&a);
                for k in 0..up.len() {
                    u[(p, k)] += up[k];
                }
                for (v, pv) in &b.private {
                    g[*v] += pv.dot(&a);
                }
            }
        }
        for (k, c) in self.combos.iter().enumerate() {
            let mut gk = g.rows_mut(c.offset, c.gamma.ncols());
            gk.gemv_tr(1.0, &c.gamma, &u.column(k), 1.0);
        }
        g
    }

    fn add_hessian(&self, xs: &[DMatrix<f64>], hess: &mut DMatrix<f64>) {
        let np = self.points.len();
        let nk = self.combos.len();
        // q[(p, k * nk + k')] = Q_p[k, k']
        let mut q = DMatrix::zeros(np, nk * nk);
        let mut it = xs.iter();
        for (p, blocks) in self.points.iter().enumerate() {
            let mut qp = DMatrix::zeros(nk, nk);
            for b in blocks {
                let x = it.next().expect("one inverse per block");
                let m = svec_hessian(x);
                let mc = &m * &b.c;
                qp.gemm_tr(1.0, &b.c, &mc, 1.0);
                let mp: Vec<(usize, DVector<f64>)> = b.private.iter().map(|(v, pv)| (*v, &m * pv)).collect();
                for (v, mpv) in &mp {
                    let cross = b.c.tr_mul(mpv);
                    for (k, c) in self.combos.iter().enumerate() {
                        let row = c.gamma.row(p);
                        for j in 0..row.len() {
                            let val = cross[k] * row[j];
                            hess[(c.offset + j, *v)] += val;
                            hess[(*v, c.offset + j)] += val;
                        }
                    }
                    for (w, pw) in &b.private {
                        hess[(*v, *w)] += mpv.dot(pw);
                    }
                }
            }
            for k in 0..nk {
                for k2 in 0..nk {
                    q[(p, k * nk + k2)] = qp[(k, k2)];
                }
            }
        }

        let groups = self.groups();
        let group_of = |c: &Combo| groups.iter().position(|g| g.0 == c.offset).expect("known group");
        let lo = groups[0].0;
        let hi = groups.last().map(|g| g.0 + g.1).unwrap_or(lo);
        // Z_k = [sum_{k' in g'} diag(Q[k, k']) Gamma_k' for every g' >= g(k)]
        for (k, ck) in self.combos.iter().enumerate() {
            let gk = group_of(ck);
            let start = groups[gk].0;
            let mut wide = DMatrix::zeros(np, hi - start);
            for (k2, c2) in self.combos.iter().enumerate() {
                if group_of(c2) < gk {
                    continue;
                }
                let col = q.column(k * nk + k2);
                let mut dst = wide.columns_mut(c2.offset - start, c2.gamma.ncols());
                for j in 0..c2.gamma.ncols() {
                    for p in 0..np {
                        dst[(p, j)] += col[p] * c2.gamma[(p, j)];
                    }
                }
            }
            let prod = ck.gamma.tr_mul(&wide);
            let mut h = hess.view_mut((ck.offset, start), (ck.gamma.ncols(), hi - start));
            h += prod;
        }
        // mirror the strictly-lower group blocks from the upper ones
        for (gi, &(oi, li)) in groups.iter().enumerate() {
            for &(oj, lj) in groups.iter().skip(gi + 1) {
                let upper = hess.view((oi, oj), (li, lj)).clone_owned();
                let mut lower = hess.view_mut((oj, oi), (lj, li));
                lower += upper.transpose();
            }
        }
    }
}
