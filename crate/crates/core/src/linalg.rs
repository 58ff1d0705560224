//! Dense linear-algebra helpers: a blocked Cholesky (the sub-problem Newton
//! systems reach ~1600 unknowns), symmetric eigenvalue extremes, and the
//! packed upper-triangular ("svec") coordinates used by the LMI operators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

const CHOL_BLOCK: usize = 96;

fn cholesky_unblocked(a: &mut DMatrix<f64>, k0: usize, b: usize) -> bool {
    for j in k0..k0 + b {
        let mut d = a[(j, j)];
        for p in k0..j {
            d -= a[(j, p)] * a[(j, p)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for i in j + 1..k0 + b {
            let mut s = a[(i, j)];
            for p in k0..j {
                s -= a[(i, p)] * a[(j, p)];
            }
            a[(i, j)] = s / d;
        }
    }
    true
}

/// Lower Cholesky factor of a symmetric positive definite matrix, reading
/// only the lower triangle. Returns `None` when a pivot is not positive.
pub fn cholesky(mut a: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
    let mut k = 0;
    while k < n {
        let b = CHOL_BLOCK.min(n - k);
        if !cholesky_unblocked(&mut a, k, b) {
            return None;
        }
        let rest = n - k - b;
        if rest > 0 {
            let l11 = a.view((k, k), (b, b)).clone_owned();
            // L21 = A21 L11^{-T}
            let mut x = a.view((k + b, k), (rest, b)).transpose();
            if !l11.solve_lower_triangular_mut(&mut x) {
                return None;
            }
            let l21 = x.transpose();
            a.view_mut((k + b, k), (rest, b)).copy_from(&l21);
            let mut a22 = a.view_mut((k + b, k + b), (rest, rest));
            a22.gemm(-1.0, &l21, &x, 1.0);
        }
        k += b;
    }
    for j in 1..n {
        for i in 0..j {
            a[(i, j)] = 0.0;
        }
    }
    Some(a)
}

/// Solves `L L^T x = b` given the factor from [`cholesky`].
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = l.solve_lower_triangular(b).expect("factor has a nonzero diagonal");
    l.tr_solve_lower_triangular(&y).expect("factor has a nonzero diagonal")
}

/// Factor `a + shift I`, growing the shift until it succeeds. Returns the
/// factor and the shift actually used.
pub fn cholesky_regularized(a: &DMatrix<f64>, mut shift: f64) -> Option<(DMatrix<f64>, f64)> {
    let scale = a.diagonal().amax().max(1.0);
    for _ in 0..12 {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += shift;
        }
        if let Some(l) = cholesky(m) {
            return Some((l, shift));
        }
        shift = if shift == 0.0 { 1e-12 * scale } else { shift * 100.0 };
    }
    None
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `(lambda_min, lambda_max)` of a symmetric matrix.
pub fn eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(m.clone()).eigenvalues;
    (e.min(), e.max())
}

/// Upper-triangular index pairs `(i, j)`, `i <= j`, in row-major order.
pub fn svec_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect()
}

pub fn svec_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Adds `sum_r y_r E_r` to `m`, where `E_r` is the symmetric unit matrix of
/// pair `r` (ones at `(i, j)` and `(j, i)`).
pub fn smat_add(m: &mut DMatrix<f64>, y: &[f64]) {
    let d = m.nrows();
    for (r, (i, j)) in svec_pairs(d).into_iter().enumerate() {
        m[(i, j)] += y[r];
        if i != j {
            m[(j, i)] += y[r];
        }
    }
}

/// `tr(X E_r)` for every pair.
pub fn svec_adjoint(x: &DMatrix<f64>) -> DVector<f64> {
    let d = x.nrows();
    DVector::from_iterator(
        svec_len(d),
        svec_pairs(d)
            .into_iter()
            .map(|(i, j)| if i == j { x[(i, i)] } else { x[(i, j)] + x[(j, i)] }),
    )
}

/// `M[r, r'] = tr(X E_r X E_r')` for symmetric `X`: the Hessian of
/// `-log det S` in svec coordinates when `X = S^{-1}`.
pub fn svec_hessian(x: &DMatrix<f64>) -> DMatrix<f64> {
    let d = x.nrows();
    let pairs = svec_pairs(d);
    let k = pairs.len();
    let mut m = DMatrix::zeros(k, k);
    for (r, &(i, j)) in pairs.iter().enumerate() {
        for (s, &(p, q)) in pairs.iter().enumerate().skip(r) {
            // tr(X e_a e_b^T X e_c e_d^T) = X_bc X_da, summed over the
            // symmetric expansions of both unit matrices.
            let mut v = x[(j, p)] * x[(q, i)];
            if i != j {
                v += x[(i, p)] * x[(q, j)];
            }
            if p != q {
                v += x[(j, q)] * x[(p, i)];
                if i != j {
                    v += x[(i, q)] * x[(p, j)];
                }
            }
            m[(r, s)] = v;
            m[(s, r)] = v;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * (n as f64) * 0.1
    }

    #[test]
    fn blocked_cholesky_matches_reference() {
        for &n in &[1, 5, 96, 97, 250] {
            let a = random_spd(n, n as u64);
            let l = cholesky(a.clone()).unwrap();
            let reference = a.clone().cholesky().unwrap().l();
            assert!((&l - &reference).amax() < 1e-9 * reference.amax(), "n={n}");
            let b = DVector::from_fn(n, |i, _| i as f64 - 1.0);
            let x = cholesky_solve(&l, &b);
            assert!((&a * x - b).amax() < 1e-8);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky(a).is_none());
    }

    #[test]
    fn svec_hessian_matches_explicit_traces() {
        let s = random_spd(4, 3);
        let x = s.try_inverse().unwrap();
        let m = svec_hessian(&x);
        let pairs = svec_pairs(4);
        let unit = |(i, j): (usize, usize)| {
            let mut e = DMatrix::zeros(4, 4);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            e
        };
        for (r, &pr) in pairs.iter().enumerate() {
            let ad = svec_adjoint(&x);
            assert!((ad[r] - (&x * unit(pr)).trace()).abs() < 1e-12);
            for (s, &ps) in pairs.iter().enumerate() {
                let t = (&x * unit(pr) * &x * unit(ps)).trace();
                assert!((m[(r, s)] - t).abs() < 1e-12);
            }
        }
    }
}
