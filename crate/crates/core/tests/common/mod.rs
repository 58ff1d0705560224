//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stabdyn::conic::{ConicProblem, DenseLmi};

/// A small random convex problem in the dense form the oracle understands.
pub struct SmallProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    /// `(C0, [C_i])` per PSD block; `C0` is positive definite so `z = 0` is
    /// strictly feasible.
    pub blocks: Vec<(DMatrix<f64>, Vec<DMatrix<f64>>)>,
}

fn random_sym(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    (&a + a.transpose()) * 0.5
}

impl SmallProblem {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=3usize);
        let linear = n <= 2 && rng.random_bool(0.5);
        let p = if linear {
            DMatrix::zeros(n, n)
        } else {
            let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            &b * b.transpose() + DMatrix::identity(n, n) * 0.1
        };
        let q = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let mut blocks = Vec::new();
        for _ in 0..rng.random_range(1..=2usize) {
            let d = rng.random_range(2..=3usize);
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let c0 = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
            let cs = (0..n).map(|_| random_sym(&mut rng, d)).collect();
            blocks.push((c0, cs));
        }
        if linear {
            // |z| <= 3 through [[3, z'], [z, 3 I]] PSD
            let d = n + 1;
            let mut c0 = DMatrix::identity(d, d) * 3.0;
            c0[(0, 0)] = 3.0;
            let cs = (0..n)
                .map(|i| {
                    let mut c = DMatrix::zeros(d, d);
                    c[(0, i + 1)] = 1.0;
                    c[(i + 1, 0)] = 1.0;
                    c
                })
                .collect();
            blocks.push((c0, cs));
        }
        Self { p, q, blocks }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn to_conic(&self) -> ConicProblem {
        let mut prob = ConicProblem::new(self.n());
        prob.p = self.p.clone();
        prob.q = self.q.clone();
        for (c0, cs) in &self.blocks {
            prob.add_psd(DenseLmi::new(c0.clone(), cs.clone()).unwrap());
        }
        prob
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + self.q.dot(z)
    }

    pub fn feasible(&self, z: &DVector<f64>) -> bool {
        self.blocks.iter().all(|(c0, cs)| {
            let mut s = c0.clone();
            for (c, zi) in cs.iter().zip(z.iter()) {
                s += c * *zi;
            }
            s.symmetric_eigenvalues().min() >= 0.0
        })
    }

    /// Most negative eigenpair over the blocks at `z`, as a cut direction:
    /// returns `g` with `g_i = v' C_i v` for the violated block.
    fn violated_cut(&self, z: &DVector<f64>) -> Option<DVector<f64>> {
        let mut worst: Option<(f64, DVector<f64>)> = None;
        for (c0, cs) in &self.blocks {
            let mut s = c0.clone();
            for (c, zi) in cs.iter().zip(z.iter()) {
                s += c * *zi;
            }
            let eig = s.symmetric_eigen();
            let (k, lmin) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
            if lmin < 0.0 && worst.as_ref().is_none_or(|w| lmin < w.0) {
                let v = eig.eigenvectors.column(k).into_owned();
                // feasible side: g . z' >= g . z
                let g = DVector::from_iterator(cs.len(), cs.iter().map(|c| v.dot(&(c * &v))));
                worst = Some((lmin, g));
            }
        }
        worst.map(|w| -w.1)
    }

    /// Brute-force optimum by the central-cut ellipsoid method started from
    /// a ball that contains every point with objective below `f(0) = 0`.
    pub fn oracle(&self) -> f64 {
        let n = self.n();
        let radius = 100.0;
        if n == 1 {
            let f = |z: f64| self.objective(&DVector::from_element(1, z));
            let edge = |sign: f64| {
                let (mut lo, mut hi) = (0.0, radius);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if self.feasible(&DVector::from_element(1, sign * mid)) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                sign * lo
            };
            let (a, b) = (edge(-1.0), edge(1.0));
            let mut best = f(a).min(f(b));
            if self.p[(0, 0)] > 0.0 {
                let zu = -self.q[0] / self.p[(0, 0)];
                if zu > a && zu < b {
                    best = best.min(f(zu));
                }
            }
            return best;
        }
        let nf = n as f64;
        let mut c = DVector::zeros(n);
        let mut e = DMatrix::identity(n, n) * (radius * radius);
        let mut best = f64::INFINITY;
        for _ in 0..20_000 {
            let g = match self.violated_cut(&c) {
                // cut keeps {y : g . (y - c) <= 0}
                Some(g) => g,
                None => {
                    best = best.min(self.objective(&c));
                    &self.p * &c + &self.q
                }
            };
            let eg = &e * &g;
            let gn = g.dot(&eg);
            if !(gn > 1e-28) {
                break;
            }
            let gt = eg / gn.sqrt();
            c -= &gt / (nf + 1.0);
            e = (&e - &gt * gt.transpose() * (2.0 / (nf + 1.0))) * (nf * nf / (nf * nf - 1.0));
            e = (&e + e.transpose()) * 0.5;
        }
        best
    }
}
