//! Random Fourier features for the Gaussian kernel `exp(-|x - z|^2 / sigma^2)`
//! with analytic first and second derivatives.
//!
//! Frequencies are drawn from `N(0, 2 / sigma^2)`; that is the spectral
//! density of the kernel as written above (a `N(0, 1 / sigma^2)` draw would
//! approximate `exp(-|x - z|^2 / (2 sigma^2))` instead).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frequencies used by the dynamics features.
pub const DYNAMICS_FREQS: usize = 48;
pub const DYNAMICS_SIGMA: f64 = 6.0;
/// Frequencies used by each metric-entry feature map.
pub const METRIC_FREQS: usize = 36;
pub const METRIC_SIGMA: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffBasis {
    /// `s x n`; columns outside `active_dims` are exactly zero.
    pub omegas: DMatrix<f64>,
    pub sigma: f64,
    /// 0-based coordinates the features may depend on.
    pub active_dims: Vec<usize>,
}

/// Features and their state gradient at one point.
#[derive(Debug, Clone)]
pub struct FeatureEval {
    /// `(1/sqrt s)(cos w_1.x, sin w_1.x, ..., cos w_s.x, sin w_s.x)`
    pub phi: DVector<f64>,
    /// `2s x n`, row `k` is the gradient of `phi[k]`.
    pub dphi: DMatrix<f64>,
}

pub fn sample_rff<R: Rng + ?Sized>(
    rng: &mut R,
    sigma: f64,
    s: usize,
    n: usize,
    active_dims: &[usize],
) -> Result<RffBasis> {
    if s == 0 || !(sigma > 0.0) {
        return Err(Error::Config(format!("need s >= 1 and sigma > 0 (s={s}, sigma={sigma})")));
    }
    if let Some(&d) = active_dims.iter().find(|&&d| d >= n) {
        return Err(Error::Dimension(format!("active dim {d} out of range for n={n}")));
    }
    let normal = Normal::new(0.0, 2f64.sqrt() / sigma).expect("positive std");
    let mut omegas = DMatrix::zeros(s, n);
    for i in 0..s {
        for &j in active_dims {
            omegas[(i, j)] = normal.sample(rng);
        }
    }
    Ok(RffBasis {
        omegas,
        sigma,
        active_dims: active_dims.to_vec(),
    })
}

impl RffBasis {
    /// Number of frequencies `s`.
    pub fn freqs(&self) -> usize {
        self.omegas.nrows()
    }

    /// Feature dimension `2s`.
    pub fn dim(&self) -> usize {
        2 * self.freqs()
    }

    pub fn state_dim(&self) -> usize {
        self.omegas.ncols()
    }

    fn angles(&self, x: &[f64]) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.state_dim());
        let mut a = DVector::zeros(self.freqs());
        for (i, ai) in a.iter_mut().enumerate() {
            *ai = self.active_dims.iter().map(|&j| self.omegas[(i, j)] * x[j]).sum();
        }
        a
    }

    pub fn phi(&self, x: &[f64]) -> DVector<f64> {
        let scale = 1.0 / (self.freqs() as f64).sqrt();
        let a = self.angles(x);
        let mut phi = DVector::zeros(self.dim());
        for (i, ai) in a.iter().enumerate() {
            let (s, c) = ai.sin_cos();
            phi[2 * i] = scale * c;
            phi[2 * i + 1] = scale * s;
        }
        phi
    }

    pub fn eval(&self, x: &[f64]) -> FeatureEval {
        let scale = 1.0 / (self.freqs() as f64).sqrt();
        let n = self.state_dim();
        let a = self.angles(x);
        let mut phi = DVector::zeros(self.dim());
        let mut dphi = DMatrix::zeros(self.dim(), n);
        for (i, ai) in a.iter().enumerate() {
            let (s, c) = ai.sin_cos();
            phi[2 * i] = scale * c;
            phi[2 * i + 1] = scale * s;
            for &j in &self.active_dims {
                let w = self.omegas[(i, j)];
                dphi[(2 * i, j)] = -scale * s * w;
                dphi[(2 * i + 1, j)] = scale * c * w;
            }
        }
        FeatureEval { phi, dphi }
    }

    /// `sum_k g[k] * hess(phi[k])(x)`. Each feature's Hessian is
    /// `-phi[k] w w^T` for its frequency `w`.
    pub fn hessian_contract(&self, x: &[f64], g: &DVector<f64>) -> DMatrix<f64> {
        let phi = self.phi(x);
        let n = self.state_dim();
        let mut h = DMatrix::zeros(n, n);
        for i in 0..self.freqs() {
            let c = -(g[2 * i] * phi[2 * i] + g[2 * i + 1] * phi[2 * i + 1]);
            let w = self.omegas.row(i);
            for &p in &self.active_dims {
                for &q in &self.active_dims {
                    h[(p, q)] += c * w[p] * w[q];
                }
            }
        }
        h
    }
}
