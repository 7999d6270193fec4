//! Product-integration weights.
//!
//! For a kernel K and a function f that is linear on each grid interval,
//! ∫₀^{t_m} K(t_m − s) f(s) ds = Σ_{j<m} [L_{m−j} f_j + R_{m−j} f_{j+1}],
//! where L_k, R_k come from the moments of K over ((k−1)dt, k dt).

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::{fbm_value, KernelSpec};
use crate::special::{integrate_singular_both, GaussLegendre};

/// Lag-indexed weights of a convolution kernel; index 0 is unused.
#[derive(Debug, Clone)]
pub struct ConvWeights {
    pub dt: f64,
    /// Weight on the left node of an interval at lag k.
    pub left: Vec<f64>,
    /// Weight on the right node of an interval at lag k.
    pub right: Vec<f64>,
    /// ∫_{(k−1)dt}^{k dt} K.
    pub mass: Vec<f64>,
}

impl ConvWeights {
    pub fn new(kernel: &KernelSpec, grid: &TimeGrid) -> Result<Self> {
        if !kernel.is_convolution() {
            return Err(Error::WrongVariant("product weights need a scalar convolution kernel"));
        }
        Ok(Self::from_moments(grid.n_steps, grid.dt(), |a, b| kernel.moments(a, b)))
    }

    /// Build from a moment function (a, b) ↦ (∫ₐᵇK, ∫ₐᵇK(u)u du).
    pub fn from_moments(n: usize, dt: f64, moments: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut left = vec![0.0; n + 1];
        let mut right = vec![0.0; n + 1];
        let mut mass = vec![0.0; n + 1];
        for k in 1..=n {
            let a = (k - 1) as f64 * dt;
            let b = k as f64 * dt;
            let (m0, m1) = moments(a, b);
            // f(s) at distance u = t_m − s: the right node of the interval sits at u = a.
            right[k] = (b * m0 - m1) / dt;
            left[k] = (m1 - a * m0) / dt;
            mass[k] = m0;
        }
        Self { dt, left, right, mass }
    }

    pub fn n_steps(&self) -> usize {
        self.left.len() - 1
    }

    /// Product integral at every node of the piecewise-linear interpolant of `f`.
    pub fn convolve(&self, f: &[f64]) -> Vec<f64> {
        let n = f.len() - 1;
        let mut out = vec![0.0; n + 1];
        for m in 1..=n {
            let mut acc = 0.0;
            for j in 0..m {
                let k = m - j;
                acc += self.left[k] * f[j] + self.right[k] * f[j + 1];
            }
            out[m] = acc;
        }
        out
    }

    /// Same for a function that is constant `v[j]` on interval j (`v.len() = n`).
    pub fn convolve_piecewise(&self, v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut out = vec![0.0; n + 1];
        for m in 1..=n {
            let mut acc = 0.0;
            for j in 0..m {
                acc += self.mass[m - j] * v[j];
            }
            out[m] = acc;
        }
        out
    }
}

/// Row-indexed weights of the non-convolution fBm kernel: row m holds the left and
/// right weights of intervals j < m for ∫₀^{t_m} K(t_m, s) f(s) ds.
#[derive(Debug, Clone)]
pub struct RowWeights {
    pub left: Vec<Vec<f64>>,
    pub right: Vec<Vec<f64>>,
    pub mass: Vec<Vec<f64>>,
}

impl RowWeights {
    pub fn fbm(hurst: f64, grid: &TimeGrid) -> Self {
        let n = grid.n_steps;
        let dt = grid.dt();
        let rule = GaussLegendre::g20();
        let mut left = vec![Vec::new(); n + 1];
        let mut right = vec![Vec::new(); n + 1];
        let mut mass = vec![Vec::new(); n + 1];
        for m in 1..=n {
            let t = grid.t(m);
            let (mut lr, mut rr, mut mr) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
            for j in 0..m {
                let a = j as f64 * dt;
                // φ(s) with s = a + d, lag = t − s
                let k = |d: f64, lag: f64| fbm_value(hurst, lag, t, a + d);
                let (l, r, w) = if j == m - 1 {
                    // measure the lag from the right end to keep precision near s = t
                    let kr = |dl: f64, dr: f64| fbm_value(hurst, dr, t, a + dl);
                    (
                        integrate_singular_both(dt, |dl, dr| kr(dl, dr) * dr / dt),
                        integrate_singular_both(dt, |dl, dr| kr(dl, dr) * dl / dt),
                        integrate_singular_both(dt, kr),
                    )
                } else if j == 0 {
                    let lag0 = t - a;
                    (
                        integrate_singular_both(dt, |dl, dr| k(dl, lag0 - dl) * dr / dt),
                        integrate_singular_both(dt, |dl, _| k(dl, lag0 - dl) * dl / dt),
                        integrate_singular_both(dt, |dl, _| k(dl, lag0 - dl)),
                    )
                } else {
                    let l = rule.integrate(0.0, dt, |d| k(d, t - a - d) * (dt - d) / dt);
                    let r = rule.integrate(0.0, dt, |d| k(d, t - a - d) * d / dt);
                    (l, r, l + r)
                };
                lr[j] = l;
                rr[j] = r;
                mr[j] = w;
            }
            left[m] = lr;
            right[m] = rr;
            mass[m] = mr;
        }
        Self { left, right, mass }
    }
}

/// Weights of either kind, as used by the Volterra solver.
#[derive(Debug, Clone)]
pub enum Weights {
    Conv(ConvWeights),
    Rows(RowWeights),
}

impl Weights {
    pub fn new(kernel: &KernelSpec, grid: &TimeGrid) -> Result<Self> {
        match kernel {
            KernelSpec::Fbm(h) => Ok(Weights::Rows(RowWeights::fbm(*h, grid))),
            KernelSpec::Matrix(_) => Err(Error::WrongVariant("matrix kernels are split into entries before weighting")),
            k => Ok(Weights::Conv(ConvWeights::new(k, grid)?)),
        }
    }

    #[inline]
    pub fn left(&self, m: usize, j: usize) -> f64 {
        match self {
            Weights::Conv(c) => c.left[m - j],
            Weights::Rows(r) => r.left[m][j],
        }
    }

    #[inline]
    pub fn right(&self, m: usize, j: usize) -> f64 {
        match self {
            Weights::Conv(c) => c.right[m - j],
            Weights::Rows(r) => r.right[m][j],
        }
    }

    #[inline]
    pub fn mass(&self, m: usize, j: usize) -> f64 {
        match self {
            Weights::Conv(c) => c.mass[m - j],
            Weights::Rows(r) => r.mass[m][j],
        }
    }

    /// Σ_{j<m} left(m,j)·fl[j] + right(m,j)·fr[j].
    pub fn row_dot(&self, m: usize, fl: &[f64], fr: &[f64]) -> f64 {
        let mut acc = 0.0;
        match self {
            Weights::Conv(c) => {
                for j in 0..m {
                    let k = m - j;
                    acc += c.left[k] * fl[j] + c.right[k] * fr[j];
                }
            }
            Weights::Rows(r) => {
                let (l, rr) = (&r.left[m], &r.right[m]);
                for j in 0..m {
                    acc += l[j] * fl[j] + rr[j] * fr[j];
                }
            }
        }
        acc
    }
}
