//! Riemann–Liouville fractional integral and derivative on uniform grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::special::rgamma;
use crate::weights::ConvWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FracOrder(f64);

impl FracOrder {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha <= 1.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::Domain(format!("fractional order must lie in (0, 1], got {alpha}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for FracOrder {
    type Error = Error;
    fn try_from(a: f64) -> Result<Self> {
        Self::new(a)
    }
}

impl From<FracOrder> for f64 {
    fn from(a: FracOrder) -> f64 {
        a.0
    }
}

/// Weights of the RL kernel u^{α−1}/Γ(α) on a grid with `n` steps of size `dt`.
pub fn rl_weights(alpha: f64, n: usize, dt: f64) -> ConvWeights {
    let r = rgamma(alpha);
    ConvWeights::from_moments(n, dt, |a, b| {
        let m0 = (b.powf(alpha) - a.powf(alpha)) / alpha;
        let m1 = (b.powf(alpha + 1.0) - a.powf(alpha + 1.0)) / (alpha + 1.0);
        (r * m0, r * m1)
    })
}

/// I^α f at every node, by product integration of the piecewise-linear interpolant.
pub fn rl_integral(f: &GridFunction, alpha: FracOrder) -> GridFunction {
    let grid = *f.grid();
    let w = rl_weights(alpha.value(), grid.n_steps, grid.dt());
    let values = if f.dim() == 1 {
        w.convolve(f.values())
    } else {
        let parts: Vec<Vec<f64>> = (0..f.dim()).map(|c| w.convolve(f.component(c).values())).collect();
        (0..grid.n_nodes()).flat_map(|i| parts.iter().map(move |p| p[i])).collect()
    };
    GridFunction::new(grid, f.dim(), values).expect("shape preserved")
}

/// D^α f = f₀ t^{−α}/Γ(1−α) + d/dt I^{1−α}(f − f₀): product integration followed by
/// second-order differences (central inside, one-sided at the last node). Node 0 is
/// ±∞ when f₀ ≠ 0 and otherwise copies node 1.
pub fn rl_derivative(f: &GridFunction, alpha: FracOrder, f0: f64) -> GridFunction {
    let grid = *f.grid();
    let n = grid.n_steps;
    let dt = grid.dt();
    let a = alpha.value();
    let shifted: Vec<f64> = f.component(0).values().iter().map(|x| x - f0).collect();
    let big = if a < 1.0 { rl_weights(1.0 - a, n, dt).convolve(&shifted) } else { shifted };
    let r1 = rgamma(1.0 - a);
    let mut out = vec![0.0; n + 1];
    for m in 1..=n {
        let slope = if m < n {
            (big[m + 1] - big[m - 1]) / (2.0 * dt)
        } else if n >= 2 {
            (3.0 * big[n] - 4.0 * big[n - 1] + big[n - 2]) / (2.0 * dt)
        } else {
            (big[1] - big[0]) / dt
        };
        out[m] = slope + if f0 != 0.0 { f0 * grid.t(m).powf(-a) * r1 } else { 0.0 };
    }
    out[0] = if f0 != 0.0 && r1 != 0.0 { f0.signum() * f64::INFINITY } else { out[1.min(n)] };
    GridFunction::scalar(grid, out).expect("shape preserved")
}

/// Discrete inverse of [`rl_integral`]: the node values g, with g₀ = g₁, whose
/// piecewise-linear interpolant satisfies I^α g = f − f₀ at every node.
///
/// Agrees with [`rl_derivative`] as dt → 0, and feeding the result back through
/// product integration returns f exactly (up to rounding).
pub fn rl_derivative_inverse(f: &GridFunction, alpha: FracOrder) -> GridFunction {
    rl_derivative_inverse_from(f, alpha, None)
}

/// As [`rl_derivative_inverse`], with g₀ pinned to `start` when given. Needed when
/// the integrand is known to vanish at t = 0, e.g. a source term carrying √y₀ = 0.
pub fn rl_derivative_inverse_from(f: &GridFunction, alpha: FracOrder, start: Option<f64>) -> GridFunction {
    let grid = *f.grid();
    let n = grid.n_steps;
    let w = rl_weights(alpha.value(), n, grid.dt());
    let ft = f.component(0);
    let f0 = ft.values()[0];
    let mut g = vec![0.0; n + 1];
    for m in 1..=n {
        let mut acc = ft.values()[m] - f0;
        for j in 0..m - 1 {
            acc -= w.left[m - j] * g[j] + w.right[m - j] * g[j + 1];
        }
        if m == 1 {
            if let Some(g0) = start {
                g[0] = g0;
                g[1] = (acc - w.left[1] * g0) / w.right[1];
            } else {
                g[1] = acc / (w.left[1] + w.right[1]);
                g[0] = g[1];
            }
        } else {
            g[m] = (acc - w.left[1] * g[m - 1]) / w.right[1];
        }
    }
    GridFunction::scalar(grid, g).expect("shape preserved")
}

/// ½∫|v|² by the trapezoid rule; a non-finite value at node 0 carries zero weight.
pub fn energy(v: &GridFunction) -> f64 {
    let w = v.grid().trapezoid_weights();
    let mut e = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let sq: f64 = v.at(i).iter().map(|x| x * x).sum();
        if !sq.is_finite() {
            if i == 0 {
                continue;
            }
            return f64::INFINITY;
        }
        e += wi * sq;
    }
    0.5 * e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;

    // Γ(1.6) and Γ(1.6)/Γ(2.2), 30-digit reference values.
    const GAMMA_1_6: f64 = 0.893515349287690271;
    const BETA_RATIO: f64 = 0.810957822916410601;
    // Γ(1.7)
    const GAMMA_1_7: f64 = 0.908638732853290075;

    #[test]
    fn constant_and_zero() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let one = GridFunction::from_fn(g, |_| 1.0);
        let out = rl_integral(&one, FracOrder::new(0.6).unwrap());
        for (i, t) in g.nodes().into_iter().enumerate() {
            assert!((out.get(i, 0) - t.powf(0.6) / GAMMA_1_6).abs() < 1e-13);
        }
        let zero = GridFunction::zeros(g, 1);
        assert!(rl_integral(&zero, FracOrder::new(0.6).unwrap()).values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn beta_identity_at_one() {
        let g = TimeGrid::new(1.0, 4096).unwrap();
        let f = GridFunction::from_fn(g, |t| t.powf(0.6));
        let out = rl_integral(&f, FracOrder::new(0.6).unwrap());
        assert!((out.last()[0] - BETA_RATIO).abs() < 1e-5, "{}", out.last()[0]);
    }

    #[test]
    fn alpha_one_is_trapezoid() {
        let g = TimeGrid::new(2.0, 10).unwrap();
        let f = GridFunction::from_fn(g, |t| (3.0 * t).sin());
        let out = rl_integral(&f, FracOrder::new(1.0).unwrap());
        let mut acc = 0.0;
        for m in 1..=10 {
            acc += 0.5 * g.dt() * (f.get(m - 1, 0) + f.get(m, 0));
            assert!((out.get(m, 0) - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn derivative_of_power_is_constant() {
        let g = TimeGrid::new(1.0, 4096).unwrap();
        let f = GridFunction::from_fn(g, |t| t.powf(0.6));
        let d = rl_derivative(&f, FracOrder::new(0.6).unwrap(), 0.0);
        for i in (41..=4096).step_by(97) {
            assert!((d.get(i, 0) - GAMMA_1_6).abs() < 1e-3 * GAMMA_1_6, "i={i} {}", d.get(i, 0));
        }
    }

    #[test]
    fn derivative_of_constant_is_split_term() {
        let g = TimeGrid::new(1.0, 256).unwrap();
        let f = GridFunction::from_fn(g, |_| 2.0);
        let d = rl_derivative(&f, FracOrder::new(0.3).unwrap(), 2.0);
        assert!(d.get(0, 0).is_infinite());
        let c = 2.0 * rgamma(0.7);
        for i in 1..=256 {
            let t = g.t(i);
            assert!((d.get(i, 0) - c * t.powf(-0.3)).abs() < 1e-12);
        }
        assert!(energy(&d).is_finite());
    }

    #[test]
    fn discrete_inverse_round_trips() {
        let g = TimeGrid::new(1.0, 300).unwrap();
        let a = FracOrder::new(0.7).unwrap();
        let f = GridFunction::from_fn(g, |t| (3.0 * t).sin() * t.sqrt());
        let d = rl_derivative_inverse(&f, a);
        let back = rl_integral(&d, a);
        assert!(back.sup_distance(&f, 0).unwrap() < 1e-12);
        let p = GridFunction::from_fn(g, |t| t.powf(0.7));
        let d = rl_derivative_inverse(&p, a);
        assert!(d.values().iter().all(|x| (x - GAMMA_1_7).abs() < 1e-10));
    }

    #[test]
    fn energies() {
        let g = TimeGrid::new(2.0, 100).unwrap();
        assert_eq!(energy(&GridFunction::zeros(g, 2)), 0.0);
        assert!((energy(&GridFunction::constant(g, &[1.0, 1.0])) - 2.0).abs() < 1e-14);
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let v = GridFunction::from_fn(g, |t| t);
        assert!((energy(&v) - 1.0 / 6.0).abs() < 1e-6);
    }
}
