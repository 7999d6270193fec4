//! Black–Scholes pricing and inversion, asymptotic smiles, Monte Carlo smiles.
//!
//! Spot is 1, rates and dividends are zero, strikes are e^k.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::models::{Dynamics, ModelSpec, ScalingRegime};
use crate::rate::{ldp_rate_terminal, MinimizeOptions, TerminalTarget};
use crate::sim::Simulator;

fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Black–Scholes call with maturity `t`, log-strike `k`, volatility `sigma`.
pub fn bs_call(t: f64, k: f64, sigma: f64) -> f64 {
    let intrinsic = (1.0 - k.exp()).max(0.0);
    let sd = sigma * t.sqrt();
    if sd <= 0.0 || !sd.is_finite() {
        return if sd.is_infinite() { 1.0 } else { intrinsic };
    }
    let d1 = -k / sd + 0.5 * sd;
    let d2 = d1 - sd;
    (norm_cdf(d1) - k.exp() * norm_cdf(d2)).max(intrinsic)
}

/// ∂C/∂σ.
pub fn bs_vega(t: f64, k: f64, sigma: f64) -> f64 {
    let sd = sigma * t.sqrt();
    if sd <= 0.0 {
        return 0.0;
    }
    norm_pdf(-k / sd + 0.5 * sd) * t.sqrt()
}

/// Volatility with bs_call(t, k, σ) = price, by bracketing bisection with Newton
/// steps kept inside the bracket.
pub fn implied_vol(price: f64, t: f64, k: f64) -> Result<f64> {
    let lower = (1.0 - k.exp()).max(0.0);
    let upper = 1.0;
    if !(t > 0.0) || !(price > lower && price < upper) {
        return Err(Error::PriceOutOfBounds { price, lower, upper });
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while bs_call(t, k, hi) < price {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::PriceOutOfBounds { price, lower, upper });
        }
    }
    let mut s = 0.5 * (lo + hi);
    for _ in 0..200 {
        let diff = bs_call(t, k, s) - price;
        if diff == 0.0 {
            break;
        }
        if diff > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let vega = bs_vega(t, k, s);
        let newton = s - diff / vega;
        let next = if vega > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - s).abs() <= 1e-15 * s.max(1e-300) || hi - lo <= 1e-15 * hi {
            s = next;
            break;
        }
        s = next;
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmileSource {
    AsymptoticLdp,
    AsymptoticMdp,
    AsymptoticTail,
    MonteCarlo,
}

impl SmileSource {
    pub fn label(self) -> &'static str {
        match self {
            SmileSource::AsymptoticLdp => "asymptotic_ldp",
            SmileSource::AsymptoticMdp => "asymptotic_mdp",
            SmileSource::AsymptoticTail => "asymptotic_tail",
            SmileSource::MonteCarlo => "monte_carlo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmilePoint {
    pub t: f64,
    /// Normalised log-moneyness (the k of the asymptotic formula).
    pub k: f64,
    /// Actual log-strike at maturity t.
    pub strike: f64,
    pub implied_vol: f64,
    pub source: SmileSource,
    /// Monte Carlo standard error of implied_vol.
    pub stderr: Option<f64>,
    /// For large deviations smiles: the factor t^{H−1/2} by which the normalised
    /// smile blows up; the tail smile records √(k/t).
    pub normalization: Option<f64>,
    /// Set when the Monte Carlo price was clipped to intrinsic before inversion.
    pub clipped: bool,
}

const INF_GRID_POINTS: usize = 17;

/// 17 geometric points on [a, 8a].
fn geometric_grid(a: f64) -> Vec<f64> {
    (0..INF_GRID_POINTS).map(|i| a * 8f64.powf(i as f64 / (INF_GRID_POINTS - 1) as f64)).collect()
}

/// inf_{|x| ≥ |k|, same sign} I^X over the geometric grid, or at x = k when ρ = 0.
fn infimum_rate(model: &ModelSpec, k: f64, opts: &MinimizeOptions, full_grid: bool) -> Result<f64> {
    let rho_zero = model.dynamics.rhos().iter().all(|&r| r == 0.0);
    let xs = if rho_zero && !full_grid { vec![k] } else { geometric_grid(k) };
    let mut best = f64::INFINITY;
    for x in xs {
        let r = ldp_rate_terminal(model, TerminalTarget::X(x), opts)
            .map_err(|e| Error::RateUnavailable(format!("x = {x}: {e}")))?;
        best = best.min(r.value);
    }
    Ok(best)
}

/// lim σ̂(t, k t^{1/2−H})² = k²/(2 inf_{x≥k} I^X₁(x)) (mirrored for k < 0).
pub fn smile_ldp(model: &ModelSpec, k: f64, t: f64, opts: &MinimizeOptions) -> Result<SmilePoint> {
    if k == 0.0 || !k.is_finite() {
        return Err(Error::Domain("smile_ldp needs k != 0".into()));
    }
    if !(t > 0.0) {
        return Err(Error::Domain("maturity must be positive".into()));
    }
    let m = model.with_regime(ScalingRegime::SmallTimeLdp { eps: model.regime.eps() })?;
    let o = MinimizeOptions { horizon: 1.0, ..opts.clone() };
    let inf = infimum_rate(&m, k, &o, false)?;
    if !(inf > 0.0) {
        return Err(Error::RateUnavailable(format!("infimum of the rate is {inf}")));
    }
    let h = model.dynamics.hurst();
    Ok(SmilePoint {
        t,
        k,
        strike: k * t.powf(0.5 - h),
        implied_vol: (k * k / (2.0 * inf)).sqrt(),
        source: SmileSource::AsymptoticLdp,
        stderr: None,
        normalization: Some(t.powf(h - 0.5)),
        clipped: false,
    })
}

/// lim σ̂(t, k t^{1/2−β})² = Σ(y₀).
pub fn smile_mdp(model: &ModelSpec, k: f64, t: f64, beta: f64) -> Result<SmilePoint> {
    let d = &model.dynamics;
    let h = d.hurst();
    if !(beta > 0.0 && beta < h) {
        return Err(Error::Domain(format!("beta must lie in (0, {h}), got {beta}")));
    }
    if k == 0.0 {
        return Err(Error::Domain("smile_mdp needs k != 0".into()));
    }
    let sigma = d.variance(&d.y0());
    if !(sigma > 0.0) {
        return Err(Error::DegenerateCoefficients("Sigma(y0) = 0".into()));
    }
    Ok(SmilePoint {
        t,
        k,
        strike: k * t.powf(0.5 - beta),
        implied_vol: sigma.sqrt(),
        source: SmileSource::AsymptoticMdp,
        stderr: None,
        normalization: None,
        clipped: false,
    })
}

/// σ̂² = k/(2t inf_{y≥1} I^X_t(y)), the leading order of the large-strike smile.
pub fn smile_tail(model: &ModelSpec, t: f64, k: f64, opts: &MinimizeOptions) -> Result<SmilePoint> {
    if !(t > 0.0) || !(k > 0.0) {
        return Err(Error::Domain("smile_tail needs t > 0 and k > 0".into()));
    }
    let m = model.with_regime(ScalingRegime::TailLdp { eps: model.regime.eps() })?;
    let o = MinimizeOptions { horizon: t, ..opts.clone() };
    let inf = infimum_rate(&m, 1.0, &o, true)?;
    if !(inf > 0.0) {
        return Err(Error::RateUnavailable(format!("infimum of the rate is {inf}")));
    }
    Ok(SmilePoint {
        t,
        k,
        strike: k,
        implied_vol: (k / (2.0 * t * inf)).sqrt(),
        source: SmileSource::AsymptoticTail,
        stderr: None,
        normalization: Some((k / t).sqrt()),
        clipped: false,
    })
}

#[derive(Debug, Clone)]
pub struct McSmile {
    pub points: Vec<SmilePoint>,
    /// Log-strikes whose price could not be inverted.
    pub dropped: Vec<f64>,
    /// Mean of e^{X_t} and its standard error (put-call parity: should be 1).
    pub forward: f64,
    pub forward_stderr: f64,
}

/// Monte Carlo smile at maturity t for actual log-strikes, from X_t = t^{1/2−H}X^t₁
/// simulated in the small-time scaling with ε = t.
pub fn mc_smile(model: &ModelSpec, t: f64, strikes: &[f64], n_paths: usize, n_steps: usize, seed: u64) -> Result<McSmile> {
    if !(t > 0.0) || n_paths < 2 {
        return Err(Error::Domain("mc_smile needs t > 0 and at least two paths".into()));
    }
    if let Dynamics::RoughBergomi { rho, .. } = model.dynamics {
        if rho > 0.0 {
            return Err(Error::InvalidModel("exp(X) is not a martingale for rough Bergomi with rho > 0".into()));
        }
    }
    let m = model.with_regime(ScalingRegime::SmallTimeLdp { eps: t })?;
    let grid = TimeGrid::new(1.0, n_steps)?;
    let sim = Simulator::new(&m, grid, None)?;
    let dim = sim.dim();
    let scale = t.powf(0.5 - model.dynamics.hurst());
    let xs: Vec<f64> = sim.map(n_paths, seed, |path, _| scale * path[n_steps * dim]);
    let nf = n_paths as f64;
    let mean_sd = |vals: &mut dyn Iterator<Item = f64>| {
        let (mut s, mut s2) = (0.0, 0.0);
        for v in vals {
            s += v;
            s2 += v * v;
        }
        let mean = s / nf;
        let var = ((s2 - nf * mean * mean) / (nf - 1.0)).max(0.0);
        (mean, (var / nf).sqrt())
    };
    let (forward, forward_stderr) = mean_sd(&mut xs.iter().map(|x| x.exp()));
    let mut points = Vec::new();
    let mut dropped = Vec::new();
    for &k in strikes {
        let (price, se) = mean_sd(&mut xs.iter().map(|x| (x.exp() - k.exp()).max(0.0)));
        let intrinsic = (1.0 - k.exp()).max(0.0);
        let clipped = price <= intrinsic;
        let p = if clipped { intrinsic + 1e-12 } else { price };
        match implied_vol(p, t, k) {
            Ok(s) => {
                let vega = bs_vega(t, k, s);
                points.push(SmilePoint {
                    t,
                    k: k / scale,
                    strike: k,
                    implied_vol: s,
                    source: SmileSource::MonteCarlo,
                    stderr: Some(if vega > 0.0 { se / vega } else { f64::INFINITY }),
                    normalization: None,
                    clipped,
                });
            }
            Err(_) => dropped.push(k),
        }
    }
    Ok(McSmile { points, dropped, forward, forward_stderr })
}

#[cfg(test)]
mod tests {
    use super::*;

    const ATM_20: f64 = 0.0796556745540579673;

    #[test]
    fn bs_reference_values() {
        assert_eq!(bs_call(1.0, 0.0, 0.0), 0.0);
        assert!((bs_call(1.0, 0.0, 0.2) - ATM_20).abs() < 1e-15);
        assert!((bs_call(1.0, -10.0, 0.2) - (1.0 - (-10f64).exp())).abs() < 1e-12);
        assert!((implied_vol(ATM_20, 1.0, 0.0).unwrap() - 0.2).abs() < 1e-12);
        assert!(matches!(implied_vol(0.0, 1.0, 0.0), Err(Error::PriceOutOfBounds { .. })));
    }

    #[test]
    fn inversion_lattice() {
        for t in [0.1, 0.5, 2.0] {
            for k in [-0.1, 0.0, 0.2] {
                for s in [0.1, 0.3, 0.8] {
                    let p = bs_call(t, k, s);
                    let iv = implied_vol(p, t, k).unwrap();
                    assert!((iv - s).abs() < 1e-8, "{t} {k} {s} {iv}");
                    assert!((bs_call(t, k, iv) - p).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn small_time_gaussian_prefactor() {
        // t log P(X_t ≥ k) → −k²/(2σ²) for X_t = −σ²t/2 + σW_t
        let (s, k, t) = (0.3f64, 0.2f64, 1e-4f64);
        let z = (k + 0.5 * s * s * t) / (s * t.sqrt());
        // erfc underflows here; Mills-ratio expansion of log P(N > z)
        let lp = -0.5 * z * z - z.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + (1.0 - 1.0 / (z * z) + 3.0 / z.powi(4)).ln();
        let want = -k * k / (2.0 * s * s);
        assert!((t * lp - want).abs() < 0.05 * want.abs());
    }

    #[test]
    fn mdp_smile_is_flat() {
        let m = ModelSpec::new(
            Dynamics::RoughHeston { kappa: 0.3, theta: 0.04, xi: 0.3, rho: -0.7, y0: 0.04, hurst: 0.3 },
            ScalingRegime::SmallTimeLdp { eps: 0.01 },
        )
        .unwrap();
        for k in [0.1, 0.5, 1.0] {
            assert!((smile_mdp(&m, k, 0.01, 0.15).unwrap().implied_vol - 0.2).abs() < 1e-15);
        }
    }
}
