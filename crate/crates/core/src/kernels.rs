//! Volterra kernels: evaluation, L² norms, per-interval moments and a numerical
//! regularity check of the increment condition
//! ∫₀ʰ|K|² + ∫₀ᵀ|K(t+h) − K(t)|² = O(h^γ).

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_li};

use crate::error::{Error, Result};
use crate::special::{hyp2f1, integrate_singular_left, GaussLegendre};

/// A kernel as written in config files, e.g. `{ "kind": "power_law", "hurst": 0.1 }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelRecord {
    Constant {
        #[serde(default = "one")]
        c: f64,
    },
    PowerLaw {
        hurst: f64,
    },
    RawPower {
        alpha: f64,
    },
    Gamma {
        hurst: f64,
        lambda: f64,
    },
    Fbm {
        hurst: f64,
    },
    Matrix {
        entries: Vec<Vec<Option<KernelRecord>>>,
    },
}

fn one() -> f64 {
    1.0
}

/// Validated kernel. Matrix kernels are upper triangular by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelRecord", into = "KernelRecord")]
pub enum KernelSpec {
    /// K ≡ c.
    Constant(f64),
    /// K(t) = t^{H−½}/Γ(H+½).
    PowerLaw(f64),
    /// K(t) = t^α.
    RawPower(f64),
    /// K(t) = t^{H−½}e^{−λt}/Γ(H+½).
    Gamma { hurst: f64, lambda: f64 },
    /// Non-convolution fBm kernel K_H(t, s).
    Fbm(f64),
    Matrix(Vec<Vec<Option<KernelSpec>>>),
}

impl TryFrom<KernelRecord> for KernelSpec {
    type Error = Error;

    fn try_from(r: KernelRecord) -> Result<Self> {
        match r {
            KernelRecord::Constant { c } => KernelSpec::constant(c),
            KernelRecord::PowerLaw { hurst } => KernelSpec::power_law(hurst),
            KernelRecord::RawPower { alpha } => KernelSpec::raw_power(alpha),
            KernelRecord::Gamma { hurst, lambda } => KernelSpec::gamma(hurst, lambda),
            KernelRecord::Fbm { hurst } => KernelSpec::fbm(hurst),
            KernelRecord::Matrix { entries } => {
                let entries = entries
                    .into_iter()
                    .map(|row| {
                        row.into_iter()
                            .map(|e| e.map(KernelSpec::try_from).transpose())
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                KernelSpec::matrix(entries)
            }
        }
    }
}

impl From<KernelSpec> for KernelRecord {
    fn from(k: KernelSpec) -> Self {
        match k {
            KernelSpec::Constant(c) => KernelRecord::Constant { c },
            KernelSpec::PowerLaw(hurst) => KernelRecord::PowerLaw { hurst },
            KernelSpec::RawPower(alpha) => KernelRecord::RawPower { alpha },
            KernelSpec::Gamma { hurst, lambda } => KernelRecord::Gamma { hurst, lambda },
            KernelSpec::Fbm(hurst) => KernelRecord::Fbm { hurst },
            KernelSpec::Matrix(entries) => KernelRecord::Matrix {
                entries: entries
                    .into_iter()
                    .map(|row| row.into_iter().map(|e| e.map(KernelRecord::from)).collect())
                    .collect(),
            },
        }
    }
}

fn check_hurst(h: f64, hi: f64) -> Result<()> {
    if h > 0.0 && h <= hi {
        Ok(())
    } else {
        Err(Error::InvalidKernel(format!("hurst must lie in (0, {hi}], got {h}")))
    }
}

impl KernelSpec {
    pub fn constant(c: f64) -> Result<Self> {
        if !c.is_finite() {
            return Err(Error::InvalidKernel("constant must be finite".into()));
        }
        Ok(KernelSpec::Constant(c))
    }

    pub fn power_law(hurst: f64) -> Result<Self> {
        check_hurst(hurst, 1.0)?;
        Ok(KernelSpec::PowerLaw(hurst))
    }

    pub fn raw_power(alpha: f64) -> Result<Self> {
        if !(alpha > -0.5 && alpha <= 0.5) {
            return Err(Error::InvalidKernel(format!("raw power exponent must lie in (-1/2, 1/2], got {alpha}")));
        }
        Ok(KernelSpec::RawPower(alpha))
    }

    pub fn gamma(hurst: f64, lambda: f64) -> Result<Self> {
        check_hurst(hurst, 1.0)?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidKernel(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(KernelSpec::Gamma { hurst, lambda })
    }

    pub fn fbm(hurst: f64) -> Result<Self> {
        check_hurst(hurst, 0.5)?;
        Ok(KernelSpec::Fbm(hurst))
    }

    /// Square matrix kernel; entries below the diagonal must be `None`.
    pub fn matrix(entries: Vec<Vec<Option<KernelSpec>>>) -> Result<Self> {
        let d = entries.len();
        if d == 0 {
            return Err(Error::InvalidKernel("empty matrix kernel".into()));
        }
        for (i, row) in entries.iter().enumerate() {
            if row.len() != d {
                return Err(Error::InvalidKernel(format!("matrix kernel row {i} has {} entries, expected {d}", row.len())));
            }
            for (j, e) in row.iter().enumerate() {
                match e {
                    Some(_) if i > j => {
                        return Err(Error::InvalidKernel(format!(
                            "matrix kernel must be upper triangular: entry ({i},{j}) is nonzero"
                        )))
                    }
                    Some(KernelSpec::Matrix(_)) => {
                        return Err(Error::InvalidKernel("nested matrix kernels are not supported".into()))
                    }
                    _ => {}
                }
            }
        }
        Ok(KernelSpec::Matrix(entries))
    }

    /// Regularity exponent γ of the increment condition.
    pub fn gamma_exponent(&self) -> f64 {
        match self {
            KernelSpec::Constant(_) => 1.0,
            KernelSpec::PowerLaw(h) | KernelSpec::Fbm(h) => 2.0 * h,
            KernelSpec::Gamma { hurst, .. } => 2.0 * hurst,
            KernelSpec::RawPower(a) => 1.0 + 2.0 * a,
            KernelSpec::Matrix(rows) => rows
                .iter()
                .flatten()
                .flatten()
                .map(KernelSpec::gamma_exponent)
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Degree d with K(λt) = λ^d K(t), when the kernel is homogeneous.
    pub fn homogeneity(&self) -> Option<f64> {
        match self {
            KernelSpec::Constant(_) => Some(0.0),
            KernelSpec::PowerLaw(h) | KernelSpec::Fbm(h) => Some(h - 0.5),
            KernelSpec::RawPower(a) => Some(*a),
            KernelSpec::Gamma { hurst, lambda } if *lambda == 0.0 => Some(hurst - 0.5),
            _ => None,
        }
    }

    pub fn is_convolution(&self) -> bool {
        !matches!(self, KernelSpec::Fbm(_) | KernelSpec::Matrix(_))
    }

    /// Exponent p with K(t) ~ t^p as t ↓ 0 (0 for bounded kernels).
    pub fn singular_exponent(&self) -> f64 {
        match self {
            KernelSpec::PowerLaw(h) | KernelSpec::Fbm(h) => (h - 0.5).min(0.0),
            KernelSpec::Gamma { hurst, .. } => (hurst - 0.5).min(0.0),
            KernelSpec::RawPower(a) => a.min(0.0),
            _ => 0.0,
        }
    }

    pub fn is_singular(&self) -> bool {
        match self {
            KernelSpec::Matrix(rows) => rows.iter().flatten().flatten().any(KernelSpec::is_singular),
            k => k.singular_exponent() < 0.0,
        }
    }

    fn scalar_conv(&self) -> Result<()> {
        if self.is_convolution() {
            Ok(())
        } else {
            Err(Error::WrongVariant("expected a scalar convolution kernel"))
        }
    }

    /// K(t) for scalar convolution kernels.
    pub fn eval_conv(&self, t: f64) -> Result<f64> {
        self.scalar_conv()?;
        if t < 0.0 {
            return Err(Error::Domain(format!("kernel evaluated at negative time {t}")));
        }
        if t == 0.0 && self.is_singular() {
            return Err(Error::SingularAtZero);
        }
        Ok(self.value(t))
    }

    /// Unchecked K(t), t > 0.
    pub(crate) fn value(&self, t: f64) -> f64 {
        match *self {
            KernelSpec::Constant(c) => c,
            KernelSpec::PowerLaw(h) => {
                if h == 0.5 {
                    1.0
                } else {
                    t.powf(h - 0.5) / gamma(h + 0.5)
                }
            }
            KernelSpec::RawPower(a) => {
                if a == 0.0 {
                    1.0
                } else {
                    t.powf(a)
                }
            }
            KernelSpec::Gamma { hurst, lambda } => t.powf(hurst - 0.5) * (-lambda * t).exp() / gamma(hurst + 0.5),
            KernelSpec::Fbm(_) | KernelSpec::Matrix(_) => f64::NAN,
        }
    }

    /// K_H(t, s) for the fBm kernel, 0 < s < t.
    pub fn eval_nonconv(&self, t: f64, s: f64) -> Result<f64> {
        let KernelSpec::Fbm(h) = *self else {
            return Err(Error::WrongVariant("eval_nonconv needs the fbm kernel"));
        };
        if !(s > 0.0 && s < t) {
            return Err(Error::Domain(format!("fbm kernel needs 0 < s < t, got t={t}, s={s}")));
        }
        Ok(fbm_value(h, t - s, t, s))
    }

    /// ∫₀ᵗ K(s)² ds.
    pub fn l2_norm_sq(&self, t: f64) -> Result<f64> {
        self.scalar_conv()?;
        if t < 0.0 {
            return Err(Error::Domain(format!("negative horizon {t}")));
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        Ok(match *self {
            KernelSpec::Constant(c) => c * c * t,
            KernelSpec::PowerLaw(h) => {
                let g = gamma(h + 0.5);
                t.powf(2.0 * h) / (2.0 * h * g * g)
            }
            KernelSpec::RawPower(a) => t.powf(2.0 * a + 1.0) / (2.0 * a + 1.0),
            KernelSpec::Gamma { hurst, lambda } => {
                let g = gamma(hurst + 0.5);
                if lambda == 0.0 {
                    t.powf(2.0 * hurst) / (2.0 * hurst * g * g)
                } else {
                    let l2 = 2.0 * lambda;
                    l2.powf(-2.0 * hurst) * gamma_li(2.0 * hurst, l2 * t) / (g * g)
                }
            }
            _ => unreachable!(),
        })
    }

    /// (∫ₐᵇ K(u) du, ∫ₐᵇ K(u) u du) for scalar convolution kernels, 0 ≤ a < b.
    pub fn moments(&self, a: f64, b: f64) -> (f64, f64) {
        match *self {
            KernelSpec::Constant(c) => (c * (b - a), 0.5 * c * (b * b - a * a)),
            KernelSpec::PowerLaw(h) => {
                let p = h - 0.5;
                power_moments(p, a, b, 1.0 / gamma(h + 0.5))
            }
            KernelSpec::RawPower(alpha) => power_moments(alpha, a, b, 1.0),
            KernelSpec::Gamma { hurst, lambda } => {
                if lambda == 0.0 {
                    return power_moments(hurst - 0.5, a, b, 1.0 / gamma(hurst + 0.5));
                }
                let m0 = |u: f64| self.value(u);
                let m1 = |u: f64| self.value(u) * u;
                if a == 0.0 {
                    (integrate_singular_left(b, m0), integrate_singular_left(b, m1))
                } else {
                    let rule = GaussLegendre::g20();
                    (rule.integrate(a, b, m0), rule.integrate(a, b, m1))
                }
            }
            KernelSpec::Fbm(_) | KernelSpec::Matrix(_) => (f64::NAN, f64::NAN),
        }
    }

    /// Numerical check of the increment condition with exponent `gamma_claim`.
    pub fn check_regularity(&self, gamma_claim: f64, h_grid: &[f64], horizon: f64) -> Result<RegularityReport> {
        if h_grid.len() < 2 || h_grid.windows(2).any(|w| !(w[1] < w[0])) || h_grid.iter().any(|&h| h <= 0.0) {
            return Err(Error::Domain("h_grid must be strictly decreasing positive values (at least two)".into()));
        }
        let entries: Vec<&KernelSpec> = match self {
            KernelSpec::Matrix(rows) => rows.iter().flatten().flatten().collect(),
            KernelSpec::Fbm(_) => return Err(Error::WrongVariant("regularity check needs convolution kernels")),
            k => vec![k],
        };
        let values: Vec<f64> = h_grid
            .iter()
            .map(|&h| entries.iter().map(|k| k.increment_norm(h, horizon)).sum())
            .collect();
        let slope = log_log_slope(h_grid, &values);
        Ok(RegularityReport {
            h: h_grid.to_vec(),
            values,
            fitted_slope: slope,
            gamma_claim,
            tolerance: REGULARITY_TOLERANCE,
            pass: slope >= gamma_claim - REGULARITY_TOLERANCE,
        })
    }

    fn increment_norm(&self, h: f64, horizon: f64) -> f64 {
        let head = self.l2_norm_sq(h).unwrap_or(f64::NAN);
        let diff = |t: f64| {
            let d = self.value(t + h) - self.value(t);
            d * d
        };
        let first = integrate_singular_left(h.min(horizon), diff);
        let rule = GaussLegendre::g20();
        let mut rest = 0.0;
        let mut lo = h;
        while lo < horizon {
            let hi = (2.0 * lo).min(horizon);
            rest += rule.integrate(lo, hi, diff);
            lo = hi;
        }
        head + first + rest
    }
}

/// Fitted-slope tolerance of [`KernelSpec::check_regularity`].
pub const REGULARITY_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub h: Vec<f64>,
    pub values: Vec<f64>,
    pub fitted_slope: f64,
    pub gamma_claim: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn power_moments(p: f64, a: f64, b: f64, scale: f64) -> (f64, f64) {
    let m0 = (b.powf(p + 1.0) - a.powf(p + 1.0)) / (p + 1.0);
    let m1 = (b.powf(p + 2.0) - a.powf(p + 2.0)) / (p + 2.0);
    (scale * m0, scale * m1)
}

/// K_H(t, s) given the lag d = t − s computed by the caller.
pub(crate) fn fbm_value(h: f64, lag: f64, t: f64, s: f64) -> f64 {
    if h == 0.5 {
        return 1.0;
    }
    lag.powf(h - 0.5) / gamma(h + 0.5) * hyp2f1(h - 0.5, 0.5 - h, h + 0.5, 1.0 - t / s)
}

pub(crate) fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

pub fn eval_conv(k: &KernelSpec, t: f64) -> Result<f64> {
    k.eval_conv(t)
}

pub fn eval_nonconv(k: &KernelSpec, t: f64, s: f64) -> Result<f64> {
    k.eval_nonconv(t, s)
}

pub fn l2_norm_sq(k: &KernelSpec, t: f64) -> Result<f64> {
    k.l2_norm_sq(t)
}

pub fn check_regularity(k: &KernelSpec, gamma_claim: f64, h_grid: &[f64], horizon: f64) -> Result<RegularityReport> {
    k.check_regularity(gamma_claim, h_grid, horizon)
}

/// Dyadic grid 2^{-lo}, ..., 2^{-hi}.
pub fn dyadic_h_grid(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|e| 2f64.powi(-e)).collect()
}
