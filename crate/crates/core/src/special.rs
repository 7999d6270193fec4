//! Gauss hypergeometric function, reciprocal gamma and fixed-order Gauss–Legendre rules.

use std::sync::OnceLock;

use statrs::function::gamma::gamma;

/// 1/Γ(x), zero at the poles.
pub fn rgamma(x: f64) -> f64 {
    if x <= 0.0 && x == x.floor() {
        0.0
    } else {
        1.0 / gamma(x)
    }
}

fn series(a: f64, b: f64, c: f64, z: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 0..10_000 {
        let k = k as f64;
        term *= (a + k) * (b + k) / ((c + k) * (k + 1.0)) * z;
        sum += term;
        if term.abs() <= 1e-16 * sum.abs() {
            break;
        }
    }
    sum
}

/// ₂F₁(a, b; c; z) for real z < 1.
///
/// Negative arguments go through Pfaff, z ↦ z/(z−1); arguments above 1/2 through
/// the connection formula at 1 − z, which needs c − a − b off the integers.
pub fn hyp2f1(a: f64, b: f64, c: f64, z: f64) -> f64 {
    assert!(z < 1.0, "hyp2f1 requires z < 1");
    if a == 0.0 || b == 0.0 || z == 0.0 {
        return 1.0;
    }
    if z < 0.0 {
        let w = z / (z - 1.0);
        return (1.0 - z).powf(-a) * hyp2f1(a, c - b, c, w);
    }
    if z <= 0.5 {
        return series(a, b, c, z);
    }
    let s = c - a - b;
    if (s - s.round()).abs() < 1e-8 {
        // Degenerate connection; the direct series still converges for z < 1.
        return series(a, b, c, z);
    }
    let w = 1.0 - z;
    let g_c = gamma(c);
    let t1 = g_c * gamma(s) * rgamma(c - a) * rgamma(c - b) * series(a, b, 1.0 - s, w);
    let t2 = w.powf(s) * g_c * gamma(-s) * rgamma(a) * rgamma(b) * series(c - a, c - b, 1.0 + s, w);
    t1 + t2
}

/// Gauss–Legendre rule on [-1, 1].
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        let degree = std::num::NonZeroUsize::new(n).expect("order >= 1");
        let rule = gauss_quad::legendre::GaussLegendre::new(degree);
        let (nodes, weights) = rule.into_node_weight_pairs().iter().copied().unzip();
        Self { nodes, weights }
    }

    /// Shared 20-point rule.
    pub fn g20() -> &'static GaussLegendre {
        static RULE: OnceLock<GaussLegendre> = OnceLock::new();
        RULE.get_or_init(|| GaussLegendre::new(20))
    }

    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        let h = 0.5 * (b - a);
        let m = 0.5 * (a + b);
        let mut s = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            s += w * f(m + h * x);
        }
        s * h
    }
}

/// ∫₀ˡ f(d) dd for f with an integrable power singularity at d = 0 (exponent ≥ −0.95).
///
/// The integrand receives the distance to the singular end, so callers never form
/// `a + d − a`. Substitutes d = l·y¹⁰, turning the singularity into y^{10(1+e)−1},
/// then sums geometric panels in y toward 1e-30 (y¹⁰ stays a normal float).
pub fn integrate_singular_left(len: f64, f: impl Fn(f64) -> f64) -> f64 {
    if len <= 0.0 {
        return 0.0;
    }
    const Q: i32 = 10;
    let rule = GaussLegendre::g20();
    let g = |y: f64| {
        let yq1 = y.powi(Q - 1);
        f(len * yq1 * y) * len * Q as f64 * yq1
    };
    let mut total = 0.0;
    let mut hi = 1.0;
    while hi > 1e-30 {
        let lo = 0.25 * hi;
        total += rule.integrate(lo, hi, g);
        hi = lo;
    }
    total
}

/// ∫ over an interval of length `len` of f(d_left, d_right), with power singularities
/// allowed at both ends; d_left + d_right = len.
pub fn integrate_singular_both(len: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
    if len <= 0.0 {
        return 0.0;
    }
    let h = 0.5 * len;
    integrate_singular_left(h, |d| f(d, len - d)) + integrate_singular_left(h, |d| f(len - d, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementary_identities() {
        // ₂F₁(1,1;2;z) = −ln(1−z)/z
        for z in [-3.0, -0.7, 0.2, 0.6, 0.9] {
            let want = -(1.0f64 - z).ln() / z;
            // c-a-b = 0 is integral, exercises the series fallback for z > 1/2
            assert!((hyp2f1(1.0, 1.0, 2.0, z) - want).abs() < 1e-10 * want.abs(), "z={z}");
        }
        // ₂F₁(a,b;b;z) = (1−z)^{−a}
        for z in [-5.0, -0.5, 0.3, 0.8, 0.97] {
            let want = (1.0f64 - z).powf(-0.3);
            assert!((hyp2f1(0.3, 0.7, 0.7, z) - want).abs() < 1e-11, "z={z}");
        }
    }

    #[test]
    fn connection_formula_matches_series_near_one() {
        let (a, b, c) = (-0.2, 0.6, 0.8);
        for z in [0.55, 0.7, 0.9] {
            let direct = series(a, b, c, z);
            assert!((hyp2f1(a, b, c, z) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_quadrature() {
        let v = integrate_singular_left(1.0, |x| x.powf(-0.8));
        assert!((v - 5.0).abs() < 1e-10, "{v}");
        let v = integrate_singular_both(2.0, |l, r| l.powf(-0.5) * r.powf(-0.5));
        assert!((v - std::f64::consts::PI).abs() < 1e-10, "{v}");
    }
}
