//! The four rough volatility models, their scaling regimes and the deterministic
//! limit systems that carry the rate functions.
//!
//! Every model is written with state (X, Y₁..Yₘ) and driving noise
//! (W⊥, W₁..Wₘ); control component 0 is u (acting on W⊥ only) and component j ≥ 1
//! is v_j. The log-price is driven by B = ρ̄W⊥ + Σρ_jW_j.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridFunction, TimeGrid};
use crate::kernels::KernelSpec;
use crate::volterra::{BranchPolicy, Coefficients, LimitSystem, Source};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dynamics {
    RoughSteinStein { kappa: f64, theta: f64, xi: f64, rho: f64, y0: f64, hurst: f64 },
    /// y0 = log V₀.
    RoughBergomi { a: f64, rho: f64, y0: f64, hurst: f64 },
    RoughHeston { kappa: f64, theta: f64, xi: f64, rho: f64, y0: f64, hurst: f64 },
    /// Y = y0 + L Z − a t^{2H₁}; `l` is lower triangular, `hurst` ascending.
    MultiRoughBergomi { l: Vec<Vec<f64>>, a: Vec<f64>, y0: Vec<f64>, rho: Vec<f64>, hurst: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalingRegime {
    SmallTimeLdp { eps: f64 },
    SmallTimeMdp { eps: f64, beta: f64 },
    TailLdp { eps: f64 },
    TailMdp { eps: f64, beta: f64 },
}

impl ScalingRegime {
    pub fn eps(&self) -> f64 {
        match *self {
            ScalingRegime::SmallTimeLdp { eps }
            | ScalingRegime::SmallTimeMdp { eps, .. }
            | ScalingRegime::TailLdp { eps }
            | ScalingRegime::TailMdp { eps, .. } => eps,
        }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        match *self {
            ScalingRegime::SmallTimeLdp { .. } => ScalingRegime::SmallTimeLdp { eps },
            ScalingRegime::SmallTimeMdp { beta, .. } => ScalingRegime::SmallTimeMdp { eps, beta },
            ScalingRegime::TailLdp { .. } => ScalingRegime::TailLdp { eps },
            ScalingRegime::TailMdp { beta, .. } => ScalingRegime::TailMdp { eps, beta },
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match *self {
            ScalingRegime::SmallTimeMdp { beta, .. } | ScalingRegime::TailMdp { beta, .. } => Some(beta),
            _ => None,
        }
    }

    pub fn is_tail(&self) -> bool {
        matches!(self, ScalingRegime::TailLdp { .. } | ScalingRegime::TailMdp { .. })
    }

    pub fn is_mdp(&self) -> bool {
        self.beta().is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRecord {
    dynamics: Dynamics,
    regime: ScalingRegime,
}

/// A validated model together with its scaling regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRecord", into = "ModelRecord")]
pub struct ModelSpec {
    pub dynamics: Dynamics,
    pub regime: ScalingRegime,
}

impl TryFrom<ModelRecord> for ModelSpec {
    type Error = Error;
    fn try_from(r: ModelRecord) -> Result<Self> {
        ModelSpec::new(r.dynamics, r.regime)
    }
}

impl From<ModelSpec> for ModelRecord {
    fn from(m: ModelSpec) -> Self {
        ModelRecord { dynamics: m.dynamics, regime: m.regime }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidModel(msg()))
    }
}

fn check_hurst(h: f64) -> Result<()> {
    check(h > 0.0 && h <= 0.5, || format!("hurst must lie in (0, 1/2], got {h}"))
}

fn check_rho(rho: f64) -> Result<()> {
    check(rho.abs() < 1.0, || format!("correlation must satisfy |rho| < 1, got {rho}"))
}

impl ModelSpec {
    pub fn new(dynamics: Dynamics, regime: ScalingRegime) -> Result<Self> {
        match &dynamics {
            Dynamics::RoughSteinStein { kappa, xi, rho, y0, hurst, theta } => {
                check_hurst(*hurst)?;
                check_rho(*rho)?;
                check(*y0 > 0.0, || format!("y0 must be > 0, got {y0}"))?;
                check(*xi >= 0.0, || format!("xi must be >= 0, got {xi}"))?;
                check(*kappa >= 0.0 && theta.is_finite(), || format!("kappa must be >= 0, got {kappa}"))?;
            }
            Dynamics::RoughBergomi { a, rho, y0, hurst } => {
                check_hurst(*hurst)?;
                check_rho(*rho)?;
                check(a.is_finite() && y0.is_finite(), || "a and y0 must be finite".into())?;
            }
            Dynamics::RoughHeston { kappa, theta, xi, rho, y0, hurst } => {
                check_hurst(*hurst)?;
                check_rho(*rho)?;
                check(*y0 > 0.0, || format!("y0 must be > 0, got {y0}"))?;
                check(*xi > 0.0, || format!("xi must be > 0, got {xi}"))?;
                check(*kappa >= 0.0, || format!("kappa must be >= 0, got {kappa}"))?;
                check(*theta >= 0.0, || format!("theta must be >= 0, got {theta}"))?;
            }
            Dynamics::MultiRoughBergomi { l, a, y0, rho, hurst } => {
                let m = hurst.len();
                check(m >= 1, || "at least one factor is required".into())?;
                check(a.len() == m && y0.len() == m && rho.len() == m && l.len() == m, || {
                    format!("l, a, y0, rho and hurst must all have {m} entries")
                })?;
                for (i, row) in l.iter().enumerate() {
                    check(row.len() == m, || format!("row {i} of l must have {m} entries"))?;
                    for (j, &x) in row.iter().enumerate() {
                        check(j <= i || x == 0.0, || format!("l must be lower triangular, l[{i}][{j}] = {x}"))?;
                    }
                }
                for &h in hurst {
                    check_hurst(h)?;
                }
                check(hurst.windows(2).all(|w| w[0] <= w[1]), || "hurst must be sorted ascending".into())?;
                let s: f64 = rho.iter().map(|r| r * r).sum();
                check(s < 1.0, || format!("sum of squared correlations must be < 1, got {s}"))?;
            }
        }
        let eps = regime.eps();
        check(eps > 0.0 && eps.is_finite(), || format!("eps must be > 0, got {eps}"))?;
        let h = dynamics.hurst();
        match regime {
            ScalingRegime::SmallTimeLdp { .. } => {}
            ScalingRegime::SmallTimeMdp { beta, .. } => {
                check(beta > 0.0 && beta < h, || format!("beta must lie in (0, H) = (0, {h}), got {beta}"))?;
            }
            ScalingRegime::TailLdp { .. } => {
                check(
                    matches!(dynamics, Dynamics::RoughSteinStein { .. } | Dynamics::RoughHeston { .. }),
                    || "tail regimes exist only for rough Stein-Stein and rough Heston".into(),
                )?;
            }
            ScalingRegime::TailMdp { beta, .. } => {
                check(matches!(dynamics, Dynamics::RoughSteinStein { .. }), || {
                    "the tail moderate regime exists only for rough Stein-Stein".into()
                })?;
                check(beta > 0.0 && beta < 1.0, || format!("beta must lie in (0, 1), got {beta}"))?;
            }
        }
        Ok(Self { dynamics, regime })
    }

    pub fn with_regime(&self, regime: ScalingRegime) -> Result<Self> {
        Self::new(self.dynamics.clone(), regime)
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        self.with_regime(self.regime.with_eps(eps))
    }

    /// ϑ_ε: ε^H (small time) or ε (tail).
    pub fn vartheta(&self) -> f64 {
        let eps = self.regime.eps();
        if self.regime.is_tail() {
            eps
        } else {
            eps.powf(self.dynamics.hurst())
        }
    }

    /// h_ε = ε^{−β} in the moderate regimes.
    pub fn h_eps(&self) -> Option<f64> {
        self.regime.beta().map(|b| self.regime.eps().powf(-b))
    }

    /// Speed s(ε) with P ≈ exp(−I/s): ϑ² for large deviations, h⁻² for moderate.
    pub fn speed(&self) -> f64 {
        match self.h_eps() {
            Some(h) => 1.0 / (h * h),
            None => self.vartheta().powi(2),
        }
    }

    /// Multiplier of a control in the Brownian shift W + c∫v: 1/ϑ or h.
    pub fn shift_scale(&self) -> f64 {
        self.h_eps().unwrap_or(1.0 / self.vartheta())
    }

    /// Normalization of the moderate deviation process, ϑ h.
    pub fn mdp_scale(&self) -> Option<f64> {
        self.h_eps().map(|h| self.vartheta() * h)
    }
}

impl Dynamics {
    /// H, or H₁ for the multifactor model.
    pub fn hurst(&self) -> f64 {
        match self {
            Dynamics::RoughSteinStein { hurst, .. }
            | Dynamics::RoughBergomi { hurst, .. }
            | Dynamics::RoughHeston { hurst, .. } => *hurst,
            Dynamics::MultiRoughBergomi { hurst, .. } => hurst[0],
        }
    }

    pub fn n_factors(&self) -> usize {
        match self {
            Dynamics::MultiRoughBergomi { hurst, .. } => hurst.len(),
            _ => 1,
        }
    }

    /// Number of factors sharing the smallest Hurst index.
    pub fn m_star(&self) -> usize {
        match self {
            Dynamics::MultiRoughBergomi { hurst, .. } => hurst.iter().take_while(|&&h| h <= hurst[0] + 1e-12).count(),
            _ => 1,
        }
    }

    pub fn y0(&self) -> Vec<f64> {
        match self {
            Dynamics::RoughSteinStein { y0, .. } | Dynamics::RoughBergomi { y0, .. } | Dynamics::RoughHeston { y0, .. } => {
                vec![*y0]
            }
            Dynamics::MultiRoughBergomi { y0, .. } => y0.clone(),
        }
    }

    /// Correlations (ρ₁..ρₘ) of B with the volatility drivers.
    pub fn rhos(&self) -> Vec<f64> {
        match self {
            Dynamics::RoughSteinStein { rho, .. } | Dynamics::RoughBergomi { rho, .. } | Dynamics::RoughHeston { rho, .. } => {
                vec![*rho]
            }
            Dynamics::MultiRoughBergomi { rho, .. } => rho.clone(),
        }
    }

    pub fn rho_bar(&self) -> f64 {
        (1.0 - self.rhos().iter().map(|r| r * r).sum::<f64>()).sqrt()
    }

    /// Instantaneous variance Σ(y).
    pub fn variance(&self, y: &[f64]) -> f64 {
        match self {
            Dynamics::RoughSteinStein { .. } => y[0] * y[0],
            Dynamics::RoughBergomi { .. } => y[0].exp(),
            Dynamics::RoughHeston { .. } => y[0].max(0.0),
            Dynamics::MultiRoughBergomi { .. } => y.iter().map(|v| v.exp()).sum(),
        }
    }

    /// Volatility multiplying dB: y for Stein-Stein (signed), √Σ otherwise, and
    /// Σ e^{y_i/2} for the multifactor model.
    pub fn vol(&self, y: &[f64]) -> f64 {
        match self {
            Dynamics::RoughSteinStein { .. } => y[0],
            Dynamics::RoughBergomi { .. } => (0.5 * y[0]).exp(),
            Dynamics::RoughHeston { .. } => y[0].max(0.0).sqrt(),
            Dynamics::MultiRoughBergomi { .. } => y.iter().map(|v| (0.5 * v).exp()).sum(),
        }
    }

    /// ∂vol/∂y_i.
    pub fn vol_derivative(&self, y: &[f64], i: usize) -> f64 {
        match self {
            Dynamics::RoughSteinStein { .. } => 1.0,
            Dynamics::RoughBergomi { .. } => 0.5 * (0.5 * y[0]).exp(),
            Dynamics::RoughHeston { .. } => {
                if y[0] > 0.0 {
                    0.5 / y[0].sqrt()
                } else {
                    0.0
                }
            }
            Dynamics::MultiRoughBergomi { .. } => 0.5 * (0.5 * y[i]).exp(),
        }
    }

    /// Diffusion ζ(y) of a single-factor volatility.
    pub fn zeta(&self, y: f64) -> f64 {
        match self {
            Dynamics::RoughSteinStein { xi, .. } => *xi,
            Dynamics::RoughBergomi { .. } | Dynamics::MultiRoughBergomi { .. } => 1.0,
            Dynamics::RoughHeston { xi, .. } => xi * y.max(0.0).sqrt(),
        }
    }

    pub fn zeta_derivative(&self, y: f64) -> f64 {
        match self {
            Dynamics::RoughHeston { xi, .. } if y > 0.0 => 0.5 * xi / y.sqrt(),
            _ => 0.0,
        }
    }

    /// Volatility kernel K₂ (the j-th factor kernel for the multifactor model).
    pub fn vol_kernel(&self, j: usize) -> KernelSpec {
        match self {
            Dynamics::MultiRoughBergomi { hurst, .. } => KernelSpec::PowerLaw(hurst[j]),
            d => KernelSpec::PowerLaw(d.hurst()),
        }
    }

    /// Drift kernel K₁ of Stein-Stein and Heston.
    pub fn drift_kernel(&self) -> Option<KernelSpec> {
        match self {
            Dynamics::RoughSteinStein { .. } => Some(KernelSpec::Constant(1.0)),
            Dynamics::RoughHeston { hurst, .. } => Some(KernelSpec::PowerLaw(*hurst)),
            _ => None,
        }
    }

    pub fn is_sqrt(&self) -> bool {
        matches!(self, Dynamics::RoughHeston { .. })
    }
}

/// Which limit equation a [`LimitModel`] represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitKind {
    /// φ = x̄₀ + K ∗ [b(φ) + σ(φ)v], the large deviations skeleton.
    Ldp,
    /// ψ = K ∗ [∇b(X̄)ψ + σ(X̄)v] around the mean X̄, in deviation coordinates.
    Mdp,
}

/// Limit coefficients of a model in its regime.
///
/// Small-time limits have b ≡ 0. Tail limits keep the drifts
/// (−½vol², −κy). Moderate limits freeze σ at the mean, which is (0, y₀) in
/// small time and 0 in the tail. With `y_only` the volatility block alone is
/// solved (it does not feed on X).
#[derive(Debug, Clone)]
pub struct LimitModel {
    pub model: ModelSpec,
    pub kind: LimitKind,
    pub y_only: bool,
    m: usize,
    frozen_vol: f64,
    frozen_zeta: f64,
}

impl LimitModel {
    pub fn new(model: &ModelSpec, kind: LimitKind, y_only: bool) -> Self {
        let d = &model.dynamics;
        let y0 = if model.regime.is_tail() { vec![0.0; d.n_factors()] } else { d.y0() };
        Self {
            model: model.clone(),
            kind,
            y_only,
            m: d.n_factors(),
            frozen_vol: d.vol(&y0),
            frozen_zeta: d.zeta(y0[0]),
        }
    }

    /// The limit attached to the model's regime.
    pub fn for_regime(model: &ModelSpec, y_only: bool) -> Self {
        let kind = if model.regime.is_mdp() { LimitKind::Mdp } else { LimitKind::Ldp };
        Self::new(model, kind, y_only)
    }

    fn off(&self) -> usize {
        usize::from(!self.y_only)
    }

    /// Initial point: (0, y₀) for small-time large deviations, 0 otherwise.
    pub fn x0(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        if self.kind == LimitKind::Ldp && !self.model.regime.is_tail() {
            for (i, y) in self.model.dynamics.y0().into_iter().enumerate() {
                x[self.off() + i] = y;
            }
        }
        x
    }

    /// Value of the volatility components corresponding to state zero, added back
    /// when reporting a moderate limit as a volatility path.
    pub fn y_center(&self) -> Vec<f64> {
        if self.model.regime.is_tail() {
            vec![0.0; self.m]
        } else {
            self.model.dynamics.y0()
        }
    }

    fn has_drift(&self) -> bool {
        self.model.regime.is_tail()
    }

    /// Discretize on `grid` with the right kernel on every term.
    pub fn system(&self, grid: TimeGrid, policy: BranchPolicy) -> Result<LimitSystem<'_>> {
        let mut sys = LimitSystem::new(grid, self.x0(), self, policy)?;
        let off = self.off();
        let one = KernelSpec::Constant(1.0);
        let dynamics = &self.model.dynamics;
        if !self.y_only {
            if self.has_drift() {
                sys.add_term(0, &one, Source::Drift { comp: 0 })?;
            }
            for k in 0..=self.m {
                sys.add_term(0, &one, Source::Diffusion { comp: 0, noise: k })?;
            }
        }
        if self.has_drift() {
            let k1 = dynamics.drift_kernel().expect("tail models carry a drift kernel");
            sys.add_term(off, &k1, Source::Drift { comp: off })?;
        }
        match dynamics {
            Dynamics::MultiRoughBergomi { .. } => {
                let ms = dynamics.m_star();
                for i in 0..self.m {
                    for j in 0..ms.min(i + 1) {
                        sys.add_term(off + i, &dynamics.vol_kernel(j), Source::Diffusion { comp: off + i, noise: off + j })?;
                    }
                }
            }
            _ => sys.add_term(off, &dynamics.vol_kernel(0), Source::Diffusion { comp: off, noise: off })?,
        }
        Ok(sys)
    }
}

impl Coefficients for LimitModel {
    fn dim(&self) -> usize {
        self.m + self.off()
    }

    fn noise_dim(&self) -> usize {
        self.m + self.off()
    }

    fn drift(&self, _node: usize, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if !self.has_drift() {
            return;
        }
        let off = self.off();
        let (kappa, quad) = match self.model.dynamics {
            Dynamics::RoughSteinStein { kappa, .. } => (kappa, true),
            Dynamics::RoughHeston { kappa, .. } => (kappa, false),
            _ => unreachable!("validated: tail regimes are Stein-Stein or Heston"),
        };
        let y = x[off];
        match self.kind {
            LimitKind::Ldp => {
                if !self.y_only {
                    out[0] = if quad { -0.5 * y * y } else { -0.5 * y.max(0.0) };
                }
                out[off] = -kappa * y;
            }
            // ∇b at the zero mean: the −½y² term has zero derivative
            LimitKind::Mdp => out[off] = -kappa * y,
        }
    }

    fn diffusion(&self, _node: usize, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let (d, off) = (self.dim(), self.off());
        let dynamics = &self.model.dynamics;
        let y = &x[off..];
        let (vol, zeta) = match self.kind {
            LimitKind::Ldp => (dynamics.vol(y), dynamics.zeta(y[0])),
            LimitKind::Mdp => (self.frozen_vol, self.frozen_zeta),
        };
        if !self.y_only {
            out[0] = dynamics.rho_bar() * vol;
            for (j, r) in dynamics.rhos().iter().enumerate() {
                out[1 + j] = r * vol;
            }
        }
        match dynamics {
            Dynamics::MultiRoughBergomi { l, .. } => {
                for i in 0..self.m {
                    for j in 0..=i {
                        out[(off + i) * d + off + j] = l[i][j];
                    }
                }
            }
            _ => out[off * d + off] = zeta,
        }
    }

    fn drift_jacobian(&self, _node: usize, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if !self.has_drift() {
            return;
        }
        let (d, off) = (self.dim(), self.off());
        let (kappa, quad) = match self.model.dynamics {
            Dynamics::RoughSteinStein { kappa, .. } => (kappa, true),
            Dynamics::RoughHeston { kappa, .. } => (kappa, false),
            _ => unreachable!(),
        };
        if self.kind == LimitKind::Ldp && !self.y_only {
            out[off] = if quad { -x[off] } else if x[off] > 0.0 { -0.5 } else { 0.0 };
        }
        out[off * d + off] = -kappa;
    }

    fn diffusion_jacobian(&self, _node: usize, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if self.kind == LimitKind::Mdp {
            return;
        }
        let (d, off) = (self.dim(), self.off());
        let m_noise = self.noise_dim();
        let dynamics = &self.model.dynamics;
        let y = &x[off..];
        if !self.y_only {
            let rhos = dynamics.rhos();
            for l in 0..self.m {
                let dv = dynamics.vol_derivative(y, l);
                out[l + off] = dynamics.rho_bar() * dv;
                for (j, r) in rhos.iter().enumerate() {
                    out[(1 + j) * d + l + off] = r * dv;
                }
            }
        }
        if self.m == 1 {
            out[(off * m_noise + off) * d + off] = dynamics.zeta_derivative(y[0]);
        }
    }

    fn sqrt_components(&self) -> Vec<bool> {
        let mut s = vec![false; self.dim()];
        if self.kind == LimitKind::Ldp && self.model.dynamics.is_sqrt() {
            s[self.off()] = true;
        }
        s
    }
}

/// X̄ = x₀ + K ∗ b(X̄): the zero-control solution of the large deviations limit,
/// as (X̄, Ȳ₁..Ȳₘ).
pub fn solve_mean_limit(model: &ModelSpec, grid: TimeGrid) -> Result<GridFunction> {
    let lm = LimitModel::new(model, LimitKind::Ldp, false);
    let sys = lm.system(grid, BranchPolicy::ContinuePositive)?;
    let zero = vec![0.0; grid.n_steps * sys.noise_dim()];
    let traj = sys.solve(&zero, &zero)?;
    Ok(sys.path(&traj))
}
