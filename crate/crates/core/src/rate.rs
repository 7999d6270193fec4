//! Rate functions: closed-form evaluators on given paths and the terminal
//! variational problem solved by penalised quasi-Newton descent.

use std::cell::RefCell;

use argmin::core::{CostFunction, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;

use crate::error::{Error, Result};
use crate::frac::{energy, rl_derivative_inverse, rl_derivative_inverse_from, rl_integral, FracOrder};
use crate::grid::{GridFunction, TimeGrid};
use crate::models::{Dynamics, LimitModel, ModelSpec};
use crate::volterra::{BranchPolicy, LimitSystem, Trajectory};

/// Threshold below which Σ, ζ or a volatility path count as zero.
pub const ZERO_TOL: f64 = 1e-12;
/// Difference-quotient energy ratio (full vs half resolution) treated as a blow-up.
pub const AC_BLOWUP: f64 = 1e6;
pub const DEFAULT_HESTON_DELTA: f64 = 1e-4;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverDiag {
    pub iterations: u64,
    pub constraint_violation: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct RateResult {
    /// The rate. For the variational solver this is the grid-extrapolated value.
    pub value: f64,
    /// Energy of `optimal_control` on its grid.
    pub discrete_value: f64,
    /// Richardson estimate (δ → 0 for Heston, dt → 0 for the solver).
    pub extrapolated: Option<f64>,
    /// Node-valued controls (u, v₁..vₘ).
    pub optimal_control: Option<GridFunction>,
    /// (φ, ϑ₁..ϑₘ) in the coordinates of the corresponding limit equation.
    pub optimal_path: Option<GridFunction>,
    pub regularization_delta: Option<f64>,
    pub diag: SolverDiag,
}

impl RateResult {
    pub fn infinite() -> Self {
        Self {
            value: f64::INFINITY,
            discrete_value: f64::INFINITY,
            extrapolated: None,
            optimal_control: None,
            optimal_path: None,
            regularization_delta: None,
            diag: SolverDiag { converged: true, ..Default::default() },
        }
    }

    fn from_controls(control: GridFunction, path: GridFunction) -> Self {
        let e = energy(&control);
        Self {
            value: e,
            discrete_value: e,
            extrapolated: None,
            optimal_control: Some(control),
            optimal_path: Some(path),
            regularization_delta: None,
            diag: SolverDiag { converged: true, ..Default::default() },
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

fn check_scalar_pair(phi: &GridFunction, vphi: &GridFunction, vdim: usize) -> Result<()> {
    if phi.dim() != 1 || vphi.dim() != vdim {
        return Err(Error::Dimension(format!(
            "expected phi of dim 1 and vphi of dim {vdim}, got {} and {}",
            phi.dim(),
            vphi.dim()
        )));
    }
    if phi.grid() != vphi.grid() {
        return Err(Error::Dimension("phi and vphi live on different grids".into()));
    }
    Ok(())
}

/// Node values of φ̇: one-sided at the ends, averaged interval slopes inside.
fn node_slopes(phi: &GridFunction) -> Vec<f64> {
    let g = phi.grid();
    let n = g.n_steps;
    let dt = g.dt();
    let s: Vec<f64> = (0..n).map(|j| (phi.get(j + 1, 0) - phi.get(j, 0)) / dt).collect();
    (0..=n)
        .map(|i| match i {
            0 => s[0],
            i if i == n => s[n - 1],
            i => 0.5 * (s[i - 1] + s[i]),
        })
        .collect()
}

fn quotient_energy(phi: &GridFunction) -> f64 {
    let g = phi.grid();
    let dt = g.dt();
    (0..g.n_steps).map(|j| (phi.get(j + 1, 0) - phi.get(j, 0)).powi(2) / dt).sum()
}

/// Refinement test for absolute continuity of a scalar path.
pub fn is_absolutely_continuous(phi: &GridFunction) -> bool {
    let n = phi.grid().n_steps;
    if n < 4 || n % 2 == 1 {
        return true;
    }
    let fine = quotient_energy(phi);
    let coarse = quotient_energy(&phi.subsample(2).expect("even step count"));
    !(fine > AC_BLOWUP * coarse && fine > 1e-20)
}

fn starts_at(f: &GridFunction, c: usize, value: f64) -> bool {
    (f.get(0, c) - value).abs() <= ZERO_TOL * value.abs().max(1.0)
}

/// D^α(f − center) at the nodes, for the component `c`, as the exact inverse of
/// the product integration used by the limit solvers.
fn frac_derivative(f: &GridFunction, c: usize, center: f64, alpha: f64) -> Result<Vec<f64>> {
    let g = f.component(c).map(|x| x - center);
    Ok(rl_derivative_inverse(&g, FracOrder::new(alpha)?).values().to_vec())
}

fn frac_integral(f: &GridFunction, c: usize, alpha: f64) -> Result<Vec<f64>> {
    let g = f.component(c);
    if alpha == 0.0 {
        return Ok(g.values().to_vec());
    }
    Ok(rl_integral(&g, FracOrder::new(alpha)?).values().to_vec())
}

fn build(grid: TimeGrid, cols: &[&[f64]]) -> GridFunction {
    let dim = cols.len();
    let values = (0..grid.n_nodes()).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
    GridFunction::new(grid, dim, values).expect("columns have grid length")
}

fn stack_path(phi: &GridFunction, vphi: &[f64]) -> GridFunction {
    build(*phi.grid(), &[phi.values(), vphi])
}

fn single_factor(model: &ModelSpec, what: &str) -> Result<()> {
    if model.dynamics.n_factors() != 1 {
        return Err(Error::NotApplicable(format!("{what} needs a single-factor model")));
    }
    Ok(())
}

/// Large deviations rate of a pair (φ, ϑ) in the small-time regime, by inverting
/// the limit equation for the controls.
pub fn ldp_rate_pair(model: &ModelSpec, phi: &GridFunction, vphi: &GridFunction) -> Result<RateResult> {
    single_factor(model, "ldp_rate_pair")?;
    if model.regime.is_tail() {
        return Err(Error::NotApplicable("tail regimes use tail_rate_steinstein / tail_rate_heston".into()));
    }
    check_scalar_pair(phi, vphi, 1)?;
    let d = &model.dynamics;
    let y0 = d.y0()[0];
    if !starts_at(phi, 0, 0.0) || !starts_at(vphi, 0, y0) || !is_absolutely_continuous(phi) {
        return Ok(RateResult::infinite());
    }
    let rho = d.rhos()[0];
    let rho_bar = d.rho_bar();
    let dv = frac_derivative(vphi, 0, y0, d.hurst() + 0.5)?;
    let slopes = node_slopes(phi);
    let zeros = vphi.values().iter().filter(|&&y| d.zeta(y).abs() <= ZERO_TOL).count();
    if rho != 0.0 && zeros >= 2 {
        return Err(Error::NotApplicable(format!("zeta vanishes on {zeros} nodes with rho != 0")));
    }
    let n1 = phi.grid().n_nodes();
    let mut u = vec![0.0; n1];
    let mut v = vec![0.0; n1];
    for i in 0..n1 {
        let y = vphi.get(i, 0);
        let z = d.zeta(y);
        if z.abs() > ZERO_TOL {
            v[i] = dv[i] / z;
        }
        let s = d.vol(&[y]);
        if s * s > ZERO_TOL {
            u[i] = (slopes[i] / s - rho * v[i]) / rho_bar;
        }
    }
    Ok(RateResult::from_controls(build(*phi.grid(), &[&u, &v]), stack_path(phi, vphi.values())))
}

fn check_nonnegative(vphi: &GridFunction) -> Result<()> {
    for (i, &y) in vphi.values().iter().enumerate() {
        if y < -ZERO_TOL {
            return Err(Error::NegativePath { node: i, value: y });
        }
    }
    Ok(())
}

fn perturbed(vphi: &GridFunction, delta: f64, hurst: f64) -> GridFunction {
    let g = *vphi.grid();
    let vals = (0..g.n_nodes()).map(|i| vphi.get(i, 0) + delta * g.t(i).powf(hurst + 0.5)).collect();
    GridFunction::scalar(g, vals).expect("grid length")
}

fn heston_params(model: &ModelSpec) -> Result<(f64, f64, f64, f64)> {
    match model.dynamics {
        Dynamics::RoughHeston { kappa, xi, rho, hurst, .. } => Ok((kappa, xi, rho, hurst)),
        _ => Err(Error::NotApplicable("rough Heston rate on a different model".into())),
    }
}

fn with_delta(
    delta: f64,
    eval: impl Fn(f64) -> Result<RateResult>,
) -> Result<RateResult> {
    if delta < 0.0 || !delta.is_finite() {
        return Err(Error::Domain(format!("delta must be >= 0, got {delta}")));
    }
    let mut r = eval(delta)?;
    r.regularization_delta = Some(delta);
    if delta > 0.0 {
        let half = eval(0.5 * delta)?;
        r.extrapolated = Some(2.0 * half.value - r.value);
    }
    Ok(r)
}

/// Small-time rough Heston rate on the δ-perturbed path ϑ + δ·t^{H+1/2}, with the
/// convention 𝟙_{ϑ>0} on the controls. For δ > 0 `extrapolated` holds
/// 2I(δ/2) − I(δ).
pub fn heston_rate(model: &ModelSpec, phi: &GridFunction, vphi: &GridFunction, delta: f64) -> Result<RateResult> {
    let (_, xi, rho, hurst) = heston_params(model)?;
    check_scalar_pair(phi, vphi, 1)?;
    check_nonnegative(vphi)?;
    let y0 = model.dynamics.y0()[0];
    if !starts_at(phi, 0, 0.0) || !starts_at(vphi, 0, y0) || !is_absolutely_continuous(phi) {
        return Ok(RateResult::infinite());
    }
    let rho_bar = model.dynamics.rho_bar();
    let slopes = node_slopes(phi);
    with_delta(delta, |dl| {
        let vd = perturbed(vphi, dl, hurst);
        let dv = frac_derivative(&vd, 0, y0, hurst + 0.5)?;
        let n1 = vd.len();
        let (mut u, mut v) = (vec![0.0; n1], vec![0.0; n1]);
        for i in 0..n1 {
            let y = vd.get(i, 0);
            if y > ZERO_TOL {
                let s = y.sqrt();
                v[i] = dv[i] / (xi * s);
                u[i] = (slopes[i] / s - rho * v[i]) / rho_bar;
            }
        }
        Ok(RateResult::from_controls(build(*phi.grid(), &[&u, &v]), stack_path(phi, vd.values())))
    })
}

/// Moderate deviations rate of (φ, ϑ) with coefficients frozen at y₀. `vphi` is in
/// level coordinates (starts at y₀); the returned path is in deviation coordinates.
pub fn mdp_rate_pair(model: &ModelSpec, phi: &GridFunction, vphi: &GridFunction) -> Result<RateResult> {
    single_factor(model, "mdp_rate_pair")?;
    check_scalar_pair(phi, vphi, 1)?;
    let d = &model.dynamics;
    let y0 = d.y0()[0];
    let (s, z) = (d.vol(&[y0]), d.zeta(y0));
    if (s * s * z).abs() <= ZERO_TOL {
        return Err(Error::DegenerateCoefficients("Sigma(y0)*zeta(y0) = 0".into()));
    }
    if !starts_at(phi, 0, 0.0) || !starts_at(vphi, 0, y0) || !is_absolutely_continuous(phi) {
        return Ok(RateResult::infinite());
    }
    let (rho, rho_bar) = (d.rhos()[0], d.rho_bar());
    let dv = frac_derivative(vphi, 0, y0, d.hurst() + 0.5)?;
    let slopes = node_slopes(phi);
    let v: Vec<f64> = dv.iter().map(|x| x / z).collect();
    let u: Vec<f64> = slopes.iter().zip(&v).map(|(p, v)| (p / s - rho * v) / rho_bar).collect();
    let dev: Vec<f64> = vphi.values().iter().map(|y| y - y0).collect();
    Ok(RateResult::from_controls(build(*phi.grid(), &[&u, &v]), stack_path(phi, &dev)))
}

/// x²/(2Σ(y₀)).
pub fn mdp_rate_terminal_x(model: &ModelSpec, x: f64) -> Result<f64> {
    let d = &model.dynamics;
    let sigma = d.variance(&d.y0());
    if model.regime.is_tail() || sigma <= ZERO_TOL {
        return Err(Error::DegenerateCoefficients("Sigma(y0) = 0".into()));
    }
    Ok(x * x / (2.0 * sigma))
}

/// y²/2, the normalised volatility marginal rate.
pub fn mdp_rate_terminal_y(y: f64) -> f64 {
    0.5 * y * y
}

/// y²/(2 Var), Var = Σⱼ L²_{fj}‖K_j‖² over the driving factors (ζ(y₀)²‖K‖² for one
/// factor), the marginal rate of factor `factor` at T = 1.
pub fn mdp_rate_terminal_y_model(model: &ModelSpec, factor: usize, y: f64) -> Result<f64> {
    let d = &model.dynamics;
    if factor >= d.n_factors() {
        return Err(Error::Dimension(format!("factor {factor} out of range")));
    }
    let var = match d {
        Dynamics::MultiRoughBergomi { l, .. } => {
            let ms = d.m_star();
            let mut s = 0.0;
            for j in 0..ms.min(factor + 1) {
                s += l[factor][j].powi(2) * d.vol_kernel(j).l2_norm_sq(1.0)?;
            }
            s
        }
        _ => {
            let y0 = if model.regime.is_tail() { 0.0 } else { d.y0()[0] };
            d.zeta(y0).powi(2) * d.vol_kernel(0).l2_norm_sq(1.0)?
        }
    };
    if var <= ZERO_TOL {
        return Err(Error::DegenerateCoefficients("volatility marginal has zero variance".into()));
    }
    Ok(y * y / (2.0 * var))
}

fn steinstein_v(model: &ModelSpec, vphi: &GridFunction) -> Result<Option<Vec<f64>>> {
    let (kappa, xi, hurst) = match model.dynamics {
        Dynamics::RoughSteinStein { kappa, xi, hurst, .. } => (kappa, xi, hurst),
        _ => return Err(Error::NotApplicable("Stein-Stein tail rate on a different model".into())),
    };
    // D^{H+1/2}ϑ + κI^{1/2−H}ϑ = D^{H+1/2}(ϑ + κI¹ϑ)
    let iv = frac_integral(vphi, 0, 1.0)?;
    let lifted = GridFunction::scalar(*vphi.grid(), vphi.values().iter().zip(&iv).map(|(y, i)| y + kappa * i).collect())?;
    let num = frac_derivative(&lifted, 0, 0.0, hurst + 0.5)?;
    if xi == 0.0 {
        return Ok(if num.iter().all(|x| x.abs() <= ZERO_TOL) { Some(vec![0.0; num.len()]) } else { None });
    }
    Ok(Some(num.iter().map(|x| x / xi).collect()))
}

/// Tail large deviations rate for rough Stein-Stein; φ and ϑ start at 0.
pub fn tail_rate_steinstein(model: &ModelSpec, phi: &GridFunction, vphi: &GridFunction) -> Result<RateResult> {
    check_scalar_pair(phi, vphi, 1)?;
    if !starts_at(phi, 0, 0.0) || !starts_at(vphi, 0, 0.0) || !is_absolutely_continuous(phi) {
        return Ok(RateResult::infinite());
    }
    let Some(v) = steinstein_v(model, vphi)? else {
        return Ok(RateResult::infinite());
    };
    let d = &model.dynamics;
    let (rho, rho_bar) = (d.rhos()[0], d.rho_bar());
    let slopes = node_slopes(phi);
    let u: Vec<f64> = (0..v.len())
        .map(|i| {
            let y = vphi.get(i, 0);
            if y.abs() > ZERO_TOL {
                (slopes[i] / y + 0.5 * y - rho * v[i]) / rho_bar
            } else {
                0.0
            }
        })
        .collect();
    Ok(RateResult::from_controls(build(*phi.grid(), &[&u, &v]), stack_path(phi, vphi.values())))
}

/// Tail moderate deviations rate of the Stein-Stein volatility path: ½∫v² with
/// the same v as [`tail_rate_steinstein`].
pub fn tail_mdp_rate_y(model: &ModelSpec, vphi: &GridFunction) -> Result<RateResult> {
    if vphi.dim() != 1 {
        return Err(Error::Dimension("vphi must be scalar".into()));
    }
    if !starts_at(vphi, 0, 0.0) {
        return Ok(RateResult::infinite());
    }
    let Some(v) = steinstein_v(model, vphi)? else {
        return Ok(RateResult::infinite());
    };
    let g = *vphi.grid();
    Ok(RateResult::from_controls(build(g, &[&v]), vphi.clone()))
}

/// Tail large deviations rate for rough Heston on the δ-perturbed path.
pub fn tail_rate_heston(model: &ModelSpec, phi: &GridFunction, vphi: &GridFunction, delta: f64) -> Result<RateResult> {
    let (kappa, xi, rho, hurst) = heston_params(model)?;
    check_scalar_pair(phi, vphi, 1)?;
    check_nonnegative(vphi)?;
    if !starts_at(phi, 0, 0.0) || !starts_at(vphi, 0, 0.0) || !is_absolutely_continuous(phi) {
        return Ok(RateResult::infinite());
    }
    let rho_bar = model.dynamics.rho_bar();
    let slopes = node_slopes(phi);
    with_delta(delta, |dl| {
        let vd = perturbed(vphi, dl, hurst);
        // the solver sees ξ√y₀·v₀ − κy₀ = 0 at node 0, so pin the source there
        let dv = rl_derivative_inverse_from(&vd, FracOrder::new(hurst + 0.5)?, Some(0.0)).values().to_vec();
        let n1 = vd.len();
        let (mut u, mut v) = (vec![0.0; n1], vec![0.0; n1]);
        for i in 0..n1 {
            let y = vd.get(i, 0);
            if y > ZERO_TOL {
                let s = y.sqrt();
                v[i] = (dv[i] + kappa * y) / (xi * s);
                u[i] = (slopes[i] / s + 0.5 * s - rho * v[i]) / rho_bar;
            }
        }
        Ok(RateResult::from_controls(build(*phi.grid(), &[&u, &v]), stack_path(phi, vd.values())))
    })
}

/// Moderate deviations rate of the multifactor rough Bergomi model; `vphi` has one
/// column per factor in level coordinates. Controls of the factors sharing the
/// smallest Hurst index come from forward substitution; the rougher-free factors
/// must be consistent with them, otherwise the rate is +∞. The remaining X
/// residual is split by minimal norm between u and the free controls.
pub fn multifactor_mdp_rate(model: &ModelSpec, phi: &GridFunction, vphi: &GridFunction) -> Result<RateResult> {
    let Dynamics::MultiRoughBergomi { l, y0, rho, hurst, .. } = &model.dynamics else {
        return Err(Error::NotApplicable("multifactor rate on a single-factor model".into()));
    };
    let d = &model.dynamics;
    let m = y0.len();
    let ms = d.m_star();
    check_scalar_pair(phi, vphi, m)?;
    for (i, row) in l.iter().enumerate().take(ms) {
        if row[i].abs() <= ZERO_TOL {
            return Err(Error::SingularL(i));
        }
    }
    if !starts_at(phi, 0, 0.0) || (0..m).any(|i| !starts_at(vphi, i, y0[i])) || !is_absolutely_continuous(phi) {
        return Ok(RateResult::infinite());
    }
    let g = *phi.grid();
    let n1 = g.n_nodes();
    let alpha = hurst[0] + 0.5;
    let mut v = vec![vec![0.0; n1]; m];
    for i in 0..ms {
        let dv = frac_derivative(vphi, i, y0[i], alpha)?;
        for k in 0..n1 {
            let mut acc = dv[k];
            for j in 0..i {
                acc -= l[i][j] * v[j][k];
            }
            v[i][k] = acc / l[i][i];
        }
    }
    for i in ms..m {
        let forcing: Vec<f64> = (0..n1).map(|k| (0..ms).map(|j| l[i][j] * v[j][k]).sum()).collect();
        let f = GridFunction::scalar(g, forcing)?;
        let pred = rl_integral(&f, FracOrder::new(alpha)?);
        let mut dev: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for k in 0..n1 {
            let want = vphi.get(k, i) - y0[i];
            dev = dev.max((want - pred.get(k, 0)).abs());
            scale = scale.max(want.abs());
        }
        if dev > 1e-8 + 1e-6 * scale {
            return Ok(RateResult::infinite());
        }
    }
    let s0 = d.vol(y0);
    let slopes = node_slopes(phi);
    let free_norm: f64 = d.rho_bar().powi(2) + rho[ms..].iter().map(|r| r * r).sum::<f64>();
    let mut u = vec![0.0; n1];
    for k in 0..n1 {
        let r = slopes[k] / s0 - (0..ms).map(|j| rho[j] * v[j][k]).sum::<f64>();
        if free_norm > ZERO_TOL {
            let c = r / free_norm;
            u[k] = c * d.rho_bar();
            for j in ms..m {
                v[j][k] = c * rho[j];
            }
        }
    }
    let mut cols: Vec<&[f64]> = vec![&u];
    cols.extend(v.iter().map(|c| c.as_slice()));
    let control = build(g, &cols);
    let mut pcols: Vec<Vec<f64>> = vec![phi.values().to_vec()];
    for i in 0..m {
        pcols.push((0..n1).map(|k| vphi.get(k, i) - y0[i]).collect());
    }
    let prefs: Vec<&[f64]> = pcols.iter().map(|c| c.as_slice()).collect();
    Ok(RateResult::from_controls(control, build(g, &prefs)))
}

/// Terminal constraint of the variational problem, in the coordinates of the
/// regime's limit equation: levels for large deviations (Y starts at y₀ in small
/// time), deviations from the mean for moderate deviations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TerminalTarget {
    X(f64),
    Y { factor: usize, value: f64 },
}

#[derive(Debug, Clone)]
pub struct MinimizeOptions {
    pub n_steps: usize,
    pub horizon: f64,
    pub penalties: Vec<f64>,
    /// Initial controls are constants s·(target − start) for each s.
    pub start_scales: Vec<f64>,
    pub max_iters: u64,
    /// Extrapolate over n, n/2, n/4.
    pub richardson: bool,
    pub violation_tol: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            n_steps: 512,
            horizon: 1.0,
            penalties: vec![1e2, 1e4, 1e6],
            start_scales: vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            max_iters: 400,
            richardson: true,
            violation_tol: 1e-4,
        }
    }
}

/// Last evaluation: parameters, trajectory and the interval controls (left, right).
type SolveCache = Option<(Vec<f64>, Trajectory, Vec<f64>, Vec<f64>)>;

/// Penalised objective in the preconditioned parameter p = √w ⊙ v (w the
/// trapezoid weights), so the energy is ½|p|².
struct Penalized<'s, 'a> {
    sys: &'s LimitSystem<'a>,
    idx: usize,
    target: f64,
    mu: f64,
    sw: Vec<f64>,
    cache: RefCell<SolveCache>,
}

impl Penalized<'_, '_> {
    fn m(&self) -> usize {
        self.sys.noise_dim()
    }

    fn controls(&self, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.m();
        let n = self.sys.grid().n_steps;
        let w = |i: usize, k: usize| p[i * m + k] / self.sw[i];
        let vl = (0..n).flat_map(|j| (0..m).map(move |k| w(j, k))).collect();
        let vr = (0..n).flat_map(|j| (0..m).map(move |k| w(j + 1, k))).collect();
        (vl, vr)
    }

    fn run(&self, p: &[f64]) -> Result<Trajectory> {
        if let Some((q, t, _, _)) = self.cache.borrow().as_ref() {
            if q.as_slice() == p {
                return Ok(t.clone());
            }
        }
        let (vl, vr) = self.controls(p);
        let t = self.sys.solve(&vl, &vr)?;
        *self.cache.borrow_mut() = Some((p.to_vec(), t.clone(), vl, vr));
        Ok(t)
    }

    fn terminal(&self, t: &Trajectory) -> f64 {
        let d = self.sys.dim();
        t.phi[self.sys.grid().n_steps * d + self.idx]
    }
}

impl Penalized<'_, '_> {
    /// ∇_p φ_T[idx] for the parameters cached by the last `run`.
    fn constraint_gradient(&self, t: &Trajectory) -> Vec<f64> {
        let mut term = vec![0.0; self.sys.dim()];
        term[self.idx] = 1.0;
        let cache = self.cache.borrow();
        let (p, _, vl, vr) = cache.as_ref().expect("filled by run");
        let (gl, gr) = self.sys.gradient(t, vl, vr, &term);
        let m = self.m();
        let n = self.sys.grid().n_steps;
        let mut g = vec![0.0; p.len()];
        for i in 0..=n {
            for k in 0..m {
                let mut gw = 0.0;
                if i < n {
                    gw += gl[i * m + k];
                }
                if i > 0 {
                    gw += gr[(i - 1) * m + k];
                }
                g[i * m + k] = gw / self.sw[i];
            }
        }
        g
    }
}

impl CostFunction for Penalized<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let t = self.run(p)?;
        let c = self.terminal(&t) - self.target;
        Ok(0.5 * p.iter().map(|x| x * x).sum::<f64>() + self.mu * c * c)
    }
}

impl Gradient for Penalized<'_, '_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, p: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let t = self.run(p)?;
        let c = self.terminal(&t) - self.target;
        let gc = self.constraint_gradient(&t);
        let g = p.iter().zip(&gc).map(|(p, g)| p + 2.0 * self.mu * c * g).collect();
        Ok(g)
    }
}

struct LevelResult {
    /// Node controls, (n + 1) × m.
    w: Vec<f64>,
    energy: f64,
    violation: f64,
    iterations: u64,
    path: GridFunction,
}

fn minimize_level(
    sys: &LimitSystem,
    idx: usize,
    target: f64,
    start: Vec<f64>,
    opts: &MinimizeOptions,
) -> Option<LevelResult> {
    let grid = *sys.grid();
    let m = sys.noise_dim();
    let sw: Vec<f64> = grid.trapezoid_weights().iter().map(|w| w.sqrt()).collect();
    let mut p: Vec<f64> = (0..start.len()).map(|e| start[e] * sw[e / m]).collect();
    let mut iterations = 0;
    for &mu in &opts.penalties {
        let problem = Penalized { sys, idx, target, mu, sw: sw.clone(), cache: RefCell::new(None) };
        let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
            .with_tolerance_grad(1e-10)
            .and_then(|s| s.with_tolerance_cost(1e-15))
            .expect("valid tolerances");
        let run = Executor::new(problem, solver).configure(|s| s.param(p.clone()).max_iters(opts.max_iters)).run();
        match run {
            Ok(res) => {
                iterations += res.state().get_iter();
                if let Some(best) = res.state().get_best_param() {
                    p = best.clone();
                }
            }
            Err(_) => break,
        }
    }
    let problem = Penalized { sys, idx, target, mu: 0.0, sw: sw.clone(), cache: RefCell::new(None) };
    // Newton steps on the constraint alone remove the residual penalty bias.
    for _ in 0..3 {
        let traj = problem.run(&p).ok()?;
        let c = problem.terminal(&traj) - target;
        if c.abs() < 1e-14 {
            break;
        }
        let gp = problem.constraint_gradient(&traj);
        let g2: f64 = gp.iter().map(|x| x * x).sum();
        if g2 == 0.0 {
            break;
        }
        let q: Vec<f64> = p.iter().zip(&gp).map(|(p, g)| p - c * g / g2).collect();
        match problem.run(&q) {
            Ok(t) if (problem.terminal(&t) - target).abs() < c.abs() => p = q,
            _ => break,
        }
    }
    let traj = problem.run(&p).ok()?;
    let w: Vec<f64> = (0..p.len()).map(|e| p[e] / sw[e / m]).collect();
    Some(LevelResult {
        energy: 0.5 * p.iter().map(|x| x * x).sum::<f64>(),
        violation: (problem.terminal(&traj) - target).abs(),
        iterations,
        path: sys.path(&traj),
        w,
    })
}

fn subsample_nodes(w: &[f64], m: usize, factor: usize) -> Vec<f64> {
    w.chunks(m).step_by(factor).flatten().copied().collect()
}

/// Regularity exponent driving the discretisation error of the solver.
fn solver_gamma(model: &ModelSpec) -> f64 {
    2.0 * model.dynamics.hurst()
}

/// inf of ½∫|v|² over controls whose limit path hits the terminal target at
/// `opts.horizon`: quadratic penalty with continuation, L-BFGS on node controls,
/// deterministic multistart, and Richardson extrapolation over the grid.
pub fn ldp_rate_terminal(model: &ModelSpec, target: TerminalTarget, opts: &MinimizeOptions) -> Result<RateResult> {
    let (y_only, factor, value) = match target {
        TerminalTarget::X(x) => (false, 0, x),
        TerminalTarget::Y { factor, value } => (true, factor, value),
    };
    if factor >= model.dynamics.n_factors() {
        return Err(Error::Dimension(format!("factor {factor} out of range")));
    }
    if !value.is_finite() {
        return Err(Error::Domain("terminal value must be finite".into()));
    }
    let lm = LimitModel::for_regime(model, y_only);
    let idx = if y_only { factor } else { 0 };
    let policy = if model.dynamics.is_sqrt() { BranchPolicy::AbsorbAtZero } else { BranchPolicy::ContinuePositive };
    let grid = TimeGrid::new(opts.horizon, opts.n_steps)?;
    let sys = lm.system(grid, policy)?;
    let m = sys.noise_dim();
    let n1 = grid.n_nodes();
    let disp = value - lm.x0()[idx];

    let mut scales = opts.start_scales.clone();
    if disp == 0.0 {
        scales.truncate(1);
    }
    let mut best: Option<LevelResult> = None;
    let mut best_any: Option<(f64, f64)> = None;
    let mut iterations = 0;
    for s in scales {
        let Some(r) = minimize_level(&sys, idx, value, vec![s * disp; n1 * m], opts) else {
            continue;
        };
        iterations += r.iterations;
        if best_any.is_none_or(|(e, _)| r.energy < e) {
            best_any = Some((r.energy, r.violation));
        }
        if r.violation <= opts.violation_tol && best.as_ref().is_none_or(|b| r.energy < b.energy) {
            best = Some(r);
        }
    }
    let Some(best) = best else {
        let (best_value, violation) = best_any.unwrap_or((f64::INFINITY, f64::INFINITY));
        return Err(Error::SolverFailure { best_value, violation });
    };

    let mut extrapolated = None;
    if opts.richardson && opts.n_steps.is_multiple_of(4) && opts.n_steps >= 32 && disp != 0.0 {
        let mut vals = vec![best.energy];
        for f in [2, 4] {
            let g = grid.coarsen(f)?;
            let s = lm.system(g, policy)?;
            let warm = subsample_nodes(&best.w, m, f);
            match minimize_level(&s, idx, value, warm, opts) {
                Some(r) if r.violation <= opts.violation_tol => {
                    iterations += r.iterations;
                    vals.push(r.energy);
                }
                _ => break,
            }
        }
        if vals.len() == 3 {
            let r = 2f64.powf(solver_gamma(model));
            let r1 = (r * vals[0] - vals[1]) / (r - 1.0);
            let r2 = (r * vals[1] - vals[2]) / (r - 1.0);
            let rr = r * r;
            extrapolated = Some(((rr * r1 - r2) / (rr - 1.0)).max(0.0));
        }
    }
    let control = GridFunction::new(grid, m, best.w)?;
    Ok(RateResult {
        value: extrapolated.unwrap_or(best.energy),
        discrete_value: best.energy,
        extrapolated,
        optimal_control: Some(control),
        optimal_path: Some(best.path),
        regularization_delta: None,
        diag: SolverDiag { iterations, constraint_violation: best.violation, converged: true },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ScalingRegime;
    use crate::volterra::{solve_ldp_limit, ControlInterp, LimitProblem};
    use crate::models::LimitKind;
    use crate::kernels::KernelSpec;
    use statrs::function::gamma::gamma;

    fn bergomi(h: f64, rho: f64) -> ModelSpec {
        ModelSpec::new(
            Dynamics::RoughBergomi { a: 0.0, rho, y0: 0.0, hurst: h },
            ScalingRegime::SmallTimeLdp { eps: 0.1 },
        )
        .unwrap()
    }

    fn steinstein(kappa: f64, rho: f64, regime: ScalingRegime) -> ModelSpec {
        ModelSpec::new(
            Dynamics::RoughSteinStein { kappa, theta: 0.0, xi: 0.5, rho, y0: 0.2, hurst: 0.3 },
            regime,
        )
        .unwrap()
    }

    fn heston(kappa: f64, rho: f64, regime: ScalingRegime) -> ModelSpec {
        ModelSpec::new(
            Dynamics::RoughHeston { kappa, theta: 0.04, xi: 0.3, rho, y0: 0.04, hurst: 0.3 },
            regime,
        )
        .unwrap()
    }

    fn round_trip(model: &ModelSpec, kind: LimitKind, r: &RateResult, want: &GridFunction) -> f64 {
        let lm = LimitModel::new(model, kind, false);
        let g = *want.grid();
        let sys = lm.system(g, BranchPolicy::ContinuePositive).unwrap();
        let p = LimitProblem { system: sys, control: r.optimal_control.clone().unwrap(), interp: ControlInterp::Linear };
        let out = solve_ldp_limit(&p).unwrap().path;
        out.sup_distance(want, 3).unwrap()
    }

    #[test]
    fn null_path_costs_nothing() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let m = bergomi(0.1, -0.5);
        let r = ldp_rate_pair(&m, &GridFunction::zeros(g, 1), &GridFunction::zeros(g, 1)).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn bergomi_power_path() {
        let h = 0.1;
        let g = TimeGrid::new(1.0, 2048).unwrap();
        let c = 0.7;
        let vphi = GridFunction::from_fn(g, |t| c * t.powf(h + 0.5));
        let r = ldp_rate_pair(&bergomi(h, 0.0), &GridFunction::zeros(g, 1), &vphi).unwrap();
        let want = 0.5 * (c * gamma(h + 1.5)).powi(2);
        assert!((r.value - want).abs() < 2e-3 * want, "{} vs {want}", r.value);
        let path = stack_path(&GridFunction::zeros(g, 1), vphi.values());
        let rt = round_trip(&bergomi(h, 0.0), LimitKind::Ldp, &r, &path);
        assert!(rt < 1e-3, "{rt}");
    }

    #[test]
    fn steinstein_linear_x() {
        let g = TimeGrid::new(1.0, 256).unwrap();
        let m = steinstein(0.0, 0.0, ScalingRegime::SmallTimeLdp { eps: 0.1 });
        let phi = GridFunction::from_fn(g, |t| 0.2 * t);
        let vphi = GridFunction::from_fn(g, |_| 0.2);
        let r = ldp_rate_pair(&m, &phi, &vphi).unwrap();
        assert!((r.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn non_ac_path_is_infinite() {
        let g = TimeGrid::new(1.0, 256).unwrap();
        let m = bergomi(0.3, 0.0);
        let saw = GridFunction::from_fn(g, |t| if ((t * 256.0).round() as i64) % 2 == 1 { 1.0 } else { 0.0 });
        let r = ldp_rate_pair(&m, &saw, &GridFunction::zeros(g, 1)).unwrap();
        assert!(r.value.is_infinite());
        let shifted = GridFunction::from_fn(g, |_| 0.1);
        assert!(ldp_rate_pair(&m, &GridFunction::zeros(g, 1), &shifted).unwrap().value.is_infinite());
    }

    #[test]
    fn heston_pair_and_delta() {
        let g = TimeGrid::new(1.0, 2048).unwrap();
        let m = heston(0.0, 0.0, ScalingRegime::SmallTimeLdp { eps: 0.1 });
        let c = 0.05;
        let vphi = GridFunction::from_fn(g, |t| 0.04 + c * t.powf(0.8));
        let zero = GridFunction::zeros(g, 1);
        let r0 = heston_rate(&m, &zero, &vphi, 0.0).unwrap();
        let k = c * gamma(1.8);
        let f = GridFunction::from_fn(g, |t| k * k / (0.09 * (0.04 + c * t.powf(0.8))));
        let want = 0.5 * rl_integral(&f, FracOrder::new(1.0).unwrap()).last()[0];
        assert!((r0.value - want).abs() < 2e-3 * want, "{} {want}", r0.value);
        let r1 = heston_rate(&m, &zero, &vphi, 1e-3).unwrap();
        assert!((r1.value - r0.value).abs() < 1e-2);
        assert!(r1.extrapolated.is_some());
        let path = stack_path(&zero, vphi.values());
        assert!(round_trip(&m, LimitKind::Ldp, &r0, &path) < 1e-3);
        let neg = GridFunction::from_fn(g, |t| 0.04 - t);
        assert!(matches!(heston_rate(&m, &zero, &neg, 0.0), Err(Error::NegativePath { .. })));
    }

    #[test]
    fn mdp_pair_is_quadratic() {
        let g = TimeGrid::new(1.0, 512).unwrap();
        let m = steinstein(0.0, -0.4, ScalingRegime::SmallTimeMdp { eps: 0.1, beta: 0.1 });
        let phi = GridFunction::from_fn(g, |t| (2.0 * t).sin());
        let vphi = GridFunction::from_fn(g, |t| 0.2 + 0.3 * t.powf(0.9));
        let base = mdp_rate_pair(&m, &phi, &vphi).unwrap().value;
        let c = 2.5;
        let v2 = vphi.map(|y| 0.2 + c * (y - 0.2));
        let scaled = mdp_rate_pair(&m, &phi.scale(c), &v2).unwrap().value;
        assert!((scaled - c * c * base).abs() <= 1e-10 * scaled);
        let lin = GridFunction::from_fn(g, |t| 0.1 * t);
        let flat = GridFunction::from_fn(g, |_| 0.2);
        let m0 = steinstein(0.0, 0.0, ScalingRegime::SmallTimeMdp { eps: 0.1, beta: 0.1 });
        let r = mdp_rate_pair(&m0, &lin, &flat).unwrap().value;
        assert!((r - 0.01 / (2.0 * 0.04)).abs() < 1e-10);
        assert!((mdp_rate_terminal_x(&heston(0.3, 0.0, ScalingRegime::SmallTimeLdp { eps: 0.1 }), 0.1).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn tail_steinstein_and_mdp_agree() {
        let g = TimeGrid::new(1.0, 1024).unwrap();
        let m = steinstein(0.7, 0.3, ScalingRegime::TailLdp { eps: 0.1 });
        let vphi = GridFunction::from_fn(g, |t| 0.4 * t.powf(0.8) + t * t);
        let phi = GridFunction::from_fn(g, |t| -0.1 * t);
        let r = tail_rate_steinstein(&m, &phi, &vphi).unwrap();
        let y = tail_mdp_rate_y(&m, &vphi).unwrap();
        let a = r.optimal_control.unwrap().component(1);
        let b = y.optimal_control.unwrap();
        assert!(a.sup_distance(&b, 0).unwrap() <= 1e-10);
    }

    #[test]
    fn multifactor_forward_substitution() {
        let g = TimeGrid::new(1.0, 256).unwrap();
        let m = ModelSpec::new(
            Dynamics::MultiRoughBergomi {
                l: vec![vec![1.0, 0.0], vec![0.5, 2.0]],
                a: vec![0.0, 0.0],
                y0: vec![0.0, 0.0],
                rho: vec![0.0, 0.0],
                hurst: vec![0.2, 0.2],
            },
            ScalingRegime::SmallTimeMdp { eps: 0.1, beta: 0.1 },
        )
        .unwrap();
        let vphi = GridFunction::from_fn_vec(g, 2, |t, out| {
            out[0] = t.powf(0.7);
            out[1] = 2.0 * t.powf(0.7);
        });
        let r = multifactor_mdp_rate(&m, &GridFunction::zeros(g, 1), &vphi).unwrap();
        let c = r.optimal_control.unwrap();
        let gm = gamma(1.7);
        for i in [100, 200, 256] {
            assert!((c.get(i, 1) - gm).abs() < 1e-2 * gm);
            assert!((c.get(i, 2) - (2.0 * gm - 0.5 * gm) / 2.0).abs() < 1e-2 * gm);
        }
    }

    #[test]
    fn solver_gaussian_marginal() {
        let m = bergomi(0.1, 0.0);
        let r = ldp_rate_terminal(&m, TerminalTarget::Y { factor: 0, value: 0.5 }, &MinimizeOptions::default()).unwrap();
        let want = 0.25 / (2.0 * KernelSpec::PowerLaw(0.1).l2_norm_sq(1.0).unwrap());
        assert!((r.value - want).abs() < 1e-2 * want);
        let c = r.optimal_control.unwrap();
        assert!((energy(&c) - r.discrete_value).abs() < 1e-6 * r.discrete_value);
    }

    #[test]
    fn solver_x_target_is_symmetric_without_correlation() {
        let m = bergomi(0.3, 0.0);
        let opts = MinimizeOptions { n_steps: 128, ..Default::default() };
        let up = ldp_rate_terminal(&m, TerminalTarget::X(0.2), &opts).unwrap();
        let down = ldp_rate_terminal(&m, TerminalTarget::X(-0.2), &opts).unwrap();
        assert!(up.value > 0.0 && up.diag.converged);
        assert!((up.value - down.value).abs() < 1e-6 * up.value, "{} {}", up.value, down.value);
        assert!((up.optimal_path.unwrap().last()[0] - 0.2).abs() < 1e-4);
    }
}
