//! Deterministic Volterra equations
//! φ_t = x₀ + Σ ∫₀ᵗ K(t − s) F(s, φ_s, v_s) ds,
//! solved node by node with product integration and a damped fixed-point
//! iteration for the implicit right-endpoint term.
//!
//! A system is a list of terms; each term adds one kernel convolved with one
//! scalar source (a drift entry b_j or a diffusion entry σ_jk times control v_k)
//! to one target component. Matrix kernels expand into one term per entry.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridFunction, TimeGrid};
use crate::kernels::KernelSpec;
use crate::special::{integrate_singular_left, GaussLegendre};
use crate::weights::{ConvWeights, RowWeights, Weights};

/// Step tolerance of the local fixed-point iteration (relative).
const STEP_TOL: f64 = 1e-14;
const MAX_ITER: usize = 500;
/// Global defect tolerance for bounded and for singular kernels.
pub const TOL_REGULAR: f64 = 1e-10;
pub const TOL_SINGULAR: f64 = 1e-8;
/// Values at or below this are treated as zero for the √ branch logic.
const ZERO: f64 = 1e-12;

/// Drift b(x) ∈ ℝᵈ and diffusion σ(x) ∈ ℝ^{d×m}, possibly node dependent.
pub trait Coefficients: Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn drift(&self, node: usize, x: &[f64], out: &mut [f64]);
    /// Row-major d × m.
    fn diffusion(&self, node: usize, x: &[f64], out: &mut [f64]);

    /// ∂b_i/∂x_l at out[i·d + l]. Defaults to central differences.
    fn drift_jacobian(&self, node: usize, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut xp = x.to_vec();
        let (mut fp, mut fm) = (vec![0.0; d], vec![0.0; d]);
        for l in 0..d {
            let h = 1e-7 * x[l].abs().max(1.0);
            xp[l] = x[l] + h;
            self.drift(node, &xp, &mut fp);
            xp[l] = x[l] - h;
            self.drift(node, &xp, &mut fm);
            xp[l] = x[l];
            for i in 0..d {
                out[i * d + l] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }

    /// ∂σ_ik/∂x_l at out[(i·m + k)·d + l]. Defaults to central differences.
    fn diffusion_jacobian(&self, node: usize, x: &[f64], out: &mut [f64]) {
        let (d, m) = (self.dim(), self.noise_dim());
        let mut xp = x.to_vec();
        let (mut fp, mut fm) = (vec![0.0; d * m], vec![0.0; d * m]);
        for l in 0..d {
            let h = 1e-7 * x[l].abs().max(1.0);
            xp[l] = x[l] + h;
            self.diffusion(node, &xp, &mut fp);
            xp[l] = x[l] - h;
            self.diffusion(node, &xp, &mut fm);
            xp[l] = x[l];
            for e in 0..d * m {
                out[e * d + l] = (fp[e] - fm[e]) / (2.0 * h);
            }
        }
    }

    /// Components that enter a square root and must stay nonnegative.
    fn sqrt_components(&self) -> Vec<bool> {
        vec![false; self.dim()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BranchPolicy {
    /// Leave zero along the strictly positive solution when the forcing allows it.
    #[default]
    ContinuePositive,
    /// Stay at zero once reached (until the forcing turns strictly positive).
    AbsorbAtZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControlInterp {
    /// Linear between node values.
    #[default]
    Linear,
    /// Constant on each interval, equal to the left node value.
    PiecewiseConstant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchTaken {
    /// No √-component touched zero; the solution is unique.
    Unique,
    PositiveContinuation,
    Absorbed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Drift { comp: usize },
    Diffusion { comp: usize, noise: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Term {
    pub target: usize,
    pub kernel: usize,
    pub source: Source,
}

/// A discretized limit system; weights are built once and reused across solves.
pub struct LimitSystem<'a> {
    grid: TimeGrid,
    x0: Vec<f64>,
    coeffs: &'a dyn Coefficients,
    kernels: Vec<KernelSpec>,
    weights: Vec<Weights>,
    terms: Vec<Term>,
    policy: BranchPolicy,
}

/// Forward solution with the interval source values needed for certificates and adjoints.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Node-major, (n + 1) × d.
    pub phi: Vec<f64>,
    /// Max over nodes of the discrete equation defect.
    pub residual: f64,
    pub picard_iterations: usize,
    pub max_step_iterations: usize,
    /// Fixed-point residuals of the step that needed the most iterations.
    pub worst_step_history: Vec<f64>,
    pub branch_taken: BranchTaken,
    fl: Vec<Vec<f64>>,
    fr: Vec<Vec<f64>>,
}

impl<'a> LimitSystem<'a> {
    pub fn new(grid: TimeGrid, x0: Vec<f64>, coeffs: &'a dyn Coefficients, policy: BranchPolicy) -> Result<Self> {
        if x0.len() != coeffs.dim() {
            return Err(Error::Dimension(format!("x0 has {} entries, coefficients have dim {}", x0.len(), coeffs.dim())));
        }
        Ok(Self { grid, x0, coeffs, kernels: Vec::new(), weights: Vec::new(), terms: Vec::new(), policy })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.coeffs.noise_dim()
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn is_singular(&self) -> bool {
        self.kernels.iter().any(KernelSpec::is_singular)
    }

    /// Default global tolerance for this system's kernels.
    pub fn tolerance(&self) -> f64 {
        if self.is_singular() {
            TOL_SINGULAR
        } else {
            TOL_REGULAR
        }
    }

    fn kernel_index(&mut self, k: &KernelSpec) -> Result<usize> {
        if let Some(i) = self.kernels.iter().position(|x| x == k) {
            return Ok(i);
        }
        self.weights.push(Weights::new(k, &self.grid)?);
        self.kernels.push(k.clone());
        Ok(self.kernels.len() - 1)
    }

    fn check(&self, comp: usize, noise: Option<usize>) -> Result<()> {
        if comp >= self.dim() || noise.is_some_and(|k| k >= self.noise_dim()) {
            return Err(Error::Dimension(format!("term ({comp}, {noise:?}) out of range")));
        }
        Ok(())
    }

    pub fn add_term(&mut self, target: usize, kernel: &KernelSpec, source: Source) -> Result<()> {
        let (c, k) = match source {
            Source::Drift { comp } => (comp, None),
            Source::Diffusion { comp, noise } => (comp, Some(noise)),
        };
        self.check(target, None)?;
        self.check(c, k)?;
        let kernel = self.kernel_index(kernel)?;
        self.terms.push(Term { target, kernel, source });
        Ok(())
    }

    /// Scalar kernel on the drift of component `i`.
    pub fn with_drift_kernel(mut self, i: usize, k: &KernelSpec) -> Result<Self> {
        self.add_term(i, k, Source::Drift { comp: i })?;
        Ok(self)
    }

    /// Scalar kernel on σ_ik v_k.
    pub fn with_diffusion_kernel(mut self, i: usize, noise: usize, k: &KernelSpec) -> Result<Self> {
        self.add_term(i, k, Source::Diffusion { comp: i, noise })?;
        Ok(self)
    }

    /// One kernel for drift and diffusion of every component; a matrix kernel
    /// K multiplies the vectors b and σv.
    pub fn with_kernel(mut self, k: &KernelSpec) -> Result<Self> {
        let (d, m) = (self.dim(), self.noise_dim());
        let entries: Vec<(usize, usize, KernelSpec)> = match k {
            KernelSpec::Matrix(rows) => {
                if rows.len() != d {
                    return Err(Error::Dimension(format!("matrix kernel is {0}x{0}, system has dim {d}", rows.len())));
                }
                rows.iter()
                    .enumerate()
                    .flat_map(|(i, r)| r.iter().enumerate().filter_map(move |(j, e)| e.clone().map(|e| (i, j, e))))
                    .collect()
            }
            k => (0..d).map(|i| (i, i, k.clone())).collect(),
        };
        for (i, j, e) in entries {
            self.add_term(i, &e, Source::Drift { comp: j })?;
            for noise in 0..m {
                self.add_term(i, &e, Source::Diffusion { comp: j, noise })?;
            }
        }
        Ok(self)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    #[inline]
    fn source(&self, t: &Term, b: &[f64], s: &[f64], v: &[f64]) -> f64 {
        match t.source {
            Source::Drift { comp } => b[comp],
            Source::Diffusion { comp, noise } => s[comp * self.noise_dim() + noise] * v[noise],
        }
    }

    /// Interval control values (left, right), each n × m, from a node-valued control.
    pub fn interval_controls(&self, v: &GridFunction, interp: ControlInterp) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, m) = (self.grid.n_steps, self.noise_dim());
        if v.grid().n_steps != n || v.dim() != m {
            return Err(Error::Dimension(format!(
                "control has {} steps x {} dims, system needs {n} x {m}",
                v.grid().n_steps,
                v.dim()
            )));
        }
        let vl: Vec<f64> = (0..n).flat_map(|j| v.at(j).to_vec()).collect();
        let vr = match interp {
            ControlInterp::Linear => (0..n).flat_map(|j| v.at(j + 1).to_vec()).collect(),
            ControlInterp::PiecewiseConstant => vl.clone(),
        };
        Ok((vl, vr))
    }

    /// Solve with interval control values `vl`, `vr` (n × m each).
    pub fn solve(&self, vl: &[f64], vr: &[f64]) -> Result<Trajectory> {
        let (n, d, m) = (self.grid.n_steps, self.dim(), self.noise_dim());
        if vl.len() != n * m || vr.len() != n * m {
            return Err(Error::Dimension("interval controls must have n_steps x noise_dim entries".into()));
        }
        let nt = self.terms.len();
        let sqrt = self.coeffs.sqrt_components();
        let mut phi = vec![0.0; (n + 1) * d];
        phi[..d].copy_from_slice(&self.x0);
        let mut fl = vec![vec![0.0; n]; nt];
        let mut fr = vec![vec![0.0; n]; nt];
        let mut b = vec![0.0; d];
        let mut s = vec![0.0; d * m];
        if n > 0 {
            self.coeffs.drift(0, &self.x0, &mut b);
            self.coeffs.diffusion(0, &self.x0, &mut s);
            for (tau, t) in self.terms.iter().enumerate() {
                fl[tau][0] = self.source(t, &b, &s, &vl[..m]);
            }
        }
        let mut base = vec![0.0; d];
        let mut r1 = vec![0.0; nt];
        let mut x = vec![0.0; d];
        let mut tx = vec![0.0; d];
        let mut raw = vec![0.0; d];
        let (mut total_iter, mut max_iter) = (0usize, 0usize);
        let mut worst = Vec::new();
        let mut residual: f64 = 0.0;
        let mut touched_zero = false;
        for step in 1..=n {
            base.copy_from_slice(&self.x0);
            for (tau, t) in self.terms.iter().enumerate() {
                let w = &self.weights[t.kernel];
                // fr[tau][step-1] is still zero, so this is the known history
                base[t.target] += w.row_dot(step, &fl[tau], &fr[tau]);
                r1[tau] = w.right(step, step - 1);
            }
            let vr_step = &vr[(step - 1) * m..step * m];
            let prev = &phi[(step - 1) * d..step * d];
            for i in 0..d {
                x[i] = if sqrt[i] {
                    match self.policy {
                        BranchPolicy::ContinuePositive => prev[i].max(1e-10),
                        BranchPolicy::AbsorbAtZero => prev[i].max(0.0),
                    }
                } else {
                    prev[i]
                };
                if sqrt[i] && prev[i] <= ZERO {
                    touched_zero = true;
                }
            }
            let base_mag = base.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            // returns the magnitude of the summed parts, for the rounding floor
            let apply = |x: &[f64], b: &mut [f64], s: &mut [f64], raw: &mut [f64], tx: &mut [f64]| -> f64 {
                self.coeffs.drift(step, x, b);
                self.coeffs.diffusion(step, x, s);
                raw.copy_from_slice(&base);
                let mut mag = base_mag;
                for (tau, t) in self.terms.iter().enumerate() {
                    let v = r1[tau] * self.source(t, b, s, vr_step);
                    raw[t.target] += v;
                    mag = mag.max(v.abs());
                }
                for i in 0..d {
                    tx[i] = if sqrt[i] { raw[i].max(0.0) } else { raw[i] };
                }
                mag
            };
            let mut omega: f64 = 1.0;
            let mut last = f64::INFINITY;
            let mut hist = Vec::new();
            let mut iter = 0;
            loop {
                let mag = apply(&x, &mut b, &mut s, &mut raw, &mut tx);
                let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let r = x.iter().zip(&tx).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
                hist.push(r);
                if !r.is_finite() {
                    return Err(Error::NoConvergence { iterations: iter, last_residual: r });
                }
                if r <= STEP_TOL * scale || r <= 1e-15 * mag {
                    break;
                }
                if iter >= MAX_ITER {
                    return Err(Error::NoConvergence { iterations: iter, last_residual: r });
                }
                // halve on a clearly rising residual, recover once it falls; slow rises
                // are normal when leaving the repelling root of a square root
                if r > 1.5 * last {
                    omega *= 0.5;
                } else if r < last {
                    omega = (2.0 * omega).min(1.0);
                }
                last = r;
                for i in 0..d {
                    x[i] += omega * (tx[i] - x[i]);
                }
                iter += 1;
            }
            // accept the mapped point, which satisfies the step equation to rounding
            x.copy_from_slice(&tx);
            apply(&x, &mut b, &mut s, &mut raw, &mut tx);
            for i in 0..d {
                if sqrt[i] && self.policy == BranchPolicy::ContinuePositive && raw[i] < -TOL_SINGULAR {
                    return Err(Error::NegativeArgument { node: step, component: i, value: raw[i] });
                }
                residual = residual.max((x[i] - raw[i]).abs());
            }
            total_iter += iter;
            if iter > max_iter {
                max_iter = iter;
                worst = hist;
            }
            phi[step * d..(step + 1) * d].copy_from_slice(&x);
            for (tau, t) in self.terms.iter().enumerate() {
                fr[tau][step - 1] = self.source(t, &b, &s, vr_step);
                if step < n {
                    fl[tau][step] = self.source(t, &b, &s, &vl[step * m..(step + 1) * m]);
                }
            }
        }
        let branch_taken = if !touched_zero {
            BranchTaken::Unique
        } else {
            match self.policy {
                BranchPolicy::ContinuePositive => BranchTaken::PositiveContinuation,
                BranchPolicy::AbsorbAtZero => BranchTaken::Absorbed,
            }
        };
        Ok(Trajectory {
            phi,
            residual,
            picard_iterations: total_iter,
            max_step_iterations: max_iter,
            worst_step_history: worst,
            branch_taken,
            fl,
            fr,
        })
    }

    pub fn path(&self, traj: &Trajectory) -> GridFunction {
        GridFunction::new(self.grid, self.dim(), traj.phi.clone()).expect("solver output has grid shape")
    }

    /// Re-substitute the solution with moments from Gauss–Legendre quadrature on the
    /// doubled grid; returns the max defect over coarse nodes.
    pub fn certificate(&self, traj: &Trajectory) -> f64 {
        let n = self.grid.n_steps;
        let d = self.dim();
        let fine = self.grid.refine(2);
        let weights: Vec<Weights> = self.kernels.iter().map(|k| quadrature_weights(k, &fine)).collect();
        let mut acc = vec![0.0; (n + 1) * d];
        for (tau, t) in self.terms.iter().enumerate() {
            let mut l2 = vec![0.0; 2 * n];
            let mut r2 = vec![0.0; 2 * n];
            for j in 0..n {
                let mid = 0.5 * (traj.fl[tau][j] + traj.fr[tau][j]);
                l2[2 * j] = traj.fl[tau][j];
                r2[2 * j] = mid;
                l2[2 * j + 1] = mid;
                r2[2 * j + 1] = traj.fr[tau][j];
            }
            let w = &weights[t.kernel];
            for mnode in 1..=n {
                acc[mnode * d + t.target] += w.row_dot(2 * mnode, &l2, &r2);
            }
        }
        let mut defect: f64 = 0.0;
        for mnode in 1..=n {
            for i in 0..d {
                let rhs = self.x0[i] + acc[mnode * d + i];
                defect = defect.max((traj.phi[mnode * d + i] - rhs).abs());
            }
        }
        defect
    }

    /// Gradient of J(φ) with respect to the interval controls by the discrete adjoint,
    /// given ∂J/∂φ_n = `terminal` (the objective depends on φ only through φ_n).
    pub fn gradient(&self, traj: &Trajectory, vl: &[f64], vr: &[f64], terminal: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, d, m) = (self.grid.n_steps, self.dim(), self.noise_dim());
        let nt = self.terms.len();
        let phi = &traj.phi;
        let mut lambda = vec![0.0; (n + 1) * d];
        // sl[tau][p] = Σ_{q>p} L(q,p)λ_q, sr[tau][p] = Σ_{q≥p} R(q,p−1)λ_q
        let mut sl = vec![vec![0.0; n + 1]; nt];
        let mut sr = vec![vec![0.0; n + 1]; nt];
        let mut jb = vec![0.0; d * d];
        let mut js = vec![0.0; d * m * d];
        let dsrc = |t: &Term, jb: &[f64], js: &[f64], v: &[f64], l: usize| -> f64 {
            match t.source {
                Source::Drift { comp } => jb[comp * d + l],
                Source::Diffusion { comp, noise } => js[(comp * m + noise) * d + l] * v[noise],
            }
        };
        let mut a = DMatrix::<f64>::zeros(d, d);
        let mut rhs = DVector::<f64>::zeros(d);
        for p in (1..=n).rev() {
            for (tau, t) in self.terms.iter().enumerate() {
                let w = &self.weights[t.kernel];
                let (mut l_acc, mut r_acc) = (0.0, 0.0);
                for q in p + 1..=n {
                    let lam = lambda[q * d + t.target];
                    l_acc += w.left(q, p) * lam;
                    r_acc += w.right(q, p - 1) * lam;
                }
                sl[tau][p] = l_acc;
                sr[tau][p] = r_acc;
            }
            let x = &phi[p * d..(p + 1) * d];
            self.coeffs.drift_jacobian(p, x, &mut jb);
            self.coeffs.diffusion_jacobian(p, x, &mut js);
            let vr_p = &vr[(p - 1) * m..p * m];
            a.fill(0.0);
            for l in 0..d {
                rhs[l] = if p == n { terminal[l] } else { 0.0 };
                a[(l, l)] = 1.0;
            }
            for (tau, t) in self.terms.iter().enumerate() {
                let w = &self.weights[t.kernel];
                let r1 = w.right(p, p - 1);
                for l in 0..d {
                    let dr = dsrc(t, &jb, &js, vr_p, l);
                    let mut val = dr * sr[tau][p];
                    if p < n {
                        val += dsrc(t, &jb, &js, &vl[p * m..(p + 1) * m], l) * sl[tau][p];
                    }
                    rhs[l] += val;
                    a[(l, t.target)] -= dr * r1;
                }
            }
            let sol = if d == 1 {
                DVector::from_element(1, rhs[0] / a[(0, 0)])
            } else {
                a.clone().lu().solve(&rhs).unwrap_or_else(|| rhs.clone())
            };
            for l in 0..d {
                lambda[p * d + l] = sol[l];
            }
            for (tau, t) in self.terms.iter().enumerate() {
                sr[tau][p] += self.weights[t.kernel].right(p, p - 1) * lambda[p * d + t.target];
            }
        }
        for (tau, t) in self.terms.iter().enumerate() {
            let w = &self.weights[t.kernel];
            sl[tau][0] = (1..=n).map(|q| w.left(q, 0) * lambda[q * d + t.target]).sum();
        }
        let mut gl = vec![0.0; n * m];
        let mut gr = vec![0.0; n * m];
        let mut s = vec![0.0; d * m];
        let mut s_next = vec![0.0; d * m];
        self.coeffs.diffusion(0, &phi[..d], &mut s);
        for q in 0..n {
            self.coeffs.diffusion(q + 1, &phi[(q + 1) * d..(q + 2) * d], &mut s_next);
            for (tau, t) in self.terms.iter().enumerate() {
                if let Source::Diffusion { comp, noise } = t.source {
                    gl[q * m + noise] += s[comp * m + noise] * sl[tau][q];
                    gr[q * m + noise] += s_next[comp * m + noise] * sr[tau][q + 1];
                }
            }
            std::mem::swap(&mut s, &mut s_next);
        }
        (gl, gr)
    }
}

/// Weights from quadrature moments, independent of the closed forms.
fn quadrature_weights(k: &KernelSpec, grid: &TimeGrid) -> Weights {
    match k {
        KernelSpec::Fbm(h) => Weights::Rows(RowWeights::fbm(*h, grid)),
        k => {
            let rule = GaussLegendre::g20();
            Weights::Conv(ConvWeights::from_moments(grid.n_steps, grid.dt(), |a, b| {
                if a == 0.0 {
                    (integrate_singular_left(b, |u| k.value(u)), integrate_singular_left(b, |u| k.value(u) * u))
                } else {
                    (rule.integrate(a, b, |u| k.value(u)), rule.integrate(a, b, |u| k.value(u) * u))
                }
            }))
        }
    }
}

/// A limit problem with a node-valued control, as in the CLI and the examples.
pub struct LimitProblem<'a> {
    pub system: LimitSystem<'a>,
    pub control: GridFunction,
    pub interp: ControlInterp,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub path: GridFunction,
    pub residual: f64,
    pub picard_iterations: usize,
    pub max_step_iterations: usize,
    pub worst_step_history: Vec<f64>,
    pub branch_taken: BranchTaken,
    pub certificate: f64,
}

/// Solve φ = x₀ + K ∗ [b(φ) + σ(φ)v].
pub fn solve_ldp_limit(p: &LimitProblem) -> Result<SolveReport> {
    let (vl, vr) = p.system.interval_controls(&p.control, p.interp)?;
    let traj = p.system.solve(&vl, &vr)?;
    let certificate = p.system.certificate(&traj);
    Ok(SolveReport {
        path: p.system.path(&traj),
        residual: traj.residual,
        picard_iterations: traj.picard_iterations,
        max_step_iterations: traj.max_step_iterations,
        worst_step_history: traj.worst_step_history.clone(),
        branch_taken: traj.branch_taken,
        certificate,
    })
}

/// Linear, node-dependent coefficients b(x) = A(t)x, σ(x) = S(t).
pub struct LinearPathCoefficients {
    pub grad_b: GridFunction,
    pub sigma: GridFunction,
    d: usize,
    m: usize,
}

impl LinearPathCoefficients {
    pub fn new(grad_b: GridFunction, sigma: GridFunction) -> Result<Self> {
        let d = (grad_b.dim() as f64).sqrt().round() as usize;
        if d * d != grad_b.dim() || !sigma.dim().is_multiple_of(d) || grad_b.grid() != sigma.grid() {
            return Err(Error::Dimension("grad_b must be d x d and sigma d x m on the same grid".into()));
        }
        let m = sigma.dim() / d;
        Ok(Self { grad_b, sigma, d, m })
    }
}

impl Coefficients for LinearPathCoefficients {
    fn dim(&self) -> usize {
        self.d
    }
    fn noise_dim(&self) -> usize {
        self.m
    }
    fn drift(&self, node: usize, x: &[f64], out: &mut [f64]) {
        let a = self.grad_b.at(node);
        for i in 0..self.d {
            out[i] = (0..self.d).map(|l| a[i * self.d + l] * x[l]).sum();
        }
    }
    fn diffusion(&self, node: usize, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.sigma.at(node));
    }
    fn drift_jacobian(&self, node: usize, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.grad_b.at(node));
    }
    fn diffusion_jacobian(&self, _node: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// ψ = K ∗ [∇b(X̄)ψ + σ(X̄)v] with ∇b and σ sampled along the mean path.
/// `grad_b_path` is d×d and `sigma_path` d×m per node (row-major); controls are
/// interpolated linearly.
pub fn solve_mdp_limit(
    kernel: &KernelSpec,
    grad_b_path: &GridFunction,
    sigma_path: &GridFunction,
    v: &GridFunction,
) -> Result<GridFunction> {
    let coeffs = LinearPathCoefficients::new(grad_b_path.clone(), sigma_path.clone())?;
    let grid = *grad_b_path.grid();
    let sys = LimitSystem::new(grid, vec![0.0; coeffs.dim()], &coeffs, BranchPolicy::ContinuePositive)?
        .with_kernel(kernel)?;
    let (vl, vr) = sys.interval_controls(v, ControlInterp::Linear)?;
    let traj = sys.solve(&vl, &vr)?;
    Ok(sys.path(&traj))
}
