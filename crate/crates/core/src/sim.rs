//! Monte Carlo for the rescaled models, plain and Girsanov-shifted.
//!
//! Gaussian Volterra integrals Z = ∫K(t−s)dW are drawn exactly, jointly with the
//! Brownian increments they are built from, through a Cholesky factor of the
//! covariance of (ΔW₀, Z₁, ΔW₁, Z₂, …). Everything else uses left-point Euler
//! with exact kernel moments. Path p draws from ChaCha8 stream p of the seed, so
//! ensembles do not depend on the thread count.

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, TimeGrid};
use crate::kernels::KernelSpec;
use crate::models::{Dynamics, ModelSpec, ScalingRegime};
use crate::special::hyp2f1;
use crate::weights::ConvWeights;

/// A control that is constant on each grid interval (n × m values).
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl Control {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self { grid, dim, values: vec![0.0; grid.n_steps * dim] }
    }

    pub fn constant(grid: TimeGrid, value: &[f64]) -> Self {
        let values = (0..grid.n_steps).flat_map(|_| value.iter().copied()).collect();
        Self { grid, dim: value.len(), values }
    }

    pub fn from_intervals(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != grid.n_steps * dim {
            return Err(Error::Dimension(format!("control needs {} x {dim} interval values", grid.n_steps)));
        }
        Ok(Self { grid, dim, values })
    }

    /// Interval averages of a node-valued control.
    pub fn from_nodes(v: &GridFunction) -> Self {
        let (grid, dim) = (*v.grid(), v.dim());
        let values = (0..grid.n_steps)
            .flat_map(|j| {
                let (a, b) = (v.at(j), v.at(j + 1));
                (0..dim).map(move |c| {
                    // a non-finite node value (e.g. a fractional derivative at t = 0)
                    // is replaced by its neighbour
                    match (a[c].is_finite(), b[c].is_finite()) {
                        (true, true) => 0.5 * (a[c] + b[c]),
                        (false, true) => b[c],
                        (true, false) => a[c],
                        _ => 0.0,
                    }
                })
            })
            .collect();
        Self { grid, dim, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn interval(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn scale(&self, a: f64) -> Self {
        Self { values: self.values.iter().map(|v| a * v).collect(), ..self.clone() }
    }

    /// ½∫|v|².
    pub fn energy(&self) -> f64 {
        0.5 * self.grid.dt() * self.values.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Paths of the rescaled system, node-major per path: n_paths × (n_steps+1) × dim.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n_paths: usize,
    pub paths: Vec<f64>,
    pub log_weights: Option<Vec<f64>>,
    pub seed: u64,
}

impl PathEnsemble {
    pub fn path(&self, p: usize) -> &[f64] {
        let len = self.grid.n_nodes() * self.dim;
        &self.paths[p * len..(p + 1) * len]
    }

    pub fn value(&self, p: usize, node: usize, comp: usize) -> f64 {
        self.path(p)[node * self.dim + comp]
    }

    pub fn terminal(&self, comp: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.value(p, self.grid.n_steps, comp)).collect()
    }

    /// Sample mean path of one component.
    pub fn mean_path(&self, comp: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.n_nodes()];
        for p in 0..self.n_paths {
            for (i, o) in out.iter_mut().enumerate() {
                *o += self.value(p, i, comp);
            }
        }
        out.iter().map(|s| s / self.n_paths as f64).collect()
    }
}

/// Full-truncation Heston update: the square root only ever sees max(y, 0).
pub fn heston_step_policy(y_prev: f64, increment: f64) -> f64 {
    y_prev + y_prev.max(0.0).sqrt() * increment
}

/// E[Z_s Z_t] for Z = ∫K(t−u)dW_u with the power-law kernel of index `hurst`.
pub fn power_law_covariance(hurst: f64, s: f64, t: f64) -> f64 {
    let (s, t) = if s <= t { (s, t) } else { (t, s) };
    if s <= 0.0 {
        return 0.0;
    }
    let a = hurst - 0.5;
    let g = gamma(hurst + 0.5);
    let delta = t - s;
    let raw = if delta <= 1e-15 * t {
        s.powf(2.0 * a + 1.0) / (2.0 * a + 1.0)
    } else {
        // ∫₀ˢ (x + δ)^a x^a dx
        delta.powf(a) * s.powf(a + 1.0) / (a + 1.0) * hyp2f1(-a, a + 1.0, a + 2.0, -s / delta)
    };
    raw / (g * g)
}

/// Exact sampler of (ΔW_k, Z_{k+1}) for one Gaussian factor.
struct GaussFactor {
    n: usize,
    /// Lower-triangular Cholesky factor, row-major, 2n × 2n.
    chol: Vec<f64>,
    /// Lag masses ∫K over one interval, for the Girsanov shift of Z.
    mass: Vec<f64>,
}

impl GaussFactor {
    fn new(kernel: &KernelSpec, grid: &TimeGrid) -> Result<Self> {
        let hurst = match kernel {
            KernelSpec::PowerLaw(h) => *h,
            _ => return Err(Error::WrongVariant("exact Gaussian sampling needs a power-law kernel")),
        };
        let n = grid.n_steps;
        let dt = grid.dt();
        let mass = ConvWeights::new(kernel, grid)?.mass;
        let size = 2 * n;
        let mut c = DMatrix::<f64>::zeros(size, size);
        for a in 0..n {
            c[(2 * a, 2 * a)] = dt;
            for i in a + 1..=n {
                // ΔW_a against Z_i
                let v = mass[i - a];
                c[(2 * a, 2 * i - 1)] = v;
                c[(2 * i - 1, 2 * a)] = v;
            }
        }
        for i in 1..=n {
            for k in 1..=i {
                let v = power_law_covariance(hurst, grid.t(k), grid.t(i));
                c[(2 * i - 1, 2 * k - 1)] = v;
                c[(2 * k - 1, 2 * i - 1)] = v;
            }
        }
        let l = match c.clone().cholesky() {
            Some(ch) => ch.l(),
            None => {
                let bump = 1e-12 * c.trace() / size as f64;
                for i in 0..size {
                    c[(i, i)] += bump;
                }
                c.cholesky().ok_or(Error::FactorizationFailure)?.l()
            }
        };
        let mut chol = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..=i {
                chol[i * size + j] = l[(i, j)];
            }
        }
        Ok(Self { n, chol, mass })
    }

    /// Fill dw (n) and z (n + 1, z[0] = 0) from 2n standard normals.
    fn sample(&self, g: &[f64], dw: &mut [f64], z: &mut [f64]) {
        let size = 2 * self.n;
        z[0] = 0.0;
        for i in 0..size {
            let row = &self.chol[i * size..i * size + i + 1];
            let v: f64 = row.iter().zip(&g[..=i]).map(|(a, b)| a * b).sum();
            if i % 2 == 0 {
                dw[i / 2] = v;
            } else {
                z[i / 2 + 1] = v;
            }
        }
    }
}

/// Per-path scratch buffers.
struct Scratch {
    normals: Vec<f64>,
    dw: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    y: Vec<f64>,
    drift_src: Vec<f64>,
    diff_src: Vec<f64>,
    path: Vec<f64>,
}

/// A prepared simulator for one model, grid and (optional) control.
pub struct Simulator {
    model: ModelSpec,
    grid: TimeGrid,
    factors: Vec<GaussFactor>,
    /// Heston: lag masses of the drift and vol kernels.
    heston_w: Option<(Vec<f64>, Vec<f64>)>,
    control: Option<Control>,
    normal: Normal,
}

impl Simulator {
    pub fn new(model: &ModelSpec, grid: TimeGrid, control: Option<&Control>) -> Result<Self> {
        let d = &model.dynamics;
        let m = d.n_factors();
        if let Some(c) = control {
            if c.dim() != m + 1 || c.grid().n_steps != grid.n_steps {
                return Err(Error::Dimension(format!(
                    "control must have {} components on {} intervals",
                    m + 1,
                    grid.n_steps
                )));
            }
        }
        let (factors, heston_w) = match d {
            Dynamics::RoughHeston { hurst, .. } => {
                let k = KernelSpec::PowerLaw(*hurst);
                let w = ConvWeights::new(&k, &grid)?.mass;
                (Vec::new(), Some((w.clone(), w)))
            }
            _ => {
                let mut fs: Vec<GaussFactor> = Vec::new();
                for j in 0..m {
                    fs.push(GaussFactor::new(&d.vol_kernel(j), &grid)?);
                }
                (fs, None)
            }
        };
        Ok(Self {
            model: model.clone(),
            grid,
            factors,
            heston_w,
            control: control.cloned(),
            normal: Normal::standard(),
        })
    }

    /// State dimension 1 + m.
    pub fn dim(&self) -> usize {
        self.model.dynamics.n_factors() + 1
    }

    fn scratch(&self) -> Scratch {
        let n = self.grid.n_steps;
        let m = self.model.dynamics.n_factors();
        Scratch {
            normals: vec![0.0; 2 * n],
            dw: vec![vec![0.0; n]; m + 1],
            z: vec![vec![0.0; n + 1]; m],
            y: vec![0.0; (n + 1) * m],
            drift_src: vec![0.0; n],
            diff_src: vec![0.0; n],
            path: vec![0.0; (n + 1) * (m + 1)],
        }
    }

    fn normals(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        for o in out.iter_mut() {
            // 53 random bits, centred in their cell so u ∈ (0, 1)
            let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
            *o = self.normal.inverse_cdf(u);
        }
    }

    /// Simulate path `p`; returns its Girsanov log-weight (0 without control).
    fn run_path(&self, seed: u64, p: usize, s: &mut Scratch) -> f64 {
        let n = self.grid.n_steps;
        let dt = self.grid.dt();
        let dynamics = &self.model.dynamics;
        let m = dynamics.n_factors();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);

        // noise 0 is W⊥, noise 1 + j drives factor j
        for (j, f) in self.factors.iter().enumerate() {
            self.normals(&mut rng, &mut s.normals);
            f.sample(&s.normals, &mut s.dw[1 + j], &mut s.z[j]);
        }
        if self.factors.is_empty() {
            self.normals(&mut rng, &mut s.normals[..n]);
            for k in 0..n {
                s.dw[1][k] = s.normals[k] * dt.sqrt();
            }
        }
        self.normals(&mut rng, &mut s.normals[..n]);
        for k in 0..n {
            s.dw[0][k] = s.normals[k] * dt.sqrt();
        }

        let mut log_w = 0.0;
        if let Some(ctrl) = &self.control {
            let c = self.model.shift_scale();
            for k in 0..n {
                let v = ctrl.interval(k);
                for (q, vq) in v.iter().enumerate() {
                    log_w -= c * vq * s.dw[q][k] + 0.5 * c * c * vq * vq * dt;
                    s.dw[q][k] += c * vq * dt;
                }
            }
            for (j, f) in self.factors.iter().enumerate() {
                for i in 1..=n {
                    let mut acc = 0.0;
                    for k in 0..i {
                        acc += ctrl.interval(k)[1 + j] * f.mass[i - k];
                    }
                    s.z[j][i] += c * acc;
                }
            }
        }

        self.volatility(s);
        // log-price, left-point Euler
        let eps = self.model.regime.eps();
        let h = dynamics.hurst();
        let (dx, cx) = if self.model.regime.is_tail() { (1.0, eps) } else { (eps.powf(h + 0.5), eps.powf(h)) };
        let rho_bar = dynamics.rho_bar();
        let rhos = dynamics.rhos();
        let d = m + 1;
        s.path[0] = 0.0;
        let mut x = 0.0;
        for k in 0..n {
            let y = &s.y[k * m..(k + 1) * m];
            let mut db = rho_bar * s.dw[0][k];
            for (j, r) in rhos.iter().enumerate() {
                db += r * s.dw[1 + j][k];
            }
            x += -0.5 * dx * dynamics.variance(y) * dt + cx * dynamics.vol(y) * db;
            s.path[(k + 1) * d] = x;
        }
        for i in 0..=n {
            for j in 0..m {
                s.path[i * d + 1 + j] = s.y[i * m + j];
            }
        }
        if let Some(scale) = self.model.mdp_scale() {
            let center = if self.model.regime.is_tail() { vec![0.0; m] } else { dynamics.y0() };
            for i in 0..=n {
                s.path[i * d] /= scale;
                for j in 0..m {
                    s.path[i * d + 1 + j] = (s.path[i * d + 1 + j] - center[j]) / scale;
                }
            }
        }
        log_w
    }

    /// Volatility components at every node into s.y (node-major, m per node).
    fn volatility(&self, s: &mut Scratch) {
        let n = self.grid.n_steps;
        let dt = self.grid.dt();
        let eps = self.model.regime.eps();
        let tail = self.model.regime.is_tail();
        match &self.model.dynamics {
            Dynamics::RoughSteinStein { kappa, theta, xi, y0, hurst, .. } => {
                let (a0, cb, th, cz) = if tail {
                    (eps * y0, 1.0, eps * theta, eps)
                } else {
                    (*y0, eps, *theta, eps.powf(*hurst))
                };
                // U = Y − cz ξ Z solves U' = cb κ(θ − U − cz ξ Z); trapezoid rule
                let z = &s.z[0];
                let k = cb * kappa * dt;
                let mut u = a0;
                s.y[0] = a0;
                for i in 1..=n {
                    let forcing = th - 0.5 * cz * xi * (z[i - 1] + z[i]);
                    u = (u * (1.0 - 0.5 * k) + k * forcing) / (1.0 + 0.5 * k);
                    s.y[i] = u + cz * xi * z[i];
                }
            }
            Dynamics::RoughBergomi { a, y0, hurst, .. } => {
                let c = eps.powf(*hurst);
                for i in 0..=n {
                    s.y[i] = y0 - a * (eps * self.grid.t(i)).powf(2.0 * hurst) + c * s.z[0][i];
                }
            }
            Dynamics::MultiRoughBergomi { l, a, y0, hurst, .. } => {
                let m = hurst.len();
                for i in 0..=n {
                    let drift_t = (eps * self.grid.t(i)).powf(2.0 * hurst[0]);
                    for r in 0..m {
                        let mut v = y0[r] - a[r] * drift_t;
                        for j in 0..=r {
                            v += eps.powf(hurst[j]) * l[r][j] * s.z[j][i];
                        }
                        s.y[i * m + r] = v;
                    }
                }
            }
            Dynamics::RoughHeston { kappa, theta, xi, y0, hurst, .. } => {
                let (a0, cb, th, cz) = if tail {
                    (eps * eps * y0, 1.0, eps * eps * theta, eps)
                } else {
                    (*y0, eps.powf(hurst + 0.5), *theta, eps.powf(*hurst))
                };
                let (wb, wz) = self.heston_w.as_ref().expect("Heston weights");
                let dw = &s.dw[1];
                s.y[0] = a0;
                for i in 1..=n {
                    let yp = s.y[i - 1].max(0.0);
                    s.drift_src[i - 1] = cb * kappa * (th - yp);
                    // heston_step_policy's increment, spread over the kernel lags
                    s.diff_src[i - 1] = cz * xi * yp.sqrt() * dw[i - 1] / dt;
                    let mut acc = a0;
                    for j in 0..i {
                        acc += wb[i - j] * s.drift_src[j] + wz[i - j] * s.diff_src[j];
                    }
                    s.y[i] = acc;
                }
            }
        }
    }

    /// Run `n_paths` paths and map each (path, log-weight) through `f`, in path order.
    pub fn map<T: Send>(&self, n_paths: usize, seed: u64, f: impl Fn(&[f64], f64) -> T + Sync) -> Vec<T> {
        (0..n_paths)
            .into_par_iter()
            .map_init(
                || self.scratch(),
                |s, p| {
                    let lw = self.run_path(seed, p, s);
                    f(&s.path, lw)
                },
            )
            .collect()
    }

    pub fn ensemble(&self, n_paths: usize, seed: u64) -> PathEnsemble {
        let out = self.map(n_paths, seed, |path, lw| (path.to_vec(), lw));
        let mut paths = Vec::with_capacity(n_paths * self.grid.n_nodes() * self.dim());
        let mut lws = Vec::with_capacity(n_paths);
        for (p, lw) in out {
            paths.extend_from_slice(&p);
            lws.push(lw);
        }
        PathEnsemble {
            grid: self.grid,
            dim: self.dim(),
            n_paths,
            paths,
            log_weights: self.control.as_ref().map(|_| lws),
            seed,
        }
    }
}

/// Paths of the model in its regime.
pub fn simulate(model: &ModelSpec, grid: TimeGrid, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::Domain("n_paths must be >= 1".into()));
    }
    Ok(Simulator::new(model, grid, None)?.ensemble(n_paths, seed))
}

/// Paths driven by W + c∫v (c = 1/ϑ or h), with log dP/dP̃ in `log_weights`.
pub fn simulate_controlled(
    model: &ModelSpec,
    v: &Control,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::Domain("n_paths must be >= 1".into()));
    }
    Ok(Simulator::new(model, grid, Some(v))?.ensemble(n_paths, seed))
}

/// max over nodes of the empirical p-th absolute moment of one component.
pub fn max_moment(e: &PathEnsemble, comp: usize, p: f64) -> f64 {
    (0..e.grid.n_nodes())
        .map(|i| (0..e.n_paths).map(|q| e.value(q, i, comp).abs().powf(p)).sum::<f64>() / e.n_paths as f64)
        .fold(0.0, f64::max)
}

/// max over dyadic pairs (t, t + 2^{-k}T) of E|X_t − X_s|^p / |t − s|^{αp}.
pub fn holder_moment(e: &PathEnsemble, comp: usize, p: f64, alpha: f64) -> f64 {
    let n = e.grid.n_steps;
    let mut best: f64 = 0.0;
    let mut lag = 1;
    while lag <= n {
        let h = lag as f64 * e.grid.dt();
        for i in (0..=n - lag).step_by(lag) {
            let mom = (0..e.n_paths)
                .map(|q| (e.value(q, i + lag, comp) - e.value(q, i, comp)).abs().powf(p))
                .sum::<f64>()
                / e.n_paths as f64;
            best = best.max(mom / h.powf(alpha * p));
        }
        lag *= 2;
    }
    best
}

impl ScalingRegime {
    /// Short label used in file headers.
    pub fn label(&self) -> &'static str {
        match self {
            ScalingRegime::SmallTimeLdp { .. } => "small_time_ldp",
            ScalingRegime::SmallTimeMdp { .. } => "small_time_mdp",
            ScalingRegime::TailLdp { .. } => "tail_ldp",
            ScalingRegime::TailMdp { .. } => "tail_mdp",
        }
    }
}
