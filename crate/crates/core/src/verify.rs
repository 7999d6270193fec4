//! Monte Carlo checks of deviation statements: event probabilities over an
//! ε-sweep, affine extrapolation of s(ε)·log p̂, and Girsanov importance sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridFunction, TimeGrid};
use crate::models::{Dynamics, LimitModel, ModelSpec};
use crate::rate::{ldp_rate_terminal, MinimizeOptions, TerminalTarget};
use crate::sim::{Control, Simulator};
use crate::volterra::BranchPolicy;

/// Fewer hits than this at any level makes the log-probability fit meaningless.
pub const MIN_HITS: usize = 20;
pub const MIN_PATHS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Ge,
    Le,
}

/// {state[component](time) ≥ threshold} (or ≤), in the coordinates of the
/// simulated process: levels for large deviations, η for moderate deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviationEvent {
    /// 0 = X, i ≥ 1 = i-th volatility factor.
    pub component: usize,
    pub direction: Direction,
    pub threshold: f64,
    /// Evaluation time; the grid horizon when absent.
    #[serde(default)]
    pub time: Option<f64>,
}

impl DeviationEvent {
    pub fn contains(&self, x: f64) -> bool {
        match self.direction {
            Direction::Ge => x >= self.threshold,
            Direction::Le => x <= self.threshold,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeviationExperiment {
    /// Model whose regime fixes the scaling; ε is taken from `epsilons`.
    pub model: ModelSpec,
    pub event: DeviationEvent,
    pub epsilons: Vec<f64>,
    pub n_paths: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    /// Shift used for importance sampling; ε-independent because the simulator
    /// scales it by the regime's shift factor.
    pub is_control: Option<Control>,
    /// Rate the intercept is compared against.
    pub reference_rate: Option<f64>,
}

impl DeviationExperiment {
    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() || self.epsilons.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidExperiment("epsilons must be positive".into()));
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidExperiment("epsilons must be strictly decreasing".into()));
        }
        if self.n_paths < MIN_PATHS {
            return Err(Error::InvalidExperiment(format!("n_paths must be >= {MIN_PATHS}")));
        }
        if self.event.component > self.model.dynamics.n_factors() {
            return Err(Error::InvalidExperiment(format!("event component {} out of range", self.event.component)));
        }
        self.eval_node()?;
        if let Some(c) = &self.is_control {
            if c.grid() != &self.grid || c.dim() != self.model.dynamics.n_factors() + 1 {
                return Err(Error::InvalidExperiment("is_control does not match the grid and model".into()));
            }
        }
        Ok(())
    }

    fn eval_node(&self) -> Result<usize> {
        let t = self.event.time.unwrap_or(self.grid.horizon);
        self.grid
            .node_index(t)
            .ok_or_else(|| Error::InvalidExperiment(format!("event time {t} is not a grid node")))
    }

    /// Seed of the level with index i; independent streams per level.
    fn level_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub p_hat: f64,
    pub stderr: f64,
    /// Paths inside the event.
    pub hits: usize,
}

/// p̂ of the event at ε, with importance sampling when the experiment has a control.
pub fn estimate_event_prob(exp: &DeviationExperiment, eps: f64) -> Result<Estimate> {
    exp.validate()?;
    let level = exp
        .epsilons
        .iter()
        .position(|&e| e == eps)
        .ok_or_else(|| Error::InvalidExperiment(format!("eps = {eps} is not in the experiment's list")))?;
    estimate_level(exp, eps, exp.level_seed(level))
}

fn estimate_level(exp: &DeviationExperiment, eps: f64, seed: u64) -> Result<Estimate> {
    if exp.event.threshold.is_infinite() {
        let sure = match exp.event.direction {
            Direction::Ge => exp.event.threshold < 0.0,
            Direction::Le => exp.event.threshold > 0.0,
        };
        let p = if sure { 1.0 } else { 0.0 };
        return Ok(Estimate { p_hat: p, stderr: 0.0, hits: if sure { exp.n_paths } else { 0 } });
    }
    let model = exp.model.with_eps(eps)?;
    let node = exp.eval_node()?;
    let sim = Simulator::new(&model, exp.grid, exp.is_control.as_ref())?;
    let dim = sim.dim();
    let comp = exp.event.component;
    let event = exp.event;
    let samples: Vec<(bool, f64)> = sim.map(exp.n_paths, seed, |path, lw| {
        let hit = event.contains(path[node * dim + comp]);
        (hit, if hit { lw.exp() } else { 0.0 })
    });
    let n = exp.n_paths as f64;
    let hits = samples.iter().filter(|s| s.0).count();
    let mean = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.1 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Estimate { p_hat: mean.clamp(0.0, 1.0), stderr: (var / n).sqrt(), hits })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeLevel {
    pub eps: f64,
    pub p_hat: f64,
    pub stderr: f64,
    pub hits: usize,
    /// s(ε).
    pub speed: f64,
    /// s(ε)·log p̂.
    pub scaled_log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeReport {
    pub levels: Vec<SlopeLevel>,
    /// Intercept of the affine fit of s·log p̂ against s: the empirical −inf I.
    pub intercept: f64,
    pub slope: f64,
    pub reference_rate: Option<f64>,
    /// |−intercept − reference| / reference.
    pub relative_gap: Option<f64>,
    pub importance_sampling: bool,
}

/// Least-squares line through (x, y); returns (intercept, slope).
fn affine_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

/// Run every level and extrapolate s(ε)·log p̂ ≈ −I + c·s(ε) to s = 0.
pub fn ldp_slope(exp: &DeviationExperiment) -> Result<SlopeReport> {
    exp.validate()?;
    if exp.epsilons.len() < 3 {
        return Err(Error::InvalidExperiment("the slope fit needs at least 3 epsilons".into()));
    }
    let mut levels = Vec::with_capacity(exp.epsilons.len());
    for (i, &eps) in exp.epsilons.iter().enumerate() {
        let est = estimate_level(exp, eps, exp.level_seed(i))?;
        if est.hits < MIN_HITS {
            return Err(Error::InsufficientHits { eps, hits: est.hits });
        }
        let speed = exp.model.with_eps(eps)?.speed();
        levels.push(SlopeLevel {
            eps,
            p_hat: est.p_hat,
            stderr: est.stderr,
            hits: est.hits,
            speed,
            scaled_log_prob: speed * est.p_hat.ln(),
        });
    }
    let xs: Vec<f64> = levels.iter().map(|l| l.speed).collect();
    let ys: Vec<f64> = levels.iter().map(|l| l.scaled_log_prob).collect();
    let (intercept, slope) = affine_fit(&xs, &ys);
    let relative_gap = exp.reference_rate.map(|r| (-intercept - r).abs() / r.abs());
    Ok(SlopeReport {
        levels,
        intercept,
        slope,
        reference_rate: exp.reference_rate,
        relative_gap,
        importance_sampling: exp.is_control.is_some(),
    })
}

/// Whether the event component responds linearly to the control in the regime's
/// limit equation, so the Cameron–Martin control is exact.
fn is_linear_target(model: &ModelSpec, component: usize) -> bool {
    if model.regime.is_tail() {
        return false;
    }
    if model.regime.is_mdp() {
        return true;
    }
    component > 0 && !matches!(model.dynamics, Dynamics::RoughHeston { .. })
}

/// Deterministic shift for importance sampling on `grid`: minimal-energy
/// piecewise-constant control steering the limit path onto the event boundary.
///
/// Linear (Gaussian) targets use the closed-form Cameron–Martin control
/// v = Δ·a/|a|², with a the response of the terminal value to each interval
/// control. Other targets use the variational solver; if it fails, the constant
/// control hitting the boundary to first order is returned.
pub fn build_is_control(model: &ModelSpec, event: &DeviationEvent, grid: TimeGrid) -> Result<Control> {
    let m = model.dynamics.n_factors() + 1;
    let horizon = event.time.unwrap_or(grid.horizon);
    let node = grid
        .node_index(horizon)
        .ok_or_else(|| Error::InvalidExperiment(format!("event time {horizon} is not a grid node")))?;
    if event.component >= m {
        return Err(Error::InvalidExperiment(format!("event component {} out of range", event.component)));
    }
    let lm = LimitModel::for_regime(model, false);
    let sub = TimeGrid::new(horizon, node)?;
    let policy = if model.dynamics.is_sqrt() { BranchPolicy::AbsorbAtZero } else { BranchPolicy::ContinuePositive };
    let sys = lm.system(sub, policy)?;
    let zeros = vec![0.0; node * m];
    let traj = sys.solve(&zeros, &zeros)?;
    let d = sys.dim();
    let delta = event.threshold - traj.phi[node * d + event.component];
    if !delta.is_finite() || delta == 0.0 {
        return Ok(Control::zeros(grid, m));
    }
    let mut term = vec![0.0; d];
    term[event.component] = 1.0;
    let (gl, gr) = sys.gradient(&traj, &zeros, &zeros, &term);
    let a: Vec<f64> = gl.iter().zip(&gr).map(|(l, r)| l + r).collect();
    let pad = |vals: Vec<f64>| {
        let mut v = vals;
        v.resize(grid.n_steps * m, 0.0);
        Control::from_intervals(grid, m, v)
    };
    if is_linear_target(model, event.component) {
        let a2: f64 = a.iter().map(|x| x * x).sum();
        if a2 == 0.0 {
            return Err(Error::DegenerateCoefficients("the event does not respond to the control".into()));
        }
        return pad(a.iter().map(|x| delta * x / a2).collect());
    }
    let target = if event.component == 0 {
        TerminalTarget::X(event.threshold)
    } else {
        TerminalTarget::Y { factor: event.component - 1, value: event.threshold }
    };
    let opts = MinimizeOptions { n_steps: node, horizon, richardson: false, ..Default::default() };
    match ldp_rate_terminal(model, target, &opts) {
        Ok(r) => {
            let c = r.optimal_control.expect("solver returns a control");
            // Y-only targets leave out u
            let full = if c.dim() == m {
                c
            } else {
                let g = *c.grid();
                GridFunction::from_fn_vec(g, m, |t, out| {
                    let i = g.node_index(t).expect("grid node");
                    out[0] = 0.0;
                    out[1..].copy_from_slice(c.at(i));
                })
            };
            pad(Control::from_nodes(&full).values().to_vec())
        }
        Err(_) => {
            let mut sums = vec![0.0; m];
            for (e, x) in a.iter().enumerate() {
                sums[e % m] += x;
            }
            let s2: f64 = sums.iter().map(|x| x * x).sum();
            if s2 == 0.0 {
                return Err(Error::DegenerateCoefficients("the event does not respond to the control".into()));
            }
            let w: Vec<f64> = sums.iter().map(|x| delta * x / s2).collect();
            pad((0..node).flat_map(|_| w.iter().copied()).collect())
        }
    }
}
