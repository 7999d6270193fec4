use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use vd_core::grid::{GridFunction, TimeGrid};
use vd_core::iv::{mc_smile, smile_ldp, smile_mdp, smile_tail, SmilePoint};
use vd_core::kernels::{check_regularity, dyadic_h_grid, l2_norm_sq};
use vd_core::models::{Dynamics, LimitModel, ModelSpec, ScalingRegime};
use vd_core::rate::{
    heston_rate, ldp_rate_pair, ldp_rate_terminal, mdp_rate_pair, mdp_rate_terminal_x, mdp_rate_terminal_y,
    mdp_rate_terminal_y_model, multifactor_mdp_rate, tail_mdp_rate_y, tail_rate_heston, tail_rate_steinstein,
    MinimizeOptions, RateResult, TerminalTarget, DEFAULT_HESTON_DELTA,
};
use vd_core::sim::{simulate, simulate_controlled, Control};
use vd_core::verify::{build_is_control, ldp_slope, DeviationExperiment};
use vd_core::volterra::{solve_ldp_limit, LimitProblem};

use crate::config::{Loaded, PathFormat};
use crate::error::CliError;
use crate::output::{num, opt_num, write_json, write_paths_binary, Csv, Meta};

pub struct Common {
    pub out: Option<PathBuf>,
    pub deterministic: bool,
}

impl Common {
    fn out<'a>(&'a self, cfg: &'a Loaded) -> Option<&'a Path> {
        self.out.as_deref().or(cfg.config.output.as_deref())
    }
}

fn state_columns(m: &ModelSpec) -> Vec<String> {
    let mut cols = vec!["x".to_string()];
    cols.extend((1..=m.dynamics.n_factors()).map(|i| format!("y{i}")));
    cols
}

pub fn kernels(cfg: &Loaded, common: &Common) -> Result<(), CliError> {
    let block = cfg.kernel()?;
    let k = &block.kernel;
    let mut points = Vec::with_capacity(block.times.len());
    for &t in &block.times {
        let value = if k.is_convolution() { Some(k.eval_conv(t)?) } else { None };
        let norm = l2_norm_sq(k, t)?;
        points.push(json!({ "t": t, "value": value, "l2_norm_sq": norm }));
    }
    let mut body = json!({ "kernel": k, "points": points });
    if let Some(claim) = block.gamma_claim {
        let h = block.h_grid.clone().unwrap_or_else(|| dyadic_h_grid(4, 12));
        let horizon = cfg.config.grid.map(|g| g.horizon).unwrap_or(1.0);
        body["regularity"] = serde_json::to_value(check_regularity(k, claim, &h, horizon)?).expect("plain data");
    }
    let meta = Meta::new("kernels", &cfg.raw, None, common.deterministic);
    Ok(write_json(&meta, body, common.out(cfg))?)
}

pub fn limit_solve(cfg: &Loaded, common: &Common) -> Result<(), CliError> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let block = cfg.config.limit.clone().unwrap_or(crate::config::LimitBlock {
        control: None,
        policy: Default::default(),
        interp: Default::default(),
    });
    let lm = LimitModel::for_regime(model, false);
    let system = lm.system(grid, block.policy)?;
    let nd = system.noise_dim();
    let c = block.control.unwrap_or_else(|| vec![0.0; nd]);
    if c.len() != nd {
        return Err(cfg.invalid("limit.control", format!("needs {nd} components, got {}", c.len())));
    }
    let p = LimitProblem { system, control: GridFunction::constant(grid, &c), interp: block.interp };
    let rep = solve_ldp_limit(&p)?;
    eprintln!(
        "residual {:e}, certificate {:e}, picard iterations {}, branch {:?}",
        rep.residual, rep.certificate, rep.picard_iterations, rep.branch_taken
    );
    let mut cols = vec!["t".to_string()];
    cols.extend(state_columns(model));
    let mut csv = Csv::new(&cols.iter().map(String::as_str).collect::<Vec<_>>());
    for i in 0..grid.n_nodes() {
        let mut row = vec![num(grid.t(i))];
        row.extend(rep.path.at(i).iter().map(|&x| num(x)));
        csv.push(row);
    }
    let meta = Meta::new("limit solve", &cfg.raw, None, common.deterministic);
    Ok(csv.write(&meta, common.out(cfg))?)
}

pub fn simulate_cmd(cfg: &Loaded, common: &Common) -> Result<(), CliError> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let block = cfg.simulate()?;
    let e = match &block.control {
        Some(c) => {
            let want = model.dynamics.n_factors() + 1;
            if c.len() != want {
                return Err(cfg.invalid("simulate.control", format!("needs {want} components, got {}", c.len())));
            }
            simulate_controlled(model, &Control::constant(grid, c), grid, block.n_paths, block.seed)?
        }
        None => simulate(model, grid, block.n_paths, block.seed)?,
    };
    let meta = Meta::new("simulate", &cfg.raw, Some(block.seed), common.deterministic);
    match block.format {
        PathFormat::Binary => {
            let out = common.out(cfg).ok_or_else(|| cfg.invalid("simulate.format", "binary output needs --out"))?;
            write_paths_binary(&meta, e.n_paths, grid.n_nodes(), e.dim, &e.paths, out)?;
        }
        PathFormat::Csv => {
            let mut cols = vec!["path".to_string(), "node".to_string(), "t".to_string()];
            cols.extend(state_columns(model));
            if e.log_weights.is_some() {
                cols.push("log_weight".into());
            }
            let mut csv = Csv::new(&cols.iter().map(String::as_str).collect::<Vec<_>>());
            for p in 0..e.n_paths {
                for i in 0..grid.n_nodes() {
                    let mut row = vec![p.to_string(), i.to_string(), num(grid.t(i))];
                    row.extend((0..e.dim).map(|c| num(e.value(p, i, c))));
                    if let Some(w) = &e.log_weights {
                        row.push(num(w[p]));
                    }
                    csv.push(row);
                }
            }
            csv.write(&meta, common.out(cfg))?;
        }
    }
    Ok(())
}

/// `x=<v>` for the log-price, `y=<v>` or `y<j>=<v>` for a volatility factor.
pub fn parse_terminal(s: &str) -> Result<TerminalTarget, CliError> {
    let bad = || CliError::Config(format!("--terminal: expected x=<v>, y=<v> or y<j>=<v>, got `{s}`"));
    let (lhs, rhs) = s.split_once('=').ok_or_else(bad)?;
    let value: f64 = rhs.trim().parse().map_err(|_| bad())?;
    match lhs.trim() {
        "x" => Ok(TerminalTarget::X(value)),
        "y" => Ok(TerminalTarget::Y { factor: 0, value }),
        other => {
            let j: usize = other.strip_prefix('y').and_then(|d| d.parse().ok()).filter(|&j| j >= 1).ok_or_else(bad)?;
            Ok(TerminalTarget::Y { factor: j - 1, value })
        }
    }
}

fn minimize_options(cfg: &Loaded) -> Result<MinimizeOptions, CliError> {
    let mut o = MinimizeOptions::default();
    if let Some(g) = cfg.config.grid {
        o.horizon = g.horizon;
        o.n_steps = g.n_steps;
    }
    if let Some(r) = &cfg.config.rate {
        if let Some(n) = r.n_steps {
            o.n_steps = n;
        }
        if let Some(b) = r.richardson {
            o.richardson = b;
        }
        if let Some(m) = r.max_iters {
            o.max_iters = m;
        }
    }
    if o.n_steps < 4 {
        return Err(cfg.invalid("rate.n_steps", "must be at least 4"));
    }
    Ok(o)
}

fn rate_json(r: &RateResult) -> Value {
    json!({
        "value": r.value.is_finite().then_some(r.value),
        "discrete_value": r.discrete_value.is_finite().then_some(r.discrete_value),
        "extrapolated": r.extrapolated,
        "regularization_delta": r.regularization_delta,
        "finite": r.is_finite(),
        "solver": {
            "iterations": r.diag.iterations,
            "constraint_violation": r.diag.constraint_violation,
            "converged": r.diag.converged,
        },
    })
}

fn target_json(t: TerminalTarget) -> Value {
    match t {
        TerminalTarget::X(v) => json!({ "component": "x", "value": v }),
        TerminalTarget::Y { factor, value } => json!({ "component": format!("y{}", factor + 1), "value": value }),
    }
}

pub fn rate_minimize(cfg: &Loaded, common: &Common, terminal: &str) -> Result<(), CliError> {
    let model = cfg.model()?;
    let target = parse_terminal(terminal)?;
    let opts = minimize_options(cfg)?;
    let r = ldp_rate_terminal(model, target, &opts)?;
    let mut body = rate_json(&r);
    body["target"] = target_json(target);
    body["n_steps"] = json!(opts.n_steps);
    let meta = Meta::new(&format!("rate minimize --terminal {terminal}"), &cfg.raw, None, common.deterministic);
    Ok(write_json(&meta, body, common.out(cfg))?)
}

pub fn rate_mdp(cfg: &Loaded, common: &Common, terminal: &str) -> Result<(), CliError> {
    let model = cfg.model()?;
    let target = parse_terminal(terminal)?;
    let mut body = json!({ "target": target_json(target) });
    match target {
        TerminalTarget::X(x) => body["value"] = json!(mdp_rate_terminal_x(model, x)?),
        TerminalTarget::Y { factor, value } => {
            body["value"] = json!(mdp_rate_terminal_y_model(model, factor, value)?);
            body["unit_reference"] = json!(mdp_rate_terminal_y(value));
        }
    }
    let meta = Meta::new(&format!("rate mdp --terminal {terminal}"), &cfg.raw, None, common.deterministic);
    Ok(write_json(&meta, body, common.out(cfg))?)
}

/// Read node values (t, phi, vphi_1..vphi_m) from a CSV, skipping `#` lines and the header.
fn read_path_csv(cfg: &Loaded, path: &Path, grid: TimeGrid, m: usize) -> Result<(GridFunction, GridFunction), CliError> {
    let base = cfg.path.parent().unwrap_or(Path::new("."));
    let full = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
    let text = std::fs::read_to_string(&full).map_err(|e| cfg.invalid("rate.path", format!("{}: {e}", full.display())))?;
    let mut rows = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let cells: Result<Vec<f64>, _> = line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        match cells {
            Ok(c) => rows.push(c),
            Err(_) if rows.is_empty() => continue,
            Err(_) => return Err(cfg.invalid("rate.path", format!("non-numeric row `{line}`"))),
        }
    }
    if rows.len() != grid.n_nodes() || rows.iter().any(|r| r.len() != m + 2) {
        return Err(cfg.invalid(
            "rate.path",
            format!("expected {} rows of {} columns (t, phi, vphi...)", grid.n_nodes(), m + 2),
        ));
    }
    for (i, r) in rows.iter().enumerate() {
        if (r[0] - grid.t(i)).abs() > 1e-9 * grid.horizon {
            return Err(cfg.invalid("rate.path", format!("row {i}: t = {} is not the grid node {}", r[0], grid.t(i))));
        }
    }
    let phi = GridFunction::scalar(grid, rows.iter().map(|r| r[1]).collect())?;
    let vphi = GridFunction::new(grid, m, rows.iter().flat_map(|r| r[2..].to_vec()).collect())?;
    Ok((phi, vphi))
}

pub fn rate_eval(cfg: &Loaded, common: &Common) -> Result<(), CliError> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let block = cfg.config.rate.as_ref().ok_or_else(|| cfg.invalid("rate", "missing"))?;
    let path = block.path.as_ref().ok_or_else(|| cfg.invalid("rate.path", "missing"))?;
    let (phi, vphi) = read_path_csv(cfg, path, grid, model.dynamics.n_factors())?;
    let delta = block.heston_delta.unwrap_or(DEFAULT_HESTON_DELTA);
    let heston = matches!(model.dynamics, Dynamics::RoughHeston { .. });
    let r = match model.regime {
        ScalingRegime::SmallTimeLdp { .. } if heston => heston_rate(model, &phi, &vphi, delta)?,
        ScalingRegime::SmallTimeLdp { .. } => ldp_rate_pair(model, &phi, &vphi)?,
        ScalingRegime::SmallTimeMdp { .. } if model.dynamics.n_factors() > 1 => multifactor_mdp_rate(model, &phi, &vphi)?,
        ScalingRegime::SmallTimeMdp { .. } => mdp_rate_pair(model, &phi, &vphi)?,
        ScalingRegime::TailLdp { .. } if heston => tail_rate_heston(model, &phi, &vphi, delta)?,
        ScalingRegime::TailLdp { .. } => tail_rate_steinstein(model, &phi, &vphi)?,
        ScalingRegime::TailMdp { .. } => tail_mdp_rate_y(model, &vphi)?,
    };
    let meta = Meta::new("rate eval", &cfg.raw, None, common.deterministic);
    Ok(write_json(&meta, rate_json(&r), common.out(cfg))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SmileRegime {
    Ldp,
    Mdp,
    Tail,
    Mc,
}

fn smile_row(p: &SmilePoint) -> Vec<String> {
    vec![
        num(p.t),
        num(p.k),
        num(p.strike),
        num(p.implied_vol),
        p.source.label().to_string(),
        opt_num(p.stderr),
        opt_num(p.normalization),
        p.clipped.to_string(),
    ]
}

pub fn smile(cfg: &Loaded, common: &Common, regime: SmileRegime) -> Result<(), CliError> {
    let model = cfg.model()?;
    let block = cfg.smile()?;
    let mut opts = minimize_options(cfg)?;
    if let Some(n) = block.solver_n_steps {
        opts.n_steps = n;
    }
    let mut csv = Csv::new(&["t", "k", "strike", "implied_vol", "source", "stderr", "normalization", "clipped"]);
    let mut seed = None;
    let need_k = || {
        if block.k.is_empty() {
            Err(cfg.invalid("smile.k", "asymptotic smiles need at least one k"))
        } else {
            Ok(())
        }
    };
    for &t in &block.maturities {
        match regime {
            SmileRegime::Ldp => {
                need_k()?;
                for &k in &block.k {
                    csv.push(smile_row(&smile_ldp(model, k, t, &opts)?));
                }
            }
            SmileRegime::Mdp => {
                need_k()?;
                let beta = block
                    .beta
                    .or(model.regime.beta())
                    .ok_or_else(|| cfg.invalid("smile.beta", "needed for the moderate deviations smile"))?;
                for &k in &block.k {
                    csv.push(smile_row(&smile_mdp(model, k, t, beta)?));
                }
            }
            SmileRegime::Tail => {
                need_k()?;
                for &k in &block.k {
                    csv.push(smile_row(&smile_tail(model, t, k, &opts)?));
                }
            }
            SmileRegime::Mc => {
                if block.strikes.is_empty() {
                    return Err(cfg.invalid("smile.strikes", "Monte Carlo smiles need at least one strike"));
                }
                let s = block.seed.ok_or_else(|| cfg.invalid("smile.seed", "needed for Monte Carlo"))?;
                seed = Some(s);
                let n_paths = block.n_paths.ok_or_else(|| cfg.invalid("smile.n_paths", "needed for Monte Carlo"))?;
                let n_steps = block.n_steps.unwrap_or(64);
                let r = mc_smile(model, t, &block.strikes, n_paths, n_steps, s)?;
                eprintln!("t = {t}: E exp(X_t) = {} ± {}", r.forward, r.forward_stderr);
                if !r.dropped.is_empty() {
                    eprintln!("t = {t}: dropped strikes {:?}", r.dropped);
                }
                for p in &r.points {
                    csv.push(smile_row(p));
                }
            }
        }
    }
    let label = match regime {
        SmileRegime::Ldp => "ldp",
        SmileRegime::Mdp => "mdp",
        SmileRegime::Tail => "tail",
        SmileRegime::Mc => "mc",
    };
    let meta = Meta::new(&format!("smile --regime {label}"), &cfg.raw, seed, common.deterministic);
    Ok(csv.write(&meta, common.out(cfg))?)
}

pub fn verify(cfg: &Loaded, common: &Common) -> Result<(), CliError> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let block = cfg.experiment()?;
    let is_control = if block.importance_sampling { Some(build_is_control(model, &block.event, grid)?) } else { None };
    let exp = DeviationExperiment {
        model: model.clone(),
        event: block.event,
        epsilons: block.epsilons.clone(),
        n_paths: block.n_paths,
        grid,
        seed: block.seed,
        is_control,
        reference_rate: block.reference_rate,
    };
    exp.validate()?;
    let report = ldp_slope(&exp)?;
    let body = json!({
        "regime": model.regime.label(),
        "event": block.event,
        "report": report,
    });
    let meta = Meta::new("verify", &cfg.raw, Some(block.seed), common.deterministic);
    Ok(write_json(&meta, body, common.out(cfg))?)
}
