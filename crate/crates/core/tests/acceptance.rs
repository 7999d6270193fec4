//! Acceptance suite: one PASS/FAIL line per criterion at its pinned tolerance.
//!
//! Failing criteria are reported, not fatal; set VD_ACCEPTANCE_STRICT=1 to turn
//! any FAIL into a non-zero exit.

use std::time::{Duration, Instant};

use statrs::function::gamma::gamma;
use vd_core::frac::{rl_derivative, rl_integral, FracOrder};
use vd_core::grid::{GridFunction, TimeGrid};
use vd_core::iv::mc_smile;
use vd_core::kernels::KernelSpec;
use vd_core::models::{Dynamics, LimitKind, LimitModel, ModelSpec, ScalingRegime};
use vd_core::rate::{
    heston_rate, ldp_rate_pair, ldp_rate_terminal, mdp_rate_pair, mdp_rate_terminal_x, mdp_rate_terminal_y,
    multifactor_mdp_rate, tail_rate_heston, tail_rate_steinstein, MinimizeOptions, RateResult, TerminalTarget,
};
use vd_core::sim::{holder_moment, max_moment, simulate, Simulator};
use vd_core::special::integrate_singular_left;
use vd_core::verify::{build_is_control, ldp_slope, DeviationEvent, DeviationExperiment, Direction};
use vd_core::volterra::{solve_ldp_limit, BranchPolicy, Coefficients, ControlInterp, LimitProblem, LimitSystem};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn bergomi(h: f64, rho: f64, y0: f64, regime: ScalingRegime) -> ModelSpec {
    ModelSpec::new(Dynamics::RoughBergomi { a: 0.0, rho, y0, hurst: h }, regime).unwrap()
}

/// ‖K‖²_{L²[0,1]} of the power-law kernel by singular quadrature.
fn kernel_norm_sq(h: f64) -> f64 {
    let c = 1.0 / gamma(h + 0.5);
    integrate_singular_left(1.0, |s| (c * s.powf(h - 0.5)).powi(2))
}

fn c1_frac() -> Outcome {
    let g = TimeGrid::new(1.0, 4096).unwrap();
    let mut worst: f64 = 0.0;
    for beta in [0.0, 0.6, 1.0] {
        let f = GridFunction::from_fn(g, |t| t.powf(beta));
        for alpha in [0.1, 0.6, 0.9] {
            let a = FracOrder::new(alpha).unwrap();
            let int = rl_integral(&f, a);
            let der = rl_derivative(&f, a, if beta == 0.0 { 1.0 } else { 0.0 });
            let ci = gamma(beta + 1.0) / gamma(beta + 1.0 + alpha);
            let cd = gamma(beta + 1.0) / gamma(beta + 1.0 - alpha);
            for (i, t) in g.nodes().into_iter().enumerate() {
                if t < 0.01 {
                    continue;
                }
                let wi = ci * t.powf(beta + alpha);
                let wd = cd * t.powf(beta - alpha);
                worst = worst.max(((int.get(i, 0) - wi) / wi).abs());
                worst = worst.max(((der.get(i, 0) - wd) / wd).abs());
            }
        }
    }
    let f = GridFunction::from_fn(g, |t| t.powf(0.6));
    let d = rl_derivative(&f, FracOrder::new(0.6).unwrap(), 0.0);
    let g16 = 0.893515349287690271;
    let mut worst_d: f64 = 0.0;
    for (i, t) in g.nodes().into_iter().enumerate() {
        if t >= 0.01 {
            worst_d = worst_d.max((d.get(i, 0) - g16).abs() / g16);
        }
    }
    outcome(
        worst < 1e-3 && worst_d < 1e-3,
        format!("max rel err power maps {worst:.2e}, D^0.6 t^0.6 {worst_d:.2e} (tol 1e-3, t >= 0.01, n = 4096)"),
    )
}

struct Feller;
impl Coefficients for Feller {
    fn dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn drift(&self, _: usize, _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion(&self, _: usize, x: &[f64], out: &mut [f64]) {
        out[0] = x[0].max(0.0).sqrt();
    }
    fn sqrt_components(&self) -> Vec<bool> {
        vec![true]
    }
}

fn c2_feller() -> Outcome {
    let g = TimeGrid::new(4.0, 4096).unwrap();
    let control = GridFunction::from_fn(g, |t| if t < 2.0 { -1.0 } else { 1.0 });
    let mut details = Vec::new();
    let mut pass = true;
    for policy in [BranchPolicy::ContinuePositive, BranchPolicy::AbsorbAtZero] {
        let system = LimitSystem::new(g, vec![1.0], &Feller, policy)
            .unwrap()
            .with_kernel(&KernelSpec::Constant(1.0))
            .unwrap();
        let p = LimitProblem { system, control: control.clone(), interp: ControlInterp::PiecewiseConstant };
        let r = solve_ldp_limit(&p).unwrap();
        let mut err: f64 = 0.0;
        for (i, t) in g.nodes().into_iter().enumerate() {
            let want = if t <= 2.0 {
                (1.0 - t / 2.0).powi(2)
            } else if policy == BranchPolicy::ContinuePositive {
                (t - 2.0).powi(2) / 4.0
            } else {
                0.0
            };
            err = err.max((r.path.get(i, 0) - want).abs());
        }
        pass &= r.residual <= 1e-8 && err <= 1e-8;
        details.push(format!("{policy:?}: residual {:.1e}, path err {err:.1e}", r.residual));
    }
    outcome(pass, format!("{} (tol 1e-8, n = 4096)", details.join("; ")))
}

fn c3_cameron_martin() -> Outcome {
    let h = 0.1;
    let norm = kernel_norm_sq(h);
    let closed = 1.0 / (2.0 * h * gamma(h + 0.5).powi(2));
    let model = bergomi(h, 0.0, 0.0, ScalingRegime::SmallTimeLdp { eps: 0.1 });
    let mut worst: f64 = 0.0;
    let mut vals = Vec::new();
    for y in [0.5, 1.0, 2.0] {
        let r = ldp_rate_terminal(&model, TerminalTarget::Y { factor: 0, value: y }, &MinimizeOptions::default()).unwrap();
        let want = y * y / (2.0 * norm);
        worst = worst.max((r.value - want).abs() / want);
        vals.push(format!("{:.5}/{:.5}", r.value, want));
    }
    let oracle_ok = (norm - closed).abs() < 1e-10 && (norm - 2.2546).abs() < 1e-4;
    outcome(
        worst < 0.01 && oracle_ok,
        format!("solver/oracle {} , max rel err {worst:.2e} (tol 1e-2), |K|^2 = {norm:.6}", vals.join(" ")),
    )
}

fn sup_round_trip(model: &ModelSpec, kind: LimitKind, r: &RateResult) -> f64 {
    let want = r.optimal_path.as_ref().unwrap();
    let lm = LimitModel::new(model, kind, false);
    let sys = lm.system(*want.grid(), BranchPolicy::ContinuePositive).unwrap();
    let p = LimitProblem { system: sys, control: r.optimal_control.clone().unwrap(), interp: ControlInterp::Linear };
    solve_ldp_limit(&p).unwrap().path.sup_distance(want, 3).unwrap()
}

fn c4_round_trips() -> Outcome {
    let g = TimeGrid::new(1.0, 2048).unwrap();
    let st = ScalingRegime::SmallTimeLdp { eps: 0.1 };
    let tail = ScalingRegime::TailLdp { eps: 0.1 };
    let mdp = ScalingRegime::SmallTimeMdp { eps: 0.1, beta: 0.05 };
    let phi = GridFunction::from_fn(g, |t| 0.3 * t - 0.2 * t * t);
    let mut results: Vec<(&str, f64)> = Vec::new();

    let ss = |regime| {
        ModelSpec::new(Dynamics::RoughSteinStein { kappa: 0.8, theta: 0.1, xi: 0.5, rho: -0.4, y0: 0.2, hurst: 0.2 }, regime)
            .unwrap()
    };
    let hs = |regime| {
        ModelSpec::new(Dynamics::RoughHeston { kappa: 0.5, theta: 0.04, xi: 0.4, rho: -0.6, y0: 0.04, hurst: 0.2 }, regime)
            .unwrap()
    };

    let vphi = GridFunction::from_fn(g, |t| 0.2 + 0.3 * t.powf(0.7) - 0.1 * t);
    let m = ss(st);
    let r = ldp_rate_pair(&m, &phi, &vphi).unwrap();
    results.push(("explicit Stein-Stein", sup_round_trip(&m, LimitKind::Ldp, &r)));

    let m = bergomi(0.1, -0.5, -3.0, st);
    let vb = GridFunction::from_fn(g, |t| -3.0 + 0.5 * t.powf(0.6));
    let r = ldp_rate_pair(&m, &phi, &vb).unwrap();
    results.push(("explicit Bergomi", sup_round_trip(&m, LimitKind::Ldp, &r)));

    let m = hs(st);
    let vh = GridFunction::from_fn(g, |t| 0.04 + 0.05 * t.powf(0.7));
    let r = heston_rate(&m, &phi, &vh, 0.0).unwrap();
    results.push(("explicit Heston", sup_round_trip(&m, LimitKind::Ldp, &r)));

    let m = ss(tail);
    let vt = GridFunction::from_fn(g, |t| 0.4 * t.powf(0.7) + 0.2 * t);
    let r = tail_rate_steinstein(&m, &phi, &vt).unwrap();
    results.push(("tail Stein-Stein", sup_round_trip(&m, LimitKind::Ldp, &r)));

    let m = hs(tail);
    let r = tail_rate_heston(&m, &phi, &vt, 0.0).unwrap();
    results.push(("tail Heston", sup_round_trip(&m, LimitKind::Ldp, &r)));

    let m = ss(mdp);
    let r = mdp_rate_pair(&m, &phi, &vphi).unwrap();
    results.push(("MDP Stein-Stein", sup_round_trip(&m, LimitKind::Mdp, &r)));

    let mf = ModelSpec::new(
        Dynamics::MultiRoughBergomi {
            l: vec![vec![1.0, 0.0], vec![0.4, 0.8]],
            a: vec![0.0, 0.0],
            y0: vec![-3.0, -3.5],
            rho: vec![-0.3, -0.2],
            hurst: vec![0.2, 0.2],
        },
        mdp,
    )
    .unwrap();
    let vm = GridFunction::from_fn_vec(g, 2, |t, o| {
        o[0] = -3.0 + 0.3 * t.powf(0.7);
        o[1] = -3.5 - 0.2 * t.powf(0.8);
    });
    let r = multifactor_mdp_rate(&mf, &phi, &vm).unwrap();
    results.push(("MDP multifactor", sup_round_trip(&mf, LimitKind::Mdp, &r)));

    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(worst <= 1e-3, format!("sup err: {detail} (tol 1e-3, n = 2048)"))
}

fn c5_mdp() -> Outcome {
    let mdp = ScalingRegime::SmallTimeMdp { eps: 0.1, beta: 0.1 };
    let heston = ModelSpec::new(
        Dynamics::RoughHeston { kappa: 0.3, theta: 0.04, xi: 0.3, rho: -0.5, y0: 0.04, hurst: 0.3 },
        mdp,
    )
    .unwrap();
    let opts = MinimizeOptions::default();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for x in [0.1, 0.5] {
        let want = mdp_rate_terminal_x(&heston, x).unwrap();
        let got = ldp_rate_terminal(&heston, TerminalTarget::X(x), &opts).unwrap().value;
        worst = worst.max((got - want).abs() / want);
        parts.push(format!("x={x}: {got:.6}/{want:.6}"));
    }
    // ζ ≡ 1 and ‖K‖ = 1 at H = 1/2, where the marginal is y²/2
    let unit = bergomi(0.5, 0.0, 0.0, ScalingRegime::SmallTimeMdp { eps: 0.1, beta: 0.25 });
    for y in [1.0, 2.0] {
        let want = mdp_rate_terminal_y(y);
        let got = ldp_rate_terminal(&unit, TerminalTarget::Y { factor: 0, value: y }, &opts).unwrap().value;
        worst = worst.max((got - want).abs() / want);
        parts.push(format!("y={y}: {got:.6}/{want:.6}"));
    }
    let c = 3.7;
    let mut scale_err: f64 = 0.0;
    scale_err = scale_err.max((mdp_rate_terminal_x(&heston, c * 0.1).unwrap() - c * c * mdp_rate_terminal_x(&heston, 0.1).unwrap()).abs() / (c * c * mdp_rate_terminal_x(&heston, 0.1).unwrap()));
    scale_err = scale_err.max((mdp_rate_terminal_y(c * 0.4) - c * c * mdp_rate_terminal_y(0.4)).abs() / (c * c * mdp_rate_terminal_y(0.4)));
    let g = TimeGrid::new(1.0, 512).unwrap();
    let phi = GridFunction::from_fn(g, |t| (2.0 * t).sin());
    let vphi = GridFunction::from_fn(g, |t| 0.04 + 0.02 * t.powf(0.9));
    let base = mdp_rate_pair(&heston, &phi, &vphi).unwrap().value;
    let scaled = mdp_rate_pair(&heston, &phi.scale(c), &vphi.map(|y| 0.04 + c * (y - 0.04))).unwrap().value;
    scale_err = scale_err.max((scaled - c * c * base).abs() / (c * c * base));
    outcome(
        worst < 0.01 && scale_err <= 1e-10,
        format!("solver/formula {} max rel {worst:.2e} (tol 1e-2); quadratic scaling err {scale_err:.1e} (tol 1e-10)", parts.join(" ")),
    )
}

fn slope_experiment(model: ModelSpec, threshold: f64, reference: f64) -> DeviationExperiment {
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let event = DeviationEvent { component: 1, direction: Direction::Ge, threshold, time: None };
    let control = build_is_control(&model, &event, grid).unwrap();
    DeviationExperiment {
        model,
        event,
        epsilons: vec![0.4, 0.3, 0.2, 0.15],
        n_paths: 100_000,
        grid,
        seed: 20240611,
        is_control: Some(control),
        reference_rate: Some(reference),
    }
}

fn slope_detail(r: &vd_core::verify::SlopeReport) -> String {
    let lv: Vec<String> = r.levels.iter().map(|l| format!("{:.4}", l.scaled_log_prob)).collect();
    format!("s*log p = [{}], intercept {:.4} vs {:.4}", lv.join(", "), r.intercept, -r.reference_rate.unwrap())
}

fn c6_ldp_slope() -> Outcome {
    let h = 0.1;
    let model = bergomi(h, 0.0, 0.0, ScalingRegime::SmallTimeLdp { eps: 0.4 });
    let reference = 1.0 / (2.0 * kernel_norm_sq(h));
    let r = ldp_slope(&slope_experiment(model, 1.0, reference)).unwrap();
    let gap = r.relative_gap.unwrap();
    outcome(gap <= 0.10, format!("{}, gap {gap:.3} (tol 0.10)", slope_detail(&r)))
}

fn c7_mdp_slope() -> Outcome {
    let h = 0.1;
    let model = bergomi(h, 0.0, 0.0, ScalingRegime::SmallTimeMdp { eps: 0.4, beta: h / 2.0 });
    let r = ldp_slope(&slope_experiment(model, 1.0, mdp_rate_terminal_y(1.0))).unwrap();
    let gap = r.relative_gap.unwrap();
    outcome(gap <= 0.15, format!("{}, gap {gap:.3} (tol 0.15)", slope_detail(&r)))
}

fn c8_importance_sampling() -> Outcome {
    let h = 0.1;
    let eps = 0.5;
    let model = bergomi(h, 0.0, 0.0, ScalingRegime::SmallTimeLdp { eps });
    let sd = eps.powf(h) * kernel_norm_sq(h).sqrt();
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let event = DeviationEvent { component: 1, direction: Direction::Ge, threshold: 3.0 * sd, time: None };
    let mut exp = DeviationExperiment {
        model: model.clone(),
        event,
        epsilons: vec![eps],
        n_paths: 100_000,
        grid,
        seed: 99,
        is_control: None,
        reference_rate: None,
    };
    let plain = vd_core::verify::estimate_event_prob(&exp, eps).unwrap();
    exp.is_control = Some(build_is_control(&model, &event, grid).unwrap());
    exp.seed = 100;
    let is = vd_core::verify::estimate_event_prob(&exp, eps).unwrap();
    let z = (plain.p_hat - is.p_hat).abs() / (plain.stderr.powi(2) + is.stderr.powi(2)).sqrt();
    let ratio = (plain.stderr / is.stderr).powi(2);
    // exact Gaussian tail at 3 sd
    let exact = 0.5 * statrs::function::erf::erfc(3.0 / std::f64::consts::SQRT_2);
    outcome(
        z <= 4.0 && ratio >= 10.0,
        format!(
            "plain {:.3e}±{:.1e}, IS {:.3e}±{:.1e}, exact {exact:.3e}; |diff|/se {z:.2} (tol 4), variance ratio {ratio:.1} (min 10)",
            plain.p_hat, plain.stderr, is.p_hat, is.stderr
        ),
    )
}

fn c9_martingale_smile() -> Outcome {
    let h = 0.1;
    let t = 0.25;
    let model = bergomi(h, -0.7, (0.04f64).ln(), ScalingRegime::SmallTimeLdp { eps: t });
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let sim = Simulator::new(&model, grid, None).unwrap();
    let scale = t.powf(0.5 - h);
    let xs: Vec<f64> = sim.map(100_000, 5, |p, _| (scale * p[32 * 2]).exp());
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let se = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let mart = (mean - 1.0).abs() <= 4.0 * se;

    let heston = ModelSpec::new(
        Dynamics::RoughHeston { kappa: 0.3, theta: 0.04, xi: 0.3, rho: -0.7, y0: 0.04, hurst: 0.3 },
        ScalingRegime::SmallTimeLdp { eps: 0.04 },
    )
    .unwrap();
    let beta = 0.15;
    let k = 0.2;
    let mut gaps = Vec::new();
    let mut vols = Vec::new();
    for tm in [0.04f64, 0.02, 0.01] {
        let strike = k * tm.powf(0.5 - beta);
        let s = mc_smile(&heston, tm, &[strike], 1_000_000, 32, 11).unwrap();
        let p = &s.points[0];
        gaps.push((p.implied_vol - 0.2).abs());
        vols.push(format!("{:.5}±{:.1e}", p.implied_vol, p.stderr.unwrap()));
    }
    let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
    outcome(
        mart && monotone,
        format!(
            "E exp(X_T) = {mean:.5}±{se:.1e} (4 se); Heston MDP smile t=0.04,0.02,0.01: {} toward 0.2, monotone {monotone}",
            vols.join(", ")
        ),
    )
}

fn c10_simulation() -> Outcome {
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let heston = ModelSpec::new(
        Dynamics::RoughHeston { kappa: 0.3, theta: 0.04, xi: 0.3, rho: -0.7, y0: 0.04, hurst: 0.2 },
        ScalingRegime::SmallTimeLdp { eps: 0.5 },
    )
    .unwrap();
    let berg = bergomi(0.1, -0.7, -3.0, ScalingRegime::SmallTimeLdp { eps: 0.5 });
    let mut identical = true;
    for m in [&heston, &berg] {
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate(m, grid, 3000, 42).unwrap())
        };
        let (a, b) = (run(1), run(4));
        identical &= a.paths.iter().zip(&b.paths).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    let mut bounded = true;
    let mut rows = Vec::new();
    for (name, m, h) in [("Bergomi", &berg, 0.1), ("Heston", &heston, 0.2)] {
        let mut mm = Vec::new();
        let mut hm = Vec::new();
        for eps in [0.5, 0.2, 0.1, 0.05] {
            let e = simulate(&m.with_eps(eps).unwrap(), grid, 4000, 7).unwrap();
            mm.push(max_moment(&e, 1, 4.0));
            hm.push(holder_moment(&e, 1, 4.0, h / 2.0));
        }
        let ok = |v: &[f64]| v.iter().all(|x| x.is_finite()) && v.iter().all(|&x| x <= 1.5 * v[0]);
        bounded &= ok(&mm) && ok(&hm);
        let f = |v: &[f64]| v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ");
        rows.push(format!("{name} E sup|Y|^4 [{}], Holder(H/2) [{}]", f(&mm), f(&hm)));
    }
    outcome(
        identical && bounded,
        format!("bit-identical 1 vs 4 threads: {identical}; moments over eps 0.5..0.05: {}", rows.join("; ")),
    )
}

fn main() {
    let strict = std::env::var("VD_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: Vec<(u32, &str, Duration, fn() -> Outcome)> = vec![
        (1, "fractional calculus power maps", Duration::from_secs(10), c1_frac),
        (2, "Feller non-uniqueness", Duration::from_secs(5), c2_feller),
        (3, "Cameron-Martin equivalence", Duration::from_secs(60), c3_cameron_martin),
        (4, "rate round trips", Duration::from_secs(60), c4_round_trips),
        (5, "MDP exactness", Duration::from_secs(30), c5_mdp),
        (6, "Monte Carlo LDP slope", Duration::from_secs(600), c6_ldp_slope),
        (7, "Monte Carlo MDP slope", Duration::from_secs(600), c7_mdp_slope),
        (8, "importance sampling", Duration::from_secs(300), c8_importance_sampling),
        (9, "martingale and smile sanity", Duration::from_secs(1200), c9_martingale_smile),
        (10, "simulation invariants", Duration::from_secs(600), c10_simulation),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, budget, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let el = start.elapsed();
        let pass = o.pass && el <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {id:>2} ({name}): {} [{:.1} s, budget {} s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            el.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {failed} criterion/criteria failed");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
