use proptest::prelude::*;
use vd_core::frac::{energy, rl_derivative_inverse, rl_integral, FracOrder};
use vd_core::grid::{GridFunction, TimeGrid};
use vd_core::iv::{bs_call, implied_vol};
use vd_core::kernels::KernelSpec;
use vd_core::models::{Dynamics, LimitKind, LimitModel, ModelSpec, ScalingRegime};
use vd_core::rate::{ldp_rate_pair, mdp_rate_pair, mdp_rate_terminal_x};
use vd_core::sim::{simulate, simulate_controlled, Control};
use vd_core::volterra::{solve_ldp_limit, BranchPolicy, ControlInterp, LimitProblem};

fn bergomi(h: f64, rho: f64, regime: ScalingRegime) -> ModelSpec {
    ModelSpec::new(Dynamics::RoughBergomi { a: 0.0, rho, y0: -2.0, hurst: h }, regime).unwrap()
}

fn stein(h: f64, rho: f64, regime: ScalingRegime) -> ModelSpec {
    ModelSpec::new(Dynamics::RoughSteinStein { kappa: 0.5, theta: 0.2, xi: 0.4, rho, y0: 0.2, hurst: h }, regime).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rl_integral_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, alpha in 0.05f64..1.0, w in 0.5f64..6.0) {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let f = GridFunction::from_fn(g, |t| (w * t).sin());
        let h = GridFunction::from_fn(g, |t| t * t - 0.3);
        let al = FracOrder::new(alpha).unwrap();
        let lhs = rl_integral(&f.scale(a).add_scaled(b, &h).unwrap(), al);
        let rhs = rl_integral(&f, al).scale(a).add_scaled(b, &rl_integral(&h, al)).unwrap();
        prop_assert!(lhs.sup_distance(&rhs, 0).unwrap() <= 1e-12 * (1.0 + a.abs() + b.abs()));
    }

    #[test]
    fn discrete_inverse_round_trips(alpha in 0.05f64..1.0, c in -2.0f64..2.0, p in 0.3f64..2.0) {
        let g = TimeGrid::new(1.5, 96).unwrap();
        let f = GridFunction::from_fn(g, |t| c * t.powf(p) + t.sin());
        let al = FracOrder::new(alpha).unwrap();
        let back = rl_integral(&rl_derivative_inverse(&f, al), al);
        prop_assert!(back.sup_distance(&f, 0).unwrap() < 1e-9);
    }

    #[test]
    fn energy_is_nonnegative_and_quadratic(c in -5.0f64..5.0, w in 0.0f64..10.0) {
        let g = TimeGrid::new(2.0, 50).unwrap();
        let v = GridFunction::from_fn_vec(g, 2, |t, o| { o[0] = (w * t).cos(); o[1] = t - 1.0; });
        let e = energy(&v);
        prop_assert!(e >= 0.0);
        prop_assert!((energy(&v.scale(c)) - c * c * e).abs() <= 1e-12 * (1.0 + c * c * e));
    }

    #[test]
    fn implied_vol_inverts_black_scholes(t in 0.01f64..3.0, k in -0.5f64..0.5, sigma in 0.05f64..1.5) {
        let price = bs_call(t, k, sigma);
        let intrinsic = (1.0 - k.exp()).max(0.0);
        prop_assume!(price - intrinsic > 1e-10 && 1.0 - price > 1e-10);
        let iv = implied_vol(price, t, k).unwrap();
        prop_assert!((bs_call(t, k, iv) - price).abs() < 1e-10);
    }

    #[test]
    fn call_price_is_monotone_and_convex(t in 0.05f64..2.0, k in -0.4f64..0.4, s1 in 0.05f64..1.0, ds in 0.01f64..0.5) {
        prop_assert!(bs_call(t, k, s1 + ds) > bs_call(t, k, s1));
        // convexity in the strike e^k
        let h = 0.01;
        let (a, b, c) = (bs_call(t, k - h, s1), bs_call(t, k, s1), bs_call(t, k + h, s1));
        let (ka, kb, kc) = ((k - h).exp(), k.exp(), (k + h).exp());
        let interp = a + (c - a) * (kb - ka) / (kc - ka);
        prop_assert!(b <= interp + 1e-13);
        prop_assert!(a >= b && b >= c);
    }

    #[test]
    fn rates_are_nonnegative(a in -1.0f64..1.0, b in -0.5f64..0.5, rho in -0.9f64..0.9, h in 0.05f64..0.5) {
        let g = TimeGrid::new(1.0, 128).unwrap();
        let phi = GridFunction::from_fn(g, |t| a * t);
        let vphi = GridFunction::from_fn(g, |t| -2.0 + b * t.powf(0.6));
        let m = bergomi(h, rho, ScalingRegime::SmallTimeLdp { eps: 0.1 });
        let r = ldp_rate_pair(&m, &phi, &vphi).unwrap();
        prop_assert!(r.value >= 0.0);
        let m = bergomi(h, rho, ScalingRegime::SmallTimeMdp { eps: 0.1, beta: h / 2.0 });
        let r = mdp_rate_pair(&m, &phi, &vphi).unwrap();
        prop_assert!(r.value >= 0.0);
    }

    #[test]
    fn mdp_rate_pair_is_exactly_quadratic(c in -3.0f64..3.0, rho in -0.9f64..0.9) {
        let g = TimeGrid::new(1.0, 128).unwrap();
        let m = stein(0.3, rho, ScalingRegime::SmallTimeMdp { eps: 0.1, beta: 0.1 });
        let phi = GridFunction::from_fn(g, |t| 0.4 * t - 0.1 * t * t);
        let vphi = GridFunction::from_fn(g, |t| 0.2 + 0.3 * t.powf(0.8));
        let base = mdp_rate_pair(&m, &phi, &vphi).unwrap().value;
        let scaled = mdp_rate_pair(&m, &phi.scale(c), &vphi.map(|y| 0.2 + c * (y - 0.2))).unwrap().value;
        prop_assert!((scaled - c * c * base).abs() <= 1e-10 * (1.0 + c * c * base));
        prop_assert!((mdp_rate_terminal_x(&m, c).unwrap() - c * c * mdp_rate_terminal_x(&m, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn recovered_controls_reproduce_the_path(a in -0.5f64..0.5, b in -0.3f64..0.3, rho in -0.8f64..0.8) {
        let g = TimeGrid::new(1.0, 256).unwrap();
        let m = bergomi(0.2, rho, ScalingRegime::SmallTimeLdp { eps: 0.1 });
        let phi = GridFunction::from_fn(g, |t| a * t + 0.1 * t * t);
        let vphi = GridFunction::from_fn(g, |t| -2.0 + b * t.powf(0.7));
        let r = ldp_rate_pair(&m, &phi, &vphi).unwrap();
        let lm = LimitModel::new(&m, LimitKind::Ldp, false);
        let sys = lm.system(g, BranchPolicy::ContinuePositive).unwrap();
        let p = LimitProblem { system: sys, control: r.optimal_control.clone().unwrap(), interp: ControlInterp::Linear };
        let out = solve_ldp_limit(&p).unwrap().path;
        prop_assert!(out.sup_distance(r.optimal_path.as_ref().unwrap(), 3).unwrap() < 1e-6);
    }

    #[test]
    fn kernel_homogeneity(h in 0.02f64..0.5, t in 0.01f64..5.0) {
        let k = KernelSpec::power_law(h).unwrap();
        for lam in [0.5, 2.0, 10.0] {
            let lhs = k.eval_conv(lam * t).unwrap();
            let rhs = lam.powf(h - 0.5) * k.eval_conv(t).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn simulation_is_seed_deterministic(seed in any::<u64>(), rho in -0.9f64..0.0) {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let m = bergomi(0.15, rho, ScalingRegime::SmallTimeLdp { eps: 0.3 });
        let a = simulate(&m, g, 20, seed).unwrap();
        let b = simulate(&m, g, 20, seed).unwrap();
        prop_assert_eq!(&a.paths, &b.paths);
        let c = simulate(&m, g, 20, seed.wrapping_add(1)).unwrap();
        prop_assert_ne!(&a.paths, &c.paths);
    }

    #[test]
    fn girsanov_weights_are_unbiased(shift in -1.0f64..1.0, seed in 0u64..1000) {
        // E_Q[e^{log w}] = 1 for any deterministic shift
        let g = TimeGrid::new(1.0, 16).unwrap();
        let m = bergomi(0.2, -0.3, ScalingRegime::SmallTimeLdp { eps: 0.5 });
        let v = Control::constant(g, &[0.3 * shift, shift]);
        let e = simulate_controlled(&m, &v, g, 20_000, seed).unwrap();
        let w: Vec<f64> = e.log_weights.unwrap().iter().map(|x| x.exp()).collect();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        prop_assert!((mean - 1.0).abs() <= 5.0 * sd, "mean {mean} sd {sd}");
    }
}
