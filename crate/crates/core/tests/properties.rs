//! Property tests for the pathwise invariants of the simulation and shift
//! machinery.

use proptest::prelude::*;

use levy_bsde::chaos::{m_integral, Kernel1, MeasureSpec};
use levy_bsde::generator::{g_nu, GFunction};
use levy_bsde::grid::TimeGrid;
use levy_bsde::levy::{
    cameron_martin_shift, sample_paths, shift_path, CameronMartinDirection, JumpComponent,
    LevyModel,
};
use levy_bsde::oracles::gronwall_check;

fn test_model(gamma: f64, sigma: f64, intensity: f64) -> LevyModel {
    LevyModel::new(
        gamma,
        sigma,
        vec![JumpComponent::new(
            intensity,
            vec![(0.8, 0.5), (-0.6, 0.5)],
        )],
        1.0,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampling_is_reproducible(seed in 0u64..1000, n_steps in 1usize..12, n_paths in 1usize..16) {
        let model = test_model(0.2, 0.9, 1.4);
        let a = sample_paths(&model, n_steps, n_paths, seed).unwrap();
        let b = sample_paths(&model, n_steps, n_paths, seed).unwrap();
        for (p, q) in a.paths.iter().zip(&b.paths) {
            prop_assert_eq!(p, q);
        }
    }

    #[test]
    fn shift_commutes_with_grid_functionals(
        seed in 0u64..500,
        r in 0.0f64..1.0,
        v in prop::sample::select(vec![-1.5, -0.3, 0.4, 2.0]),
    ) {
        let model = test_model(0.0, 1.0, 1.2);
        let batch = sample_paths(&model, 10, 4, seed).unwrap();
        for path in &batch.paths {
            let shifted = shift_path(path, &batch.grid, r, v).unwrap();
            // external construction of values + v 1_{[r,T]}
            let external: Vec<f64> = batch
                .grid
                .times()
                .iter()
                .zip(&path.values)
                .map(|(&t, &x)| if t >= r { x + v } else { x })
                .collect();
            // functionals evaluated both ways
            let sup_ext = external.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((shifted.terminal() - external.last().unwrap()).abs() < 1e-12);
            prop_assert!((shifted.supremum() - sup_ext).abs() < 1e-12);
            let mean_ext: f64 = external.iter().sum::<f64>() / external.len() as f64;
            let mean_shift: f64 = shifted.values.iter().sum::<f64>() / shifted.values.len() as f64;
            prop_assert!((mean_shift - mean_ext).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_shifts_cancel(seed in 0u64..500, r in 0.0f64..1.0, v in 0.05f64..2.0) {
        let model = test_model(0.1, 0.7, 1.0);
        let batch = sample_paths(&model, 8, 2, seed).unwrap();
        for path in &batch.paths {
            let there = shift_path(path, &batch.grid, r, v).unwrap();
            let back = shift_path(&there, &batch.grid, r, -v).unwrap();
            for (a, b) in back.values.iter().zip(&path.values) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn lipschitz_bound_survives_jump_shifts(
        seed in 0u64..300,
        r in 0.0f64..1.0,
        v in prop::sample::select(vec![-2.0, -0.5, 0.7, 1.8]),
        y in -3.0f64..3.0,
        y_tilde in -3.0f64..3.0,
    ) {
        // driver y |-> sin(X_t + y): Lipschitz in y with L = 1 on every path,
        // and on every shifted path
        let model = test_model(0.0, 1.0, 1.5);
        let batch = sample_paths(&model, 8, 3, seed).unwrap();
        let l = 1.0;
        for path in &batch.paths {
            let shifted = shift_path(path, &batch.grid, r, v).unwrap();
            for (step, _) in shifted.values.iter().enumerate().take(8) {
                let f = |state: f64, arg: f64| (state + arg).sin();
                let diff = (f(shifted.values[step], y) - f(shifted.values[step], y_tilde)).abs();
                prop_assert!(diff <= l * (y - y_tilde).abs() + 1e-12);
            }
        }
    }

    #[test]
    fn cameron_martin_shift_is_brownian_only(
        seed in 0u64..500,
        u in -2.0f64..2.0,
        scale in 0.1f64..2.0,
    ) {
        let model = test_model(0.3, 1.2, 1.1);
        let batch = sample_paths(&model, 9, 3, seed).unwrap();
        let dir = CameronMartinDirection::from_fn(&batch.grid, |t| scale * (1.0 - t));
        for path in &batch.paths {
            let moved = cameron_martin_shift(path, &batch.grid, model.sigma, &dir, u).unwrap();
            prop_assert_eq!(&moved.jump_events, &path.jump_events);
            // terminal responds linearly: sigma * u * g_h(T)
            let gh_t = *dir.running_integral().last().unwrap();
            let expected = path.terminal() + model.sigma * u * gh_t;
            prop_assert!((moved.terminal() - expected).abs() < 1e-12);
            let back = cameron_martin_shift(&moved, &batch.grid, model.sigma, &dir, -u).unwrap();
            for (a, b) in back.values.iter().zip(&path.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn g_nu_is_linear_for_identity_g(
        u1 in -2.0f64..2.0,
        u2 in -2.0f64..2.0,
        a in -3.0f64..3.0,
    ) {
        let nodes = [(0.8, 1.3), (-0.6, 0.7)];
        let g = GFunction::Identity;
        let g1 = |_: f64| 1.0;
        let lhs = g_nu(&g, &g1, &nodes, &[a * u1, a * u2]).unwrap();
        let rhs = a * g_nu(&g, &g1, &nodes, &[u1, u2]).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn m_integral_is_invariant_under_dyadic_refinement(
        c0 in -2.0f64..2.0,
        c1 in -2.0f64..2.0,
        split in 1usize..7,
    ) {
        let model = test_model(0.0, 1.1, 1.0);
        let spec = MeasureSpec::from_model(&model);
        let coarse = TimeGrid::uniform(1.0, 8);
        let fine = TimeGrid::uniform(1.0, 16);
        let boundary = split as f64 / 8.0;
        let f = move |t: f64, x: f64| if t < boundary { c0 + x } else { c1 * x };
        let a = m_integral(&Kernel1::from_fn(&coarse, &spec, f), &spec).unwrap();
        let b = m_integral(&Kernel1::from_fn(&fine, &spec, f), &spec).unwrap();
        // identical up to float reassociation of the exact sums
        let tol = 1e-14 * (1.0 + a.quadratic.abs() + a.linear.abs());
        prop_assert!((a.linear - b.linear).abs() <= tol);
        prop_assert!((a.quadratic - b.quadratic).abs() <= tol);
    }

    #[test]
    fn gronwall_geometric_sequences_stay_below_twice_epsilon(
        epsilon in 1e-6f64..1.0,
        n in 4usize..64,
    ) {
        let mut gaps = vec![0.0];
        for k in 0..n {
            gaps.push(epsilon + 0.5 * gaps[k]);
        }
        let verdict = gronwall_check(&gaps, epsilon, &vec![0.0; n]).unwrap();
        prop_assert!(verdict.hypothesis_ok);
        prop_assert!(verdict.pass);
        prop_assert!(gaps.iter().all(|&g| g <= 2.0 * epsilon * (1.0 + 1e-12)));
    }
}
