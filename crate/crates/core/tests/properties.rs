mod common;

use ebm_sysid::dynamics::{integrate_euler, visible_field, visible_field_reduced, LearnedPsd, MetricField, Trajectory};
use ebm_sysid::energy::{activation, primitive_value, ConvexPrimitive};
use ebm_sysid::ident::{adamw_step, AdamConfig, Checkpoint, LrSchedule, OptimizerState};
use ebm_sysid::stability::{expansion_radius, ph_radius};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn primitive() -> impl Strategy<Value = ConvexPrimitive> {
    prop_oneof![
        Just(ConvexPrimitive::Quadratic),
        (0.2f64..3.0).prop_map(|beta| ConvexPrimitive::LogSumExp { beta }),
        (1.1f64..4.0).prop_map(|q| ConvexPrimitive::PowerNorm { q }),
        Just(ConvexPrimitive::LogCosh),
    ]
}

fn state(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reduced_field_matches_full(seed in any::<u64>(), x in state(3)) {
        let m = random_hybrid(&mut ChaCha8Rng::seed_from_u64(seed), 3, 12);
        let a = visible_field(&m, &x).unwrap();
        let b = visible_field_reduced(&m, &x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn recurrent_energy_never_increases(seed in any::<u64>(), p in primitive(), x in state(4)) {
        let m = random_recurrent(&mut ChaCha8Rng::seed_from_u64(seed), 4, p);
        let x: Vec<f64> = x.iter().map(|v| if v.abs() < 1e-6 { 1e-6 } else { *v }).collect();
        let g = m.energy_gradient(&x).unwrap();
        let f = m.field(&x).unwrap();
        let lie: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum();
        prop_assert!(lie <= 1e-10, "dE/dt = {lie}");
    }

    #[test]
    fn primitives_are_convex(p in primitive(), x in state(3), y in state(3), lam in 0.0f64..1.0) {
        let z: Vec<f64> = x.iter().zip(&y).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let fz = primitive_value(&p, &z).unwrap();
        let bound = lam * primitive_value(&p, &x).unwrap() + (1.0 - lam) * primitive_value(&p, &y).unwrap();
        prop_assert!(fz <= bound + 1e-9 * (1.0 + bound.abs()));
    }

    #[test]
    fn activation_is_monotone(p in primitive(), x in state(3), y in state(3)) {
        // gradient of a convex function: (∇F(x) − ∇F(y))·(x − y) ≥ 0
        let gx = activation(&p, &x).unwrap();
        let gy = activation(&p, &y).unwrap();
        let s: f64 = gx.iter().zip(&gy).zip(x.iter().zip(&y)).map(|((a, b), (u, v))| (a - b) * (u - v)).sum();
        prop_assert!(s >= -1e-12);
    }

    #[test]
    fn learned_metric_symmetric_part_above_floor(seed in any::<u64>(), x in state(2), v in state(2)) {
        let q = LearnedPsd::random(2, 8, 0.1, 8.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let m = MetricField::LearnedPsd(q).eval(&x).unwrap();
        let (lam_min, _) = bounds_2x2(&m);
        prop_assert!(lam_min >= 0.1 - 1e-12);
        let quad = v[0] * (m[[0, 0]] * v[0] + m[[0, 1]] * v[1]) + v[1] * (m[[1, 0]] * v[0] + m[[1, 1]] * v[1]);
        prop_assert!(quad >= 0.1 * (v[0] * v[0] + v[1] * v[1]) - 1e-9);
    }

    #[test]
    fn scaled_radius_is_ratio_times_radius(g in prop::collection::vec(0.0f64..10.0, 1..5), lo in 0.01f64..5.0, k in 1.0f64..100.0) {
        let r = expansion_radius(&g);
        prop_assert_eq!(ph_radius(r, lo, lo * k), (lo * k / lo) * r);
        prop_assert_eq!(ph_radius(r, 1.0, 1.0), r);
    }

    #[test]
    fn cosine_schedule_stays_in_range(base in 1e-5f64..1.0, e in 0usize..500, extra in 0usize..500) {
        let epochs = e + extra + 1;
        let lr = LrSchedule::Cosine.at(base, e, epochs);
        prop_assert!(lr >= 0.0 && lr <= base);
        prop_assert_eq!(LrSchedule::Constant.at(base, e, epochs), base);
    }

    #[test]
    fn adamw_zero_gradient_only_decays(p in prop::collection::vec(-3.0f64..3.0, 4), wd in 0.0f64..0.1, lr in 1e-4f64..0.1) {
        let mut params = vec![Array2::from_shape_vec((2, 2), p.clone()).unwrap()];
        let mut st = OptimizerState::zeros_like(&params);
        let cfg = AdamConfig { weight_decay: wd, ..AdamConfig::default() };
        adamw_step(&mut st, &mut params, &[Array2::zeros((2, 2))], &cfg, lr).unwrap();
        for (a, b) in params[0].iter().zip(&p) {
            prop_assert!((a - b * (1.0 - lr * wd)).abs() <= 1e-15 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn checkpoint_json_round_trip_is_exact(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_hybrid(&mut rng, 2, 8);
        let q = MetricField::LearnedPsd(LearnedPsd::random(2, 4, 0.1, 8.0, 1.0, &mut rng).unwrap());
        let sys = ebm_sysid::dynamics::PhSystem::new(m, q).unwrap();
        let s = Checkpoint::of(&sys, None).to_json();
        let back = Checkpoint::from_json(&s).unwrap().system().unwrap();
        prop_assert_eq!(&back.model, &sys.model);
        prop_assert_eq!(Checkpoint::of(&back, None).to_json(), s);
    }

    #[test]
    fn trajectory_csv_round_trip_is_exact(x0 in state(2), dt in 1e-3f64..0.05, steps in 1usize..40) {
        let t = integrate_euler(|x| Ok(vec![-x[0] + x[1].sin(), -0.5 * x[1]]), &x0, dt, steps).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }
}
