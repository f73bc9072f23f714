use blockflow::analysis::{check_prop2, curvature_bruteforce, sliced_w2, w2_squared_1d, DiscreteJoint};
use blockflow::checkpoint;
use blockflow::prior::BlockPrior;
use blockflow::regularizers::{kl_diag_gauss, norm_value, NormKind, RegStrategy};
use blockflow::solvers::{euler_solve, rk45_solve, FnField};
use blockflow::velocity::{BlockFlowModel, NetConfig};
use proptest::prelude::*;

fn prior_strategy() -> impl Strategy<Value = BlockPrior> {
    (1usize..5, 1usize..4).prop_flat_map(|(k, d)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), k),
            prop::collection::vec(prop::collection::vec(-2.0..1.0f64, d), k),
            prop::collection::vec(0.05..1.0f64, k),
        )
            .prop_map(|(mu, ls, w)| {
                let s: f64 = w.iter().sum();
                BlockPrior::from_params(mu, ls, w.iter().map(|v| v / s).collect()).unwrap()
            })
    })
}

fn joint_strategy() -> impl Strategy<Value = DiscreteJoint> {
    (1usize..3, 1usize..7).prop_flat_map(|(d, n)| {
        (
            prop::collection::vec((prop::collection::vec(-2i32..=2, d), prop::collection::vec(-2i32..=2, d)), n),
            prop::collection::vec(0.05..1.0f64, n),
        )
            .prop_map(|(pts, w)| {
                let s: f64 = w.iter().sum();
                let support = pts
                    .into_iter()
                    .map(|(a, b)| (a.into_iter().map(f64::from).collect(), b.into_iter().map(f64::from).collect()))
                    .collect();
                DiscreteJoint::new(support, w.iter().map(|v| v / s).collect()).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn variance_split_is_consistent(p in prior_strategy()) {
        let r = p.variance_decomposition();
        prop_assert!(r.within > 0.0 && r.between >= 0.0);
        prop_assert!((r.total - r.within - r.between).abs() <= 1e-12 * r.total);
        prop_assert!((0.0..=1.0).contains(&r.ratio));
        let (mean, cov) = p.mixture_moments();
        prop_assert_eq!(&mean, &p.mixture_mean());
        let trace: f64 = (0..mean.len()).map(|i| cov[i][i]).sum();
        prop_assert!((trace / mean.len() as f64 - r.total).abs() <= 1e-9 * r.total.max(1.0));
        for (i, row) in cov.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                prop_assert_eq!(*v, cov[j][i]);
            }
        }
    }

    #[test]
    fn curvature_bound_holds(j in joint_strategy()) {
        let c = check_prop2(&j).unwrap();
        prop_assert!(c.v >= 0.0);
        prop_assert!(c.holds);
        prop_assert!(c.v <= j.var_displacement() + 1e-9);
    }

    #[test]
    fn curvature_is_grid_mean(j in joint_strategy(), n in 1usize..40) {
        let r = curvature_bruteforce(&j, n).unwrap();
        prop_assert_eq!(r.per_t.len(), n);
        prop_assert!(r.per_t.iter().all(|p| p.1 >= 0.0 && p.0 > 0.0 && p.0 < 1.0));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(
        m1 in prop::collection::vec(-3.0..3.0f64, 3),
        l1 in prop::collection::vec(-2.0..2.0f64, 3),
        m2 in prop::collection::vec(-3.0..3.0f64, 3),
        l2 in prop::collection::vec(-2.0..2.0f64, 3),
    ) {
        prop_assert!(kl_diag_gauss(&m1, &l1, &m2, &l2).unwrap() >= 0.0);
        prop_assert!(kl_diag_gauss(&m1, &l1, &m1, &l1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn norms_are_ordered(v in prop::collection::vec(-5.0..5.0f64, 1..8)) {
        let (l1, l2, li) = (norm_value(&v, NormKind::L1), norm_value(&v, NormKind::L2), norm_value(&v, NormKind::Linf));
        prop_assert!(li <= l2 + 1e-12 && l2 <= l1 + 1e-12);
    }

    #[test]
    fn w2_is_a_symmetric_shift_metric(a in prop::collection::vec(-5.0..5.0f64, 1..30), shift in -3.0..3.0f64) {
        let mut b: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let mut a2 = a.clone();
        let w = w2_squared_1d(&mut a2, &mut b);
        prop_assert!((w - shift * shift).abs() < 1e-9);
        prop_assert!(sliced_w2(&a, &a, 1, 4, 0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn solvers_integrate_linear_fields_exactly(x0 in prop::collection::vec(-3.0..3.0f64, 2), a in -2.0..2.0f64, n in 1usize..50) {
        // v = a·t + c gives x(1) = x0 + a/2 + c; Euler's left-point rule falls short by a/(2n)
        let c = 0.7;
        let f = FnField { dim: 2, f: move |t: f64, _x: &[f64]| vec![a * t + c; 2] };
        let r = rk45_solve(&f, &x0, 0.0, 1.0, 1e-9, 1e-9, 1000, false).unwrap();
        for (got, start) in r.x.iter().zip(&x0) {
            prop_assert!((got - (start + a / 2.0 + c)).abs() < 1e-12);
        }
        let e = euler_solve(&f, &x0, 0.0, 1.0, n, false).unwrap();
        prop_assert_eq!(e.nfe, n);
        for (got, start) in e.x.iter().zip(&x0) {
            prop_assert!((got - (start + a / 2.0 - a / (2.0 * n as f64) + c)).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip_is_byte_stable(seed in 0u64..1000, kind in 0usize..4, d in 1usize..4) {
        let strategy = [
            RegStrategy::fanr(0.5, NormKind::L2).unwrap(),
            RegStrategy::fabr(1.0).unwrap(),
            RegStrategy::hacbr(2.0).unwrap(),
            RegStrategy::habr(1.0, 0.3).unwrap(),
        ][kind];
        let net = NetConfig { hidden: vec![5, 3], time_features: 4, label_conditioning: seed % 2 == 0, encoder_hidden: vec![3] };
        let m = BlockFlowModel::new(d, vec![0.25, 0.75], &net, strategy, seed).unwrap();
        let bytes = checkpoint::to_bytes(&m, serde_json::json!({"seed": seed})).unwrap();
        let (back, echo) = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(echo["seed"].as_u64(), Some(seed));
        prop_assert_eq!(checkpoint::to_bytes(&back, echo).unwrap(), bytes);
    }
}
