use blockflow::analysis::curvature_network;
use blockflow::datasets::{gen_two_blocks, LabeledDataset};
use blockflow::ndnum::{adam_step, AdamConfig, AdamState, Graph};
use blockflow::prior::BlockPrior;
use blockflow::regularizers::{kl_graph, reg_fabr, reg_habr, NormKind, RegStrategy};
use blockflow::solvers::{euler_solve, rk45_solve, sample, NetField, SolverConfig};
use blockflow::velocity::{train, BlockFlowModel, NetConfig, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn net(hidden: Vec<usize>) -> NetConfig {
    NetConfig {
        hidden,
        time_features: 16,
        label_conditioning: true,
        encoder_hidden: vec![16],
    }
}

fn train_cfg(steps: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 128,
        lr,
        seed,
        log_every: 100,
        freeze_prior: false,
    }
}

fn two_blocks() -> LabeledDataset {
    gen_two_blocks(1000, [[-3.0, 0.0], [3.0, 0.0]], 0.3, 0).unwrap()
}

#[test]
fn dirac_toy_is_straight_and_exact() {
    let point = [1.5, -0.5];
    let data = LabeledDataset::new("one-point", 2, point.to_vec(), vec![0], 1).unwrap();
    let mut model = BlockFlowModel::new(2, vec![1.0], &net(vec![32, 32]), RegStrategy::fabr(0.0).unwrap(), 1).unwrap();
    // Dirac-like prior at the log-scale floor, kept fixed
    model.prior = BlockPrior::from_params(vec![vec![-1.0, 2.0]], vec![vec![-50.0, -50.0]], vec![1.0]).unwrap();
    let mut cfg = train_cfg(3000, 3e-3, 2);
    cfg.freeze_prior = true;
    cfg.batch = 32;
    train(&data, &mut model, &cfg).unwrap();
    // anneal so Adam's step noise settles below the tolerance
    let mut last = f64::INFINITY;
    for lr in [1e-3, 3e-4, 1e-4, 3e-5, 3e-5] {
        cfg.lr = lr;
        last = train(&data, &mut model, &cfg).unwrap().last().unwrap().data;
    }
    assert!(last < 1e-6, "data term {last}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = sample(&model, &SolverConfig::Euler { n_steps: 20 }, 50, None, false, &mut rng).unwrap();
    let worst = out
        .samples
        .iter()
        .map(|s| s.x.iter().zip(point).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "worst deviation {worst}");
    let v = curvature_network(&model, 500, 20, 4).unwrap().v_estimate;
    assert!(v < 1e-4, "curvature {v}");
}

#[test]
fn euler_and_rk45_agree_on_trained_toy() {
    let data = two_blocks();
    let mut model = BlockFlowModel::new(2, data.label_frequencies(), &net(vec![64, 64]), RegStrategy::fabr(1.0).unwrap(), 5).unwrap();
    train(&data, &mut model, &train_cfg(2000, 2e-3, 5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..40 {
        let y = i % 2;
        let start = model.prior.sample_prior(y, &mut rng).unwrap();
        let field = NetField {
            net: &model.net,
            label: Some(y),
        };
        let e = euler_solve(&field, &start, 0.0, 1.0, 128, false).unwrap();
        let r = rk45_solve(&field, &start, 0.0, 1.0, 1e-6, 1e-6, 10_000, false).unwrap();
        let gap = e.x.iter().zip(&r.x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(gap < 1e-2, "sample {i}: gap {gap}");
        assert!(r.nfe >= r.accepted);
    }
}

#[test]
fn fixed_label_lands_in_its_block() {
    let data = two_blocks();
    let mut model = BlockFlowModel::new(2, data.label_frequencies(), &net(vec![64, 64]), RegStrategy::fabr(1.0).unwrap(), 7).unwrap();
    train(&data, &mut model, &train_cfg(2000, 2e-3, 7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (y, sign) in [(0usize, -1.0), (1, 1.0)] {
        let out = sample(&model, &SolverConfig::Euler { n_steps: 8 }, 500, Some(y), false, &mut rng).unwrap();
        assert_eq!(out.mean_nfe, 8.0);
        let hits = out.samples.iter().filter(|s| s.x[0] * sign > 0.0).count();
        assert!(hits as f64 >= 0.99 * 500.0, "label {y}: {hits}/500");
    }
}

/// Irreducible data term for Gaussian blocks of per-coordinate variance `a` under the learned prior:
/// per coordinate `Var(x0 - z | x_t, y) = ab / (t²a + (1-t)²b)`, which integrates over t to `(π/2)·sqrt(ab)`.
fn gaussian_floor(model: &BlockFlowModel, a: f64) -> f64 {
    let w = model.prior.label_weights();
    (0..w.len())
        .map(|y| w[y] * model.prior.log_sigma_of(y).iter().map(|l| std::f64::consts::FRAC_PI_2 * (a * (2.0 * l).exp()).sqrt()).sum::<f64>())
        .sum()
}

#[test]
fn data_term_falls_fivefold_over_long_run() {
    let data = two_blocks();
    let mut model = BlockFlowModel::new(2, data.label_frequencies(), &net(vec![64, 64]), RegStrategy::fabr(1.0).unwrap(), 0).unwrap();
    // a slow rate keeps step 100 well above the floor; at lr 1e-3 the drop is nearer 3x
    let cfg = TrainConfig {
        steps: 20_000,
        batch: 256,
        lr: 1e-4,
        seed: 0,
        log_every: 100,
        freeze_prior: false,
    };
    let trace = train(&data, &mut model, &cfg).unwrap();
    let at100 = trace.iter().find(|r| r.step == 100).unwrap().data;
    let last = trace.last().unwrap().data;
    assert!(last * 5.0 <= at100, "step 100: {at100}, final: {last}");

    let floor = gaussian_floor(&model, 0.09);
    let tail = trace.iter().rev().take(20).map(|r| r.data).sum::<f64>() / 20.0;
    assert!(tail > 0.9 * floor && tail < 1.2 * floor, "tail {tail}, floor {floor}");
}

#[test]
fn loss_decomposes_at_every_logged_step() {
    let data = two_blocks();
    for s in [
        RegStrategy::fanr(0.3, NormKind::L2).unwrap(),
        RegStrategy::hacbr(2.0).unwrap(),
        RegStrategy::habr(0.5, 0.5).unwrap(),
    ] {
        let mut model = BlockFlowModel::new(2, data.label_frequencies(), &net(vec![16]), s, 1).unwrap();
        let mut cfg = train_cfg(200, 1e-3, 1);
        cfg.log_every = 7;
        let trace = train(&data, &mut model, &cfg).unwrap();
        assert_eq!(trace.len(), 29);
        for r in trace {
            assert!((r.total - (r.data + s.beta * r.reg)).abs() <= 1e-12 * r.total.abs().max(1.0));
        }
    }
}

#[test]
fn same_seed_same_trace() {
    let data = two_blocks();
    let run = || {
        let mut m = BlockFlowModel::new(2, data.label_frequencies(), &net(vec![16]), RegStrategy::habr(1.0, 0.5).unwrap(), 3).unwrap();
        train(&data, &mut m, &train_cfg(150, 1e-3, 3)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn fabr_alone_drives_prior_to_standard_normal() {
    let mut p = BlockPrior::from_params(vec![vec![1.5, -2.0], vec![0.3, 0.7]], vec![vec![0.8, -1.2], vec![-0.4, 0.2]], vec![0.5, 0.5]).unwrap();
    p.set_trainable(true);
    let cfg = AdamConfig::with_lr(0.05);
    let mut state = AdamState::new(&p.params_mut());
    for _ in 0..3000 {
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let kl = kl_graph(&mut g, vars.mu, Some(vars.log_sigma), None, None).unwrap();
        let loss = g.scale(kl, 2.0).unwrap();
        let grads = g.backward(loss).unwrap();
        p.absorb(&grads, vars).unwrap();
        adam_step(&mut p.params_mut(), &mut state, &cfg).unwrap();
    }
    for y in 0..2 {
        assert!(reg_fabr(&p, y).unwrap() < 1e-6);
        assert!(p.mu_of(y).iter().chain(p.log_sigma_of(y)).all(|v| v.abs() < 2e-3));
    }
}

#[test]
fn habr_dropped_x_equals_fabr_of_label_path() {
    let data = two_blocks();
    let mut model = BlockFlowModel::new(2, data.label_frequencies(), &net(vec![16]), RegStrategy::habr(1.0, 0.5).unwrap(), 2).unwrap();
    train(&data, &mut model, &train_cfg(300, 1e-2, 2)).unwrap();
    let enc = model.encoder.as_ref().unwrap();
    let label_prior = enc.label_prior(model.prior.label_weights().to_vec()).unwrap();
    for y in 0..2 {
        let (m, l) = enc.encode_hybrid(&[9.0, -9.0], y, true).unwrap();
        let a = reg_habr(&m, &l).unwrap();
        assert!((a - reg_fabr(&label_prior, y).unwrap()).abs() < 1e-14);
        // the sampling prior is that label path
        assert!((a - reg_fabr(&model.prior, y).unwrap()).abs() < 1e-14);
    }
}

#[test]
fn zero_samples_cost_nothing() {
    let model = BlockFlowModel::new(2, vec![0.5, 0.5], &net(vec![4]), RegStrategy::fabr(1.0).unwrap(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for cfg in [SolverConfig::Euler { n_steps: 8 }, SolverConfig::Rk45 { atol: 1e-5, rtol: 1e-5, max_steps: 100 }] {
        let out = sample(&model, &cfg, 0, None, false, &mut rng).unwrap();
        assert!(out.samples.is_empty());
        assert_eq!(out.mean_nfe, 0.0);
    }
}
