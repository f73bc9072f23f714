//! Oracles shared by the integration suites. Nothing here calls the code it checks
//! except to read parameters or rebuild a loss.
#![allow(dead_code, clippy::needless_range_loop)]

use blockflow::analysis::DiscreteJoint;
use blockflow::ndnum::{Graph, Tensor, Var};
use blockflow::velocity::{fm_loss_with, BlockFlowModel, LossDraws};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a floor so that two vanishing values compare as equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference check of a scalar graph function of `inputs`.
/// Returns the worst relative error over every input coordinate.
pub fn check_graph<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> blockflow::Result<Var>,
{
    let eval = |ts: &[Tensor]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars).expect("forward");
        let out = if g.value(out).len() == 1 { out } else { g.sum(out).unwrap() };
        (g, vars, out)
    };
    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().tracked()).collect();
    let (g, vars, out) = eval(&tracked);
    let grads = g.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let an = grads.wrt(vars[k]).expect("tracked input").to_vec();
        for j in 0..t.numel() {
            let bump = |delta: f64| {
                let mut ts = inputs.to_vec();
                ts[k].data_mut()[j] += delta;
                let (g, _, out) = eval(&ts);
                g.item(out)
            };
            let num = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(an[j], num));
        }
    }
    worst
}

fn params(model: &mut BlockFlowModel) -> Vec<&mut Tensor> {
    let mut out = model.net.mlp.params_mut();
    out.extend(model.prior.params_mut());
    if let Some(enc) = model.encoder.as_mut() {
        out.extend(enc.mlp.params_mut());
    }
    out
}

/// Finite-difference check of the total batch loss against `backward_into`, over
/// up to `per_tensor` coordinates of every parameter tensor. Returns
/// `(worst relative error, number of coordinates checked)`.
pub fn check_model_loss(model: &BlockFlowModel, x0: &[f64], labels: &[usize], draws: &LossDraws, per_tensor: usize) -> (f64, usize) {
    let mut m = model.clone();
    m.prior.set_trainable(true);
    for p in params(&mut m) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    let lg = fm_loss_with(&m, x0, labels, draws).expect("loss");
    lg.backward_into(&mut m).expect("backward");
    let analytic: Vec<Vec<f64>> = params(&mut m)
        .iter()
        // parameters outside the loss graph get no gradient; the numeric side must then be 0
        .map(|p| p.grad().map_or_else(|| vec![0.0; p.numel()], |g| g.to_vec()))
        .collect();

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, an) in analytic.iter().enumerate() {
        let n = an.len();
        let stride = n.div_ceil(per_tensor).max(1);
        for j in (0..n).step_by(stride) {
            let bump = |delta: f64| {
                let mut mm = m.clone();
                params(&mut mm)[k].data_mut()[j] += delta;
                fm_loss_with(&mm, x0, labels, draws).expect("loss").loss.total
            };
            let num = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(an[j], num));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Uniform random values in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Small-integer point, so interpolants of different pairs coincide often.
fn lattice_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-2i32..=2) as f64).collect()
}

/// Arbitrary coupling on at most `max_support` pairs in dimension 1 to 3.
pub fn random_joint(rng: &mut ChaCha8Rng, max_support: usize) -> DiscreteJoint {
    let d = rng.random_range(1..=3);
    let n = rng.random_range(1..=max_support);
    let support = (0..n)
        .map(|_| (lattice_point(rng, d), lattice_point(rng, d)))
        .collect();
    DiscreteJoint::new(support, probs(rng, n)).unwrap()
}

/// Product of two random marginals, each on 1 to 3 points.
pub fn random_product_joint(rng: &mut ChaCha8Rng) -> DiscreteJoint {
    let d = rng.random_range(1..=3);
    let m0: Vec<(Vec<f64>, f64)> = {
        let n = rng.random_range(1..=3);
        let p = probs(rng, n);
        (0..n).map(|i| (lattice_point(rng, d), p[i])).collect()
    };
    let m1: Vec<(Vec<f64>, f64)> = {
        let n = rng.random_range(1..=3);
        let p = probs(rng, n);
        (0..n).map(|i| (lattice_point(rng, d), p[i])).collect()
    };
    DiscreteJoint::independent(&m0, &m1).unwrap()
}

/// Generic finite `x0` support paired with a single target point.
pub fn random_dirac_joint(rng: &mut ChaCha8Rng) -> DiscreteJoint {
    let d = rng.random_range(1..=3);
    let n = rng.random_range(1..=10);
    let c = uniform(rng, d, -3.0, 3.0);
    let support = (0..n).map(|_| (uniform(rng, d, -3.0, 3.0), c.clone())).collect();
    DiscreteJoint::new(support, probs(rng, n)).unwrap()
}

/// Curvature by a direct double loop: for every grid time and every pair, the
/// conditional mean displacement is the probability-weighted average over all
/// pairs whose interpolant lies within `1e-9` (max-norm).
pub fn curvature_double_loop(support: &[(Vec<f64>, Vec<f64>)], probs: &[f64], grid: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..grid {
        let t = (k as f64 + 0.5) / grid as f64;
        let xt = |i: usize| -> Vec<f64> {
            let (a, b) = &support[i];
            a.iter().zip(b).map(|(x0, x1)| t * x1 + (1.0 - t) * x0).collect()
        };
        let disp = |i: usize| -> Vec<f64> {
            let (a, b) = &support[i];
            b.iter().zip(a).map(|(x1, x0)| x1 - x0).collect()
        };
        let mut integrand = 0.0;
        for i in 0..support.len() {
            let xi = xt(i);
            let d = xi.len();
            let mut mass = 0.0;
            let mut cm = vec![0.0; d];
            for j in 0..support.len() {
                let xj = xt(j);
                if xi.iter().zip(&xj).all(|(a, b)| (a - b).abs() <= 1e-9) {
                    mass += probs[j];
                    for (c, v) in cm.iter_mut().zip(disp(j)) {
                        *c += probs[j] * v;
                    }
                }
            }
            let di = disp(i);
            integrand += probs[i] * (0..d).map(|q| (di[q] - cm[q] / mass).powi(2)).sum::<f64>();
        }
        total += integrand;
    }
    total / grid as f64
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::new(shape.to_vec(), uniform(rng, shape.iter().product(), lo, hi)).unwrap()
}

/// Values in `[0.3, 1.5)` with random sign: away from kinks of `abs`, `relu` and `max`.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|i| {
            // distinct magnitudes keep max_last away from ties
            let m = 0.3 + 1.2 * (i as f64 + rng.random_range(0.1..0.9)) / n as f64;
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn small_net(label_conditioning: bool) -> blockflow::velocity::NetConfig {
    blockflow::velocity::NetConfig {
        hidden: vec![6, 5],
        time_features: 4,
        label_conditioning,
        encoder_hidden: vec![5],
    }
}

/// Model with every parameter group randomized away from initialization.
pub fn perturbed_model(strategy: blockflow::regularizers::RegStrategy, seed: u64) -> BlockFlowModel {
    use rand::SeedableRng;
    let mut m = BlockFlowModel::new(3, vec![0.2, 0.5, 0.3], &small_net(true), strategy, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for v in m.prior.mu.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for v in m.prior.log_sigma.data_mut() {
        *v = rng.random_range(-0.7..0.5);
    }
    if let Some(enc) = m.encoder.as_mut() {
        // the zero-initialized head would hide every upstream encoder gradient
        let (w, b) = enc.mlp.layers.last_mut().unwrap();
        for v in w.data_mut().iter_mut().chain(b.data_mut()) {
            *v = rng.random_range(-0.4..0.4);
        }
    }
    m
}

/// Every differentiable building block with its worst relative finite-difference error.
pub fn gradient_suite() -> Vec<(String, f64)> {
    use blockflow::regularizers::{kl_graph, norm_graph, NormKind, RegStrategy};
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, v: f64| out.push((name.to_string(), v));

    let a = tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = tensor(&mut rng, &[4, 2], -1.0, 1.0);
    push("matmul", check_graph(&[a.clone(), b], |g, v| g.matmul(v[0], v[1])));
    let row = tensor(&mut rng, &[4], -1.0, 1.0);
    let a2 = tensor(&mut rng, &[3, 4], -1.0, 1.0);
    push("add (broadcast)", check_graph(&[a.clone(), row.clone()], |g, v| g.add(v[0], v[1])));
    push("sub", check_graph(&[a.clone(), a2.clone()], |g, v| g.sub(v[0], v[1])));
    push("mul (broadcast)", check_graph(&[a.clone(), row], |g, v| {
        let p = g.mul(v[0], v[1])?;
        g.square(p)
    }));
    push("scale, add_scalar", check_graph(std::slice::from_ref(&a), |g, v| {
        let s = g.scale(v[0], -1.7)?;
        let s = g.add_scalar(s, 0.4)?;
        g.square(s)
    }));
    push("exp", check_graph(std::slice::from_ref(&a), |g, v| g.exp(v[0])));
    let pos = tensor(&mut rng, &[3, 4], 0.2, 2.0);
    push("log", check_graph(std::slice::from_ref(&pos), |g, v| g.log(v[0])));
    push("sqrt", check_graph(&[pos], |g, v| g.sqrt(v[0])));
    push("square", check_graph(std::slice::from_ref(&a), |g, v| g.square(v[0])));
    let k = off_kink(&mut rng, &[3, 4]);
    push("abs", check_graph(std::slice::from_ref(&k), |g, v| g.abs(v[0])));
    push("relu", check_graph(std::slice::from_ref(&k), |g, v| g.relu(v[0])));
    push("silu", check_graph(std::slice::from_ref(&a), |g, v| g.silu(v[0])));
    push("clamp", check_graph(std::slice::from_ref(&k), |g, v| g.clamp(v[0], -0.9, 0.9)));
    push("sum_last", check_graph(std::slice::from_ref(&a), |g, v| {
        let s = g.sum_last(v[0])?;
        g.square(s)
    }));
    push("max_last", check_graph(std::slice::from_ref(&k), |g, v| {
        let m = g.max_last(v[0])?;
        g.square(m)
    }));
    push("concat_last", check_graph(&[a.clone(), a2], |g, v| {
        let c = g.concat_last(&[v[0], v[1]])?;
        let s = g.square(c)?;
        g.sum_last(s)
    }));

    // multilayer perceptron against its parameters and input
    let mlp = blockflow::ndnum::Mlp::new(&[3, 5, 4, 2], blockflow::ndnum::Activation::Silu, &mut rng).unwrap();
    let x = tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let mut inputs = vec![x];
    for (w, b) in &mlp.layers {
        inputs.push(w.clone());
        inputs.push(b.clone());
    }
    push("mlp", check_graph(&inputs, |g, v| {
        let mut h = v[0];
        let layers = (v.len() - 1) / 2;
        for i in 0..layers {
            let z = g.matmul(h, v[1 + 2 * i])?;
            h = g.add(z, v[2 + 2 * i])?;
            if i + 1 < layers {
                h = g.silu(h)?;
            }
        }
        g.square(h)
    }));

    // regularizer primitives
    let m1 = tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let l1 = tensor(&mut rng, &[2, 3], -0.8, 0.8);
    let m2 = tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let l2 = tensor(&mut rng, &[2, 3], -0.8, 0.8);
    push("kl (full)", check_graph(&[m1.clone(), l1.clone(), m2.clone(), l2.clone()], |g, v| {
        kl_graph(g, v[0], Some(v[1]), Some(v[2]), Some(v[3]))
    }));
    push("kl to standard normal", check_graph(&[m1.clone(), l1], |g, v| kl_graph(g, v[0], Some(v[1]), None, None)));
    push("kl unit-variance hybrid", check_graph(&[m1, m2, l2], |g, v| kl_graph(g, v[0], None, Some(v[1]), Some(v[2]))));
    for norm in [NormKind::L1, NormKind::L2, NormKind::Linf] {
        push(&format!("norm {norm:?}"), check_graph(std::slice::from_ref(&k), |g, v| norm_graph(g, v[0], norm)));
    }

    // reparameterized draw z = mu + exp(log_sigma) * eps
    let mu = tensor(&mut rng, &[3, 2], -1.0, 1.0);
    let ls = tensor(&mut rng, &[3, 2], -0.5, 0.5);
    let eps = uniform(&mut rng, 6, -2.0, 2.0);
    push("reparameterized sample", check_graph(&[mu, ls], |g, v| {
        let e = g.constant(vec![3, 2], eps.clone())?;
        let s = g.exp(v[1])?;
        let n = g.mul(s, e)?;
        let z = g.add(v[0], n)?;
        g.square(z)
    }));

    // full training loss w.r.t. net, prior table and encoder, per strategy
    let strategies = [
        ("loss fanr-l1", RegStrategy::fanr(0.7, NormKind::L1).unwrap()),
        ("loss fanr-l2", RegStrategy::fanr(0.7, NormKind::L2).unwrap()),
        ("loss fanr-linf", RegStrategy::fanr(0.7, NormKind::Linf).unwrap()),
        ("loss fabr", RegStrategy::fabr(0.7).unwrap()),
        ("loss hacbr", RegStrategy::hacbr(0.7).unwrap()),
        ("loss habr", RegStrategy::habr(0.7, 0.5).unwrap()),
    ];
    for (name, s) in strategies {
        let model = perturbed_model(s, 21);
        let labels = [0usize, 1, 2, 1, 0];
        let x0 = uniform(&mut rng, labels.len() * 3, -2.0, 2.0);
        let mut draws = LossDraws::sample(labels.len(), 3, 0.5, &mut rng);
        // at least one dropped and one kept row
        draws.drop_x[0] = true;
        draws.drop_x[1] = false;
        let (worst, n) = check_model_loss(&model, &x0, &labels, &draws, 12);
        assert!(n > 0);
        push(name, worst);
    }
    out
}
