//! Time- and label-conditioned velocity field, the block-matching loss, and the training loop.
//!
//! Time runs from the prior (`t = 0`) to the data (`t = 1`):
//! `x_t = t·x0 + (1 − t)·z_y`, and the regression target is `x0 − z_y`.

use crate::datasets::{BatchSampler, LabeledDataset};
use crate::error::{Error, Result};
use crate::ndnum::{adam_step, Activation, AdamConfig, AdamState, Graph, Mlp, MlpVars, Tensor, Var};
use crate::prior::{one_hot, BlockPrior, HybridEncoder, PriorVars};
use crate::regularizers::{kl_graph, norm_graph, RegStrategy, StrategyKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Highest angular frequency of the sinusoidal time embedding.
const TIME_MAX_FREQ: f64 = 100.0;
/// Slack allowed on `t ∈ [0, 1]` for solver round-off.
const T_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_time_features")]
    pub time_features: usize,
    #[serde(default = "default_true")]
    pub label_conditioning: bool,
    #[serde(default = "default_encoder_hidden")]
    pub encoder_hidden: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![256, 256, 256]
}
fn default_time_features() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_encoder_hidden() -> Vec<usize> {
    vec![64]
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            time_features: default_time_features(),
            label_conditioning: true,
            encoder_hidden: default_encoder_hidden(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Keeps the prior at its initial `N(0, I)` blocks (independent-coupling baseline).
    #[serde(default)]
    pub freeze_prior: bool,
}

fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-3
}
fn default_log_every() -> usize {
    100
}

/// Sinusoidal features `[sin(w_k t), cos(w_k t)]`, frequencies geometric in `[1, TIME_MAX_FREQ]`.
pub fn time_embedding(t: f64, features: usize) -> Vec<f64> {
    let half = features / 2;
    let mut out = Vec::with_capacity(features);
    for k in 0..half {
        let w = if half > 1 {
            (TIME_MAX_FREQ.ln() * k as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out.push((w * t).sin());
    }
    for k in 0..half {
        let w = if half > 1 {
            (TIME_MAX_FREQ.ln() * k as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out.push((w * t).cos());
    }
    if features % 2 == 1 {
        out.push(t);
    }
    out
}

/// `v(x_t, t[, y])`: an MLP over `[x_t | time features | one-hot y]`.
#[derive(Clone, Debug)]
pub struct VelocityNet {
    pub mlp: Mlp,
    pub dim: usize,
    pub num_labels: usize,
    pub time_features: usize,
    pub label_conditioning: bool,
}

impl VelocityNet {
    pub fn new<R: Rng + ?Sized>(dim: usize, num_labels: usize, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let label_in = if cfg.label_conditioning { num_labels } else { 0 };
        let mut sizes = vec![dim + cfg.time_features + label_in];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(dim);
        Ok(Self {
            mlp: Mlp::new(&sizes, Activation::Silu, rng)?,
            dim,
            num_labels,
            time_features: cfg.time_features,
            label_conditioning: cfg.label_conditioning,
        })
    }

    fn check_t(t: f64) -> Result<f64> {
        if !(-T_SLACK..=1.0 + T_SLACK).contains(&t) {
            return Err(Error::Argument(format!("time {t} outside [0, 1]")));
        }
        Ok(t.clamp(0.0, 1.0))
    }

    fn label_features(&self, y: Option<usize>) -> Result<Vec<f64>> {
        if !self.label_conditioning {
            return Ok(Vec::new());
        }
        match y {
            Some(y) if y < self.num_labels => Ok(one_hot(&[y], self.num_labels)),
            Some(y) => Err(Error::Argument(format!("label {y} outside [0, {})", self.num_labels))),
            None => Err(Error::Argument("label-conditioned field needs a label".into())),
        }
    }

    /// Field value at one point.
    pub fn eval_v(&self, x: &[f64], t: f64, y: Option<usize>) -> Result<Vec<f64>> {
        self.eval_batch(x, &[t], &[y])
    }

    /// Field values for stacked points `xs` (`ts.len()` rows).
    pub fn eval_batch(&self, xs: &[f64], ts: &[f64], ys: &[Option<usize>]) -> Result<Vec<f64>> {
        let n = ts.len();
        if xs.len() != n * self.dim || ys.len() != n {
            return Err(Error::Dimension {
                op: "eval_v",
                lhs: vec![n, self.dim],
                rhs: vec![xs.len(), ys.len()],
            });
        }
        let width = self.mlp.input_dim();
        let mut input = Vec::with_capacity(n * width);
        for i in 0..n {
            let t = Self::check_t(ts[i])?;
            input.extend_from_slice(&xs[i * self.dim..(i + 1) * self.dim]);
            input.extend(time_embedding(t, self.time_features));
            input.extend(self.label_features(ys[i])?);
        }
        let out = self.mlp.infer(&input, n);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("velocity field".into()));
        }
        Ok(out)
    }

    /// Graph forward over `x_t` (`[B × d]`) with per-row times and labels.
    pub fn forward_graph(&self, g: &mut Graph, vars: &MlpVars, x_t: Var, ts: &[f64], labels: &[usize]) -> Result<Var> {
        let b = ts.len();
        let temb: Vec<f64> = ts.iter().flat_map(|&t| time_embedding(t, self.time_features)).collect();
        let mut parts = vec![x_t];
        if self.time_features > 0 {
            parts.push(g.constant(vec![b, self.time_features], temb)?);
        }
        if self.label_conditioning {
            parts.push(g.constant(vec![b, self.num_labels], one_hot(labels, self.num_labels))?);
        }
        let input = if parts.len() == 1 { x_t } else { g.concat_last(&parts)? };
        self.mlp.forward(g, vars, input)
    }
}

/// Velocity net, label prior, and (for the hybrid strategies) the `(x, y)` encoder.
#[derive(Clone, Debug)]
pub struct BlockFlowModel {
    pub net: VelocityNet,
    pub prior: BlockPrior,
    pub encoder: Option<HybridEncoder>,
    pub strategy: RegStrategy,
    pub net_config: NetConfig,
}

impl BlockFlowModel {
    pub fn new(dim: usize, label_weights: Vec<f64>, net_config: &NetConfig, strategy: RegStrategy, seed: u64) -> Result<Self> {
        let num_labels = label_weights.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = VelocityNet::new(dim, num_labels, net_config, &mut rng)?;
        let prior = BlockPrior::new(num_labels, dim, label_weights)?;
        let encoder = if strategy.uses_encoder() {
            let unit = strategy.kind == StrategyKind::Hacbr;
            Some(HybridEncoder::new(dim, num_labels, &net_config.encoder_hidden, unit, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            net,
            prior,
            encoder,
            strategy,
            net_config: net_config.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.net.dim
    }

    /// Rebuilds the label prior from the encoder's `x`-dropped path (HABR).
    pub fn sync_prior(&mut self) -> Result<()> {
        if self.strategy.kind == StrategyKind::Habr {
            if let Some(enc) = &self.encoder {
                let w = self.prior.label_weights().to_vec();
                let trainable = self.prior.mu.requires_grad();
                self.prior = enc.label_prior(w)?;
                self.prior.set_trainable(trainable);
            }
        }
        Ok(())
    }
}

/// Per-batch loss decomposition; `total == data + beta·reg`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FMBatchLoss {
    pub data: f64,
    pub reg: f64,
    pub total: f64,
}

/// Random quantities of one loss evaluation, kept apart so the loss is a pure function of them.
#[derive(Clone, Debug)]
pub struct LossDraws {
    pub t: Vec<f64>,
    /// `[B × d]` standard normal draws.
    pub eps: Vec<f64>,
    /// Rows whose `x` is hidden from the hybrid encoder.
    pub drop_x: Vec<bool>,
}

impl LossDraws {
    pub fn sample<R: Rng + ?Sized>(batch: usize, dim: usize, dropout_prob: f64, rng: &mut R) -> Self {
        let t = (0..batch).map(|_| rng.random::<f64>()).collect();
        let eps = (0..batch * dim).map(|_| StandardNormal.sample(rng)).collect();
        let drop_x = (0..batch).map(|_| rng.random::<f64>() < dropout_prob).collect();
        Self { t, eps, drop_x }
    }
}

/// A built loss graph plus the parameter bindings needed to route gradients back.
pub struct LossGraph {
    pub graph: Graph,
    pub total: Var,
    pub loss: FMBatchLoss,
    net_vars: MlpVars,
    prior_vars: Option<PriorVars>,
    enc_vars: Option<MlpVars>,
}

impl LossGraph {
    /// Backward pass; gradients are added into the model's parameter tensors.
    pub fn backward_into(&self, model: &mut BlockFlowModel) -> Result<()> {
        let grads = self.graph.backward(self.total)?;
        model.net.mlp.absorb(&grads, &self.net_vars)?;
        if let Some(pv) = self.prior_vars {
            model.prior.absorb(&grads, pv)?;
        }
        if let (Some(ev), Some(enc)) = (&self.enc_vars, model.encoder.as_mut()) {
            enc.mlp.absorb(&grads, ev)?;
        }
        Ok(())
    }
}

/// Builds the block-matching loss for a batch given fixed draws.
pub fn fm_loss_with(model: &BlockFlowModel, x0: &[f64], labels: &[usize], draws: &LossDraws) -> Result<LossGraph> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let d = model.dim();
    if x0.len() != b * d || draws.t.len() != b || draws.eps.len() != b * d {
        return Err(Error::Dimension {
            op: "fm_loss",
            lhs: vec![b, d],
            rhs: vec![x0.len(), draws.eps.len()],
        });
    }
    let l = model.prior.num_labels;
    let strategy = &model.strategy;
    let mut g = Graph::new();
    let net_vars = model.net.mlp.bind(&mut g);
    let onehot = g.constant(vec![b, l], one_hot(labels, l))?;
    let eps = g.constant(vec![b, d], draws.eps.clone())?;
    let x0v = g.constant(vec![b, d], x0.to_vec())?;
    let inv_b = 1.0 / b as f64;

    let mut prior_vars = None;
    let mut enc_vars = None;
    let (z, reg) = match strategy.kind {
        StrategyKind::Fanr | StrategyKind::Fabr => {
            let pv = model.prior.bind(&mut g);
            prior_vars = Some(pv);
            let (mu, ls) = model.prior.gather(&mut g, pv, onehot)?;
            let sigma = g.exp(ls)?;
            let noise = g.mul(sigma, eps)?;
            let z = g.add(mu, noise)?;
            let reg = if strategy.kind == StrategyKind::Fanr {
                norm_graph(&mut g, ls, strategy.norm.expect("fanr carries a norm"))?
            } else {
                let kl = kl_graph(&mut g, mu, Some(ls), None, None)?;
                g.scale(kl, inv_b)?
            };
            (z, reg)
        }
        StrategyKind::Hacbr | StrategyKind::Habr => {
            let enc = model
                .encoder
                .as_ref()
                .ok_or_else(|| Error::Contract("hybrid strategy without an encoder".into()))?;
            let ev = enc.bind(&mut g);
            let mut input = Vec::with_capacity(b * (d + l));
            for i in 0..b {
                let dropped = strategy.kind == StrategyKind::Habr && draws.drop_x[i];
                if dropped {
                    input.extend(std::iter::repeat_n(0.0, d));
                } else {
                    input.extend_from_slice(&x0[i * d..(i + 1) * d]);
                }
                input.extend(one_hot(&labels[i..=i], l));
            }
            let inp = g.constant(vec![b, d + l], input)?;
            let (mu_h, ls_h) = enc.encode_batch(&mut g, &ev, inp)?;
            enc_vars = Some(ev);
            let z = match ls_h {
                Some(ls) => {
                    let s = g.exp(ls)?;
                    let noise = g.mul(s, eps)?;
                    g.add(mu_h, noise)?
                }
                None => g.add(mu_h, eps)?,
            };
            let kl = if strategy.kind == StrategyKind::Hacbr {
                let pv = model.prior.bind(&mut g);
                prior_vars = Some(pv);
                let (mu_y, ls_y) = model.prior.gather(&mut g, pv, onehot)?;
                kl_graph(&mut g, mu_h, None, Some(mu_y), Some(ls_y))?
            } else {
                kl_graph(&mut g, mu_h, ls_h, None, None)?
            };
            (z, g.scale(kl, inv_b)?)
        }
    };

    let tmat: Vec<f64> = draws.t.iter().flat_map(|&t| std::iter::repeat_n(t, d)).collect();
    let data_part: Vec<f64> = x0.iter().zip(&tmat).map(|(x, t)| t * x).collect();
    let data_part = g.constant(vec![b, d], data_part)?;
    let one_minus = g.constant(vec![b, d], tmat.iter().map(|t| 1.0 - t).collect())?;
    let prior_part = g.mul(z, one_minus)?;
    let x_t = g.add(prior_part, data_part)?;

    let v = model.net.forward_graph(&mut g, &net_vars, x_t, &draws.t, labels)?;
    let target = g.sub(x0v, z)?;
    let diff = g.sub(target, v)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    let data = g.scale(s, inv_b)?;
    let weighted = g.scale(reg, strategy.beta)?;
    let total = g.add(data, weighted)?;

    let loss = FMBatchLoss {
        data: g.item(data),
        reg: g.item(reg),
        total: g.item(total),
    };
    Ok(LossGraph {
        graph: g,
        total,
        loss,
        net_vars,
        prior_vars,
        enc_vars,
    })
}

/// Draws `t`, `eps` and dropout masks from `rng` and builds the loss.
pub fn fm_loss<R: Rng + ?Sized>(model: &BlockFlowModel, x0: &[f64], labels: &[usize], rng: &mut R) -> Result<LossGraph> {
    let p = model.strategy.dropout_prob.unwrap_or(0.0);
    let draws = LossDraws::sample(labels.len(), model.dim(), p, rng);
    fm_loss_with(model, x0, labels, &draws)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub data: f64,
    pub reg: f64,
    pub total: f64,
}

/// Parameters the optimizer updates for this strategy.
fn trainable(model: &mut BlockFlowModel, freeze_prior: bool) -> Vec<&mut Tensor> {
    let kind = model.strategy.kind;
    let mut out = model.net.mlp.params_mut();
    if !freeze_prior && matches!(kind, StrategyKind::Fanr | StrategyKind::Fabr | StrategyKind::Hacbr) {
        out.extend(model.prior.params_mut());
    }
    if let Some(enc) = model.encoder.as_mut() {
        if !freeze_prior {
            out.extend(enc.mlp.params_mut());
        }
    }
    out
}

/// Adam training of the velocity net and the prior parameters.
pub fn train(dataset: &LabeledDataset, model: &mut BlockFlowModel, cfg: &TrainConfig) -> Result<Vec<TraceRow>> {
    if cfg.batch == 0 || cfg.log_every == 0 || !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Argument("batch and log_every must be positive, lr finite and >= 0".into()));
    }
    if dataset.dim != model.dim() || dataset.num_labels != model.prior.num_labels {
        return Err(Error::Argument("dataset does not match the model's dim/labels".into()));
    }
    model.prior.set_trainable(!cfg.freeze_prior);
    if let Some(enc) = model.encoder.as_mut() {
        for p in enc.mlp.params_mut() {
            p.set_requires_grad(!cfg.freeze_prior);
        }
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new(&trainable(model, cfg.freeze_prior));
    let mut sampler = BatchSampler::new(dataset.len(), cfg.batch, cfg.seed ^ 0x5eed_ba7c, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut trace = Vec::new();
    let d = dataset.dim;

    for step in 0..cfg.steps {
        let idx = sampler.next_batch();
        let mut x0 = Vec::with_capacity(idx.len() * d);
        idx.iter().for_each(|&i| x0.extend_from_slice(dataset.sample(i)));
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.label(i)).collect();

        let lg = match fm_loss(model, &x0, &labels, &mut rng) {
            Ok(lg) => lg,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Divergence {
                    step,
                    data: f64::NAN,
                    reg: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        let loss = lg.loss;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                step,
                data: loss.data,
                reg: loss.reg,
            });
        }
        if step % cfg.log_every == 0 {
            trace.push(TraceRow {
                step,
                data: loss.data,
                reg: loss.reg,
                total: loss.total,
            });
        }
        lg.backward_into(model)?;
        let mut params = trainable(model, cfg.freeze_prior);
        match adam_step(&mut params, &mut state, &adam) {
            Ok(()) => {}
            Err(Error::NonFinite(_)) => {
                return Err(Error::Divergence {
                    step,
                    data: loss.data,
                    reg: loss.reg,
                })
            }
            Err(e) => return Err(e),
        }
        model.prior.clamp_log_sigma();
    }
    model.sync_prior()?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizers::NormKind;

    fn small_cfg(cond: bool) -> NetConfig {
        NetConfig {
            hidden: vec![8, 8],
            time_features: 4,
            label_conditioning: cond,
            encoder_hidden: vec![6],
        }
    }

    #[test]
    fn zero_field_and_determinism() {
        let mut m = BlockFlowModel::new(2, vec![0.5, 0.5], &small_cfg(true), RegStrategy::fabr(1.0).unwrap(), 0).unwrap();
        let a = m.net.eval_v(&[0.3, -0.2], 0.4, Some(1)).unwrap();
        let b = m.net.eval_v(&[0.3, -0.2], 0.4, Some(1)).unwrap();
        assert_eq!(a, b);
        m.net.mlp.zero_output();
        assert_eq!(m.net.eval_v(&[5.0, 1.0], 0.9, Some(0)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn time_out_of_range() {
        let m = BlockFlowModel::new(2, vec![1.0], &small_cfg(true), RegStrategy::fabr(1.0).unwrap(), 0).unwrap();
        assert!(matches!(m.net.eval_v(&[0.0, 0.0], 1.5, Some(0)), Err(Error::Argument(_))));
        assert!(matches!(m.net.eval_v(&[0.0, 0.0], -0.1, Some(0)), Err(Error::Argument(_))));
    }

    #[test]
    fn unconditioned_field_ignores_label() {
        let m = BlockFlowModel::new(2, vec![0.5, 0.5], &small_cfg(false), RegStrategy::fabr(1.0).unwrap(), 4).unwrap();
        let a = m.net.eval_v(&[0.3, 0.1], 0.5, Some(0)).unwrap();
        let b = m.net.eval_v(&[0.3, 0.1], 0.5, Some(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_field_data_term() {
        let mut m = BlockFlowModel::new(2, vec![0.5, 0.5], &small_cfg(true), RegStrategy::fabr(0.0).unwrap(), 1).unwrap();
        m.net.mlp.zero_output();
        m.prior.mu.data_mut().copy_from_slice(&[0.5, -0.5, 1.0, 2.0]);
        let x0 = [1.0, 2.0, -3.0, 0.5];
        let labels = [0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = LossDraws::sample(2, 2, 0.0, &mut rng);
        let lg = fm_loss_with(&m, &x0, &labels, &draws).unwrap();
        let mut expect = 0.0;
        for i in 0..2 {
            for k in 0..2 {
                let z = m.prior.mu_of(labels[i])[k] + draws.eps[i * 2 + k];
                expect += (x0[i * 2 + k] - z).powi(2);
            }
        }
        expect /= 2.0;
        assert!((lg.loss.data - expect).abs() < 1e-12);
        assert!((lg.loss.total - lg.loss.data - 0.0 * lg.loss.reg).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        let m = BlockFlowModel::new(2, vec![1.0], &small_cfg(true), RegStrategy::fabr(1.0).unwrap(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(fm_loss(&m, &[], &[], &mut rng), Err(Error::Argument(_))));
    }

    #[test]
    fn every_strategy_builds_and_decomposes() {
        let strategies = [
            RegStrategy::fanr(0.7, NormKind::L1).unwrap(),
            RegStrategy::fabr(0.7).unwrap(),
            RegStrategy::hacbr(0.7).unwrap(),
            RegStrategy::habr(0.7, 0.5).unwrap(),
        ];
        for s in strategies {
            let m = BlockFlowModel::new(2, vec![0.5, 0.5], &small_cfg(true), s, 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let lg = fm_loss(&m, &[1.0, 0.0, -1.0, 0.5, 0.2, 0.2], &[0, 1, 1], &mut rng).unwrap();
            let l = lg.loss;
            assert!((l.total - (l.data + 0.7 * l.reg)).abs() < 1e-12, "{s:?}");
        }
    }

    #[test]
    fn lr_zero_keeps_parameters() {
        let ds = crate::datasets::gen_two_blocks(20, [[-3.0, 0.0], [3.0, 0.0]], 0.3, 0).unwrap();
        let mut m = BlockFlowModel::new(2, ds.label_frequencies(), &small_cfg(true), RegStrategy::fabr(1.0).unwrap(), 0).unwrap();
        let before = m.net.mlp.infer(&[0.1; 8], 1);
        let mu = m.prior.mu.data().to_vec();
        let cfg = TrainConfig {
            steps: 5,
            batch: 8,
            lr: 0.0,
            seed: 1,
            log_every: 1,
            freeze_prior: false,
        };
        let trace = train(&ds, &mut m, &cfg).unwrap();
        assert_eq!(trace.len(), 5);
        assert_eq!(m.net.mlp.infer(&[0.1; 8], 1), before);
        assert_eq!(m.prior.mu.data(), &mu[..]);
    }
}
