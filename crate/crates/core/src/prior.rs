//! Label-conditioned Gaussian prior blocks and the optional hybrid `(x, y)` encoder.
//!
//! Each label `y` owns a diagonal Gaussian `N(mu_y, diag(sigma_y²))`. The
//! scale `sigma_y` multiplies a standard normal draw; moments and KL terms use
//! `sigma_y²` as the variance. Parameters are stored as an `L × d` table.

use crate::error::{Error, Result};
use crate::ndnum::{Activation, Gradients, Graph, Mlp, MlpVars, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 5.0;
/// Total prior variance below which the prior is reported as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct BlockPrior {
    pub num_labels: usize,
    pub dim: usize,
    /// `[num_labels × dim]`
    pub mu: Tensor,
    /// `[num_labels × dim]`, kept inside `[LOG_SIGMA_MIN, LOG_SIGMA_MAX]`.
    pub log_sigma: Tensor,
    label_weights: Vec<f64>,
}

/// Graph handles for one binding of a [`BlockPrior`].
#[derive(Clone, Copy, Debug)]
pub struct PriorVars {
    pub mu: Var,
    pub log_sigma: Var,
}

/// Per-dimension averaged variance split of the mixture prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub total: f64,
    pub within: f64,
    pub between: f64,
    pub ratio: f64,
    /// Total variance was zero; `ratio` is reported as 0.
    pub degenerate: bool,
    /// Total variance below [`COLLAPSE_THRESHOLD`].
    pub collapsed: bool,
}

fn check_weights(w: &[f64]) -> Result<()> {
    let s: f64 = w.iter().sum();
    if w.iter().any(|&p| !p.is_finite() || p < 0.0) || (s - 1.0).abs() > 1e-12 {
        return Err(Error::Argument(format!("label weights must be a probability vector, sum={s}")));
    }
    Ok(())
}

impl BlockPrior {
    /// Standard-normal blocks (`mu = 0`, `log_sigma = 0`).
    pub fn new(num_labels: usize, dim: usize, label_weights: Vec<f64>) -> Result<Self> {
        if num_labels == 0 || dim == 0 {
            return Err(Error::Argument("num_labels and dim must be positive".into()));
        }
        Self::from_params(
            vec![vec![0.0; dim]; num_labels],
            vec![vec![0.0; dim]; num_labels],
            label_weights,
        )
    }

    pub fn from_params(mu: Vec<Vec<f64>>, log_sigma: Vec<Vec<f64>>, label_weights: Vec<f64>) -> Result<Self> {
        let num_labels = mu.len();
        if num_labels == 0 || log_sigma.len() != num_labels || label_weights.len() != num_labels {
            return Err(Error::Argument("prior tables and weights must have one entry per label".into()));
        }
        check_weights(&label_weights)?;
        let mu = Tensor::from_rows(&mu)?;
        let ls = Tensor::from_rows(&log_sigma)?;
        if mu.shape() != ls.shape() {
            return Err(Error::Dimension {
                op: "prior",
                lhs: mu.shape().to_vec(),
                rhs: ls.shape().to_vec(),
            });
        }
        let dim = mu.shape()[1];
        let mut p = Self {
            num_labels,
            dim,
            mu: mu.tracked(),
            log_sigma: ls.tracked(),
            label_weights,
        };
        p.clamp_log_sigma();
        Ok(p)
    }

    pub fn label_weights(&self) -> &[f64] {
        &self.label_weights
    }

    pub fn set_label_weights(&mut self, w: Vec<f64>) -> Result<()> {
        if w.len() != self.num_labels {
            return Err(Error::Argument("one weight per label required".into()));
        }
        check_weights(&w)?;
        self.label_weights = w;
        Ok(())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.num_labels {
            return Err(Error::Argument(format!("label {y} outside [0, {})", self.num_labels)));
        }
        Ok(())
    }

    pub fn mu_of(&self, y: usize) -> &[f64] {
        self.mu.row(y)
    }

    pub fn log_sigma_of(&self, y: usize) -> &[f64] {
        self.log_sigma.row(y)
    }

    /// Projects `log_sigma` back into its admissible range.
    pub fn clamp_log_sigma(&mut self) {
        self.log_sigma
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));
    }

    /// `z_y = mu_y + sigma_y ⊙ eps`, `eps ~ N(0, I)`.
    pub fn sample_prior<R: Rng + ?Sized>(&self, y: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.check_label(y)?;
        Ok(self
            .mu_of(y)
            .iter()
            .zip(self.log_sigma_of(y))
            .map(|(m, ls)| {
                let e: f64 = StandardNormal.sample(rng);
                m + ls.exp() * e
            })
            .collect())
    }

    /// Draws a label from `p(y)`.
    pub fn sample_label<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (y, &w) in self.label_weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return y;
            }
        }
        self.label_weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    pub fn bind(&self, g: &mut Graph) -> PriorVars {
        PriorVars {
            mu: g.leaf(&self.mu),
            log_sigma: g.leaf(&self.log_sigma),
        }
    }

    /// Gathers per-row `(mu, log_sigma)` for a batch through a one-hot matrix.
    pub fn gather(&self, g: &mut Graph, vars: PriorVars, onehot: Var) -> Result<(Var, Var)> {
        Ok((g.matmul(onehot, vars.mu)?, g.matmul(onehot, vars.log_sigma)?))
    }

    pub fn absorb(&mut self, grads: &Gradients, vars: PriorVars) -> Result<()> {
        if self.mu.requires_grad() {
            grads.accumulate_into(vars.mu, &mut self.mu)?;
        }
        if self.log_sigma.requires_grad() {
            grads.accumulate_into(vars.log_sigma, &mut self.log_sigma)?;
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.mu.set_requires_grad(on);
        self.log_sigma.set_requires_grad(on);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.mu, &mut self.log_sigma]
    }

    /// Closed-form mean and covariance of the mixture `Σ_y p(y) N(mu_y, diag(sigma_y²))`.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for (y, &w) in self.label_weights.iter().enumerate() {
            mean.iter_mut().zip(self.mu_of(y)).for_each(|(m, v)| *m += w * v);
        }
        mean
    }

    pub fn mixture_moments(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        let mut second = vec![vec![0.0; d]; d];
        for (y, &w) in self.label_weights.iter().enumerate() {
            let mu = self.mu_of(y);
            let ls = self.log_sigma_of(y);
            for i in 0..d {
                mean[i] += w * mu[i];
                second[i][i] += w * (2.0 * ls[i]).exp();
                for j in 0..d {
                    second[i][j] += w * mu[i] * mu[j];
                }
            }
        }
        // mirror the upper triangle so the result is exactly symmetric
        for i in 0..d {
            for j in i..d {
                second[i][j] -= mean[i] * mean[j];
                second[j][i] = second[i][j];
            }
        }
        (mean, second)
    }

    /// Splits total variance into the average block variance and the spread of block means.
    pub fn variance_decomposition(&self) -> VarianceReport {
        let d = self.dim as f64;
        let mean = self.mixture_mean();
        // trace Cov = E_y trace Sigma_y + E_y ||mu_y - E mu||^2; summing the two
        // nonnegative parts avoids cancellation when the means coincide.
        let between = self
            .label_weights
            .iter()
            .enumerate()
            .map(|(y, &w)| w * self.mu_of(y).iter().zip(&mean).map(|(m, e)| (m - e).powi(2)).sum::<f64>())
            .sum::<f64>()
            / d;
        let within = self
            .label_weights
            .iter()
            .enumerate()
            .map(|(y, &w)| w * self.log_sigma_of(y).iter().map(|ls| (2.0 * ls).exp()).sum::<f64>())
            .sum::<f64>()
            / d;
        let total = within + between;
        let degenerate = total <= 0.0;
        let collapsed = total < COLLAPSE_THRESHOLD;
        if collapsed {
            log::warn!("prior collapse: total variance {total:e} below {COLLAPSE_THRESHOLD:e}");
        }
        VarianceReport {
            total,
            within,
            between,
            ratio: if degenerate { 0.0 } else { between / total },
            degenerate,
            collapsed,
        }
    }

    /// `(label, mean over coordinates of mu_y, mean over coordinates of log_sigma_y)`.
    pub fn per_label_summary(&self) -> Vec<(usize, f64, f64)> {
        let d = self.dim as f64;
        (0..self.num_labels)
            .map(|y| {
                (
                    y,
                    self.mu_of(y).iter().sum::<f64>() / d,
                    self.log_sigma_of(y).iter().sum::<f64>() / d,
                )
            })
            .collect()
    }
}

/// One-hot rows for `labels`.
pub fn one_hot(labels: &[usize], num_labels: usize) -> Vec<f64> {
    let mut v = vec![0.0; labels.len() * num_labels];
    for (i, &y) in labels.iter().enumerate() {
        v[i * num_labels + y] = 1.0;
    }
    v
}

/// MLP over `(x, one-hot y)` producing `(mu, log_sigma)` for `q(z | x, y)`.
///
/// When `x` is dropped it is replaced by zeros, so the output depends on `y` alone.
/// With `unit_variance` the log-scale head is ignored and `log_sigma ≡ 0`.
#[derive(Clone, Debug)]
pub struct HybridEncoder {
    pub mlp: Mlp,
    pub dim: usize,
    pub num_labels: usize,
    pub unit_variance: bool,
}

impl HybridEncoder {
    pub fn new<R: Rng + ?Sized>(dim: usize, num_labels: usize, hidden: &[usize], unit_variance: bool, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![dim + num_labels];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * dim);
        let mut mlp = Mlp::new(&sizes, Activation::Silu, rng)?;
        // Starts at N(0, I) for every (x, y).
        mlp.zero_output();
        Ok(Self {
            mlp,
            dim,
            num_labels,
            unit_variance,
        })
    }

    fn input_row(&self, x: &[f64], y: usize, drop_x: bool) -> Result<Vec<f64>> {
        if y >= self.num_labels {
            return Err(Error::Argument(format!("label {y} outside [0, {})", self.num_labels)));
        }
        if x.len() != self.dim {
            return Err(Error::Dimension {
                op: "encode_hybrid",
                lhs: vec![self.dim],
                rhs: vec![x.len()],
            });
        }
        let mut row = if drop_x { vec![0.0; self.dim] } else { x.to_vec() };
        row.extend(one_hot(&[y], self.num_labels));
        Ok(row)
    }

    /// `(mu, log_sigma)` of `q(z | x, y)`.
    pub fn encode_hybrid(&self, x: &[f64], y: usize, drop_x: bool) -> Result<(Vec<f64>, Vec<f64>)> {
        let row = self.input_row(x, y, drop_x)?;
        let out = self.mlp.infer(&row, 1);
        let mu = out[..self.dim].to_vec();
        let ls = if self.unit_variance {
            vec![0.0; self.dim]
        } else {
            out[self.dim..].iter().map(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)).collect()
        };
        Ok((mu, ls))
    }

    /// Label-only prior obtained by dropping `x` for every label.
    pub fn label_prior(&self, label_weights: Vec<f64>) -> Result<BlockPrior> {
        let zeros = vec![0.0; self.dim];
        let (mut mus, mut lss) = (Vec::new(), Vec::new());
        for y in 0..self.num_labels {
            let (m, l) = self.encode_hybrid(&zeros, y, true)?;
            mus.push(m);
            lss.push(l);
        }
        BlockPrior::from_params(mus, lss, label_weights)
    }

    pub fn bind(&self, g: &mut Graph) -> MlpVars {
        self.mlp.bind(g)
    }

    /// Batched encoding of `input = [x (zeros where dropped) | one-hot y]`.
    /// Returns `(mu, log_sigma)`, the latter `None` under unit variance.
    pub fn encode_batch(&self, g: &mut Graph, vars: &MlpVars, input: Var) -> Result<(Var, Option<Var>)> {
        let out = self.mlp.forward(g, vars, input)?;
        let d = self.dim;
        let select = |offset: usize| {
            let mut s = vec![0.0; 2 * d * d];
            for i in 0..d {
                s[(offset + i) * d + i] = 1.0;
            }
            s
        };
        let sel_mu = g.constant(vec![2 * d, d], select(0))?;
        let mu = g.matmul(out, sel_mu)?;
        if self.unit_variance {
            return Ok((mu, None));
        }
        let sel_ls = g.constant(vec![2 * d, d], select(d))?;
        let ls = g.matmul(out, sel_ls)?;
        let ls = g.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok((mu, Some(ls)))
    }
}
