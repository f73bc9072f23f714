//! Prior regularizers: log-scale norms and diagonal-Gaussian KL terms.
//!
//! Every term comes in two forms: a plain evaluation over slices, and a graph
//! builder that averages the per-sample term over a batch.

use crate::error::{Error, Result};
use crate::ndnum::{Graph, Var};
use crate::prior::BlockPrior;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    /// Norm of the label prior's log-scale.
    Fanr,
    /// KL from the label prior to `N(0, I)`.
    Fabr,
    /// KL from a unit-variance hybrid encoder to the label prior.
    Hacbr,
    /// KL from the hybrid encoder (with `x` dropout) to `N(0, I)`.
    Habr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L1,
    L2,
    Linf,
}

impl FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fanr" => Ok(Self::Fanr),
            "fabr" => Ok(Self::Fabr),
            "hacbr" => Ok(Self::Hacbr),
            "habr" => Ok(Self::Habr),
            other => Err(Error::Argument(format!("unknown strategy '{other}'"))),
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "linf" => Ok(Self::Linf),
            other => Err(Error::Argument(format!("unknown norm '{other}'"))),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Fanr => "fanr",
            Self::Fabr => "fabr",
            Self::Hacbr => "hacbr",
            Self::Habr => "habr",
        };
        f.write_str(s)
    }
}

pub const DEFAULT_DROPOUT_PROB: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegStrategy {
    pub kind: StrategyKind,
    pub beta: f64,
    /// Set iff `kind == Fanr`.
    pub norm: Option<NormKind>,
    /// Set iff `kind == Habr`.
    pub dropout_prob: Option<f64>,
}

impl RegStrategy {
    pub fn fanr(beta: f64, norm: NormKind) -> Result<Self> {
        Self::new(StrategyKind::Fanr, beta, Some(norm), None)
    }
    pub fn fabr(beta: f64) -> Result<Self> {
        Self::new(StrategyKind::Fabr, beta, None, None)
    }
    pub fn hacbr(beta: f64) -> Result<Self> {
        Self::new(StrategyKind::Hacbr, beta, None, None)
    }
    pub fn habr(beta: f64, dropout_prob: f64) -> Result<Self> {
        Self::new(StrategyKind::Habr, beta, None, Some(dropout_prob))
    }

    pub fn new(kind: StrategyKind, beta: f64, norm: Option<NormKind>, dropout_prob: Option<f64>) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Argument(format!("beta must be finite and >= 0, got {beta}")));
        }
        if norm.is_some() != (kind == StrategyKind::Fanr) {
            return Err(Error::Argument("norm applies to fanr only (and fanr requires it)".into()));
        }
        if dropout_prob.is_some() != (kind == StrategyKind::Habr) {
            return Err(Error::Argument("dropout_prob applies to habr only (and habr requires it)".into()));
        }
        if let Some(p) = dropout_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Argument(format!("dropout_prob {p} outside [0, 1]")));
            }
        }
        Ok(Self {
            kind,
            beta,
            norm,
            dropout_prob,
        })
    }

    pub fn uses_encoder(&self) -> bool {
        matches!(self.kind, StrategyKind::Hacbr | StrategyKind::Habr)
    }

    /// Whether the label prior table receives gradients during training.
    pub fn trains_prior_table(&self) -> bool {
        !matches!(self.kind, StrategyKind::Habr)
    }
}

/// `KL(N(mu1, sigma1²) || N(mu2, sigma2²))` summed over coordinates.
pub fn kl_diag_gauss(mu1: &[f64], log_sigma1: &[f64], mu2: &[f64], log_sigma2: &[f64]) -> Result<f64> {
    let n = mu1.len();
    if log_sigma1.len() != n || mu2.len() != n || log_sigma2.len() != n {
        return Err(Error::Dimension {
            op: "kl_diag_gauss",
            lhs: vec![mu1.len(), log_sigma1.len()],
            rhs: vec![mu2.len(), log_sigma2.len()],
        });
    }
    Ok((0..n)
        .map(|i| {
            let (l1, l2) = (log_sigma1[i], log_sigma2[i]);
            let dm = mu1[i] - mu2[i];
            l2 - l1 + ((2.0 * l1).exp() + dm * dm) / (2.0 * (2.0 * l2).exp()) - 0.5
        })
        .sum())
}

pub fn norm_value(v: &[f64], norm: NormKind) -> f64 {
    match norm {
        NormKind::L1 => v.iter().map(|x| x.abs()).sum(),
        NormKind::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        NormKind::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
    }
}

pub fn reg_fanr(prior: &BlockPrior, y: usize, norm: NormKind) -> Result<f64> {
    check_label(prior, y)?;
    Ok(norm_value(prior.log_sigma_of(y), norm))
}

pub fn reg_fabr(prior: &BlockPrior, y: usize) -> Result<f64> {
    check_label(prior, y)?;
    let zeros = vec![0.0; prior.dim];
    kl_diag_gauss(prior.mu_of(y), prior.log_sigma_of(y), &zeros, &zeros)
}

/// `KL(N(hybrid_mu, I) || N(label_mu, label_sigma²))`; the hybrid scale must be unit.
pub fn reg_hacbr(hybrid_mu: &[f64], hybrid_log_sigma: &[f64], label_mu: &[f64], label_log_sigma: &[f64]) -> Result<f64> {
    if hybrid_log_sigma.iter().any(|&v| v != 0.0) {
        return Err(Error::Contract("hacbr requires a unit-variance hybrid encoder".into()));
    }
    kl_diag_gauss(hybrid_mu, hybrid_log_sigma, label_mu, label_log_sigma)
}

pub fn reg_habr(hybrid_mu: &[f64], hybrid_log_sigma: &[f64]) -> Result<f64> {
    let zeros = vec![0.0; hybrid_mu.len()];
    kl_diag_gauss(hybrid_mu, hybrid_log_sigma, &zeros, &zeros)
}

fn check_label(prior: &BlockPrior, y: usize) -> Result<()> {
    if y >= prior.num_labels {
        return Err(Error::Argument(format!("label {y} outside [0, {})", prior.num_labels)));
    }
    Ok(())
}

/// Sum over all entries of the elementwise diagonal-Gaussian KL.
/// `None` stands for zeros (mean 0 or log-scale 0).
pub fn kl_graph(g: &mut Graph, mu1: Var, ls1: Option<Var>, mu2: Option<Var>, ls2: Option<Var>) -> Result<Var> {
    let dm = match mu2 {
        Some(m2) => g.sub(mu1, m2)?,
        None => mu1,
    };
    let dm2 = g.square(dm)?;
    let num = match ls1 {
        Some(l1) => {
            let two = g.scale(l1, 2.0)?;
            let var1 = g.exp(two)?;
            g.add(var1, dm2)?
        }
        None => g.add_scalar(dm2, 1.0)?,
    };
    let ratio = match ls2 {
        Some(l2) => {
            let neg = g.scale(l2, -2.0)?;
            let inv = g.exp(neg)?;
            g.mul(num, inv)?
        }
        None => num,
    };
    let half = g.scale(ratio, 0.5)?;
    let mut term = g.add_scalar(half, -0.5)?;
    if let Some(l2) = ls2 {
        term = g.add(term, l2)?;
    }
    if let Some(l1) = ls1 {
        term = g.sub(term, l1)?;
    }
    g.sum(term)
}

/// Batch mean of per-row norms of `rows` (`[B × d]`).
pub fn norm_graph(g: &mut Graph, rows: Var, norm: NormKind) -> Result<Var> {
    let b = g.shape(rows)[0] as f64;
    let per_row = match norm {
        NormKind::L1 => {
            let a = g.abs(rows)?;
            g.sum_last(a)?
        }
        NormKind::L2 => {
            let sq = g.square(rows)?;
            let s = g.sum_last(sq)?;
            g.sqrt(s)?
        }
        NormKind::Linf => {
            let a = g.abs(rows)?;
            g.max_last(a)?
        }
    };
    let s = g.sum(per_row)?;
    g.scale(s, 1.0 / b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndnum::Tensor;

    #[test]
    fn kl_identities() {
        let m = [0.3, -1.2];
        let l = [0.1, -0.4];
        assert!(kl_diag_gauss(&m, &l, &m, &l).unwrap().abs() < 1e-15);
        let v = kl_diag_gauss(&[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((v - 2.5).abs() < 1e-15);
    }

    #[test]
    fn norms_of_log_sigma() {
        let p = BlockPrior::from_params(vec![vec![0.0, 0.0]], vec![vec![-1.0, 2.0]], vec![1.0]).unwrap();
        assert_eq!(reg_fanr(&p, 0, NormKind::L1).unwrap(), 3.0);
        assert!((reg_fanr(&p, 0, NormKind::L2).unwrap() - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(reg_fanr(&p, 0, NormKind::Linf).unwrap(), 2.0);
        let z = BlockPrior::new(1, 3, vec![1.0]).unwrap();
        for n in [NormKind::L1, NormKind::L2, NormKind::Linf] {
            assert_eq!(reg_fanr(&z, 0, n).unwrap(), 0.0);
        }
        assert!("l3".parse::<NormKind>().is_err());
    }

    #[test]
    fn fabr_values() {
        let p = BlockPrior::from_params(vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![vec![0.0; 2]; 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(reg_fabr(&p, 0).unwrap(), 0.0);
        assert!((reg_fabr(&p, 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hacbr_values_and_contract() {
        assert_eq!(reg_hacbr(&[0.2, 0.1], &[0.0, 0.0], &[0.2, 0.1], &[0.0, 0.0]).unwrap(), 0.0);
        assert!((reg_hacbr(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            reg_hacbr(&[0.0], &[0.1], &[0.0], &[0.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn habr_standard_normal_is_zero() {
        assert_eq!(reg_habr(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn strategy_field_invariants() {
        assert!(RegStrategy::new(StrategyKind::Fabr, 1.0, Some(NormKind::L1), None).is_err());
        assert!(RegStrategy::new(StrategyKind::Fanr, 1.0, None, None).is_err());
        assert!(RegStrategy::new(StrategyKind::Habr, 1.0, None, None).is_err());
        assert!(RegStrategy::habr(1.0, 1.5).is_err());
        assert!(RegStrategy::fabr(-1.0).is_err());
        assert!(RegStrategy::habr(1.0, 0.5).is_ok());
    }

    #[test]
    fn graph_kl_matches_plain() {
        let m1 = [0.4, -0.3, 1.1];
        let l1 = [0.2, -0.5, 0.05];
        let m2 = [-0.6, 0.2, 0.0];
        let l2 = [0.3, 0.1, -0.2];
        let mut g = Graph::new();
        let t = |v: &[f64]| Tensor::new(vec![1, 3], v.to_vec()).unwrap();
        let (a, b, c, d) = (g.leaf(&t(&m1)), g.leaf(&t(&l1)), g.leaf(&t(&m2)), g.leaf(&t(&l2)));
        let k = kl_graph(&mut g, a, Some(b), Some(c), Some(d)).unwrap();
        let plain = kl_diag_gauss(&m1, &l1, &m2, &l2).unwrap();
        assert!((g.item(k) - plain).abs() < 1e-14);
        let k0 = kl_graph(&mut g, a, None, None, None).unwrap();
        let plain0 = kl_diag_gauss(&m1, &[0.0; 3], &[0.0; 3], &[0.0; 3]).unwrap();
        assert!((g.item(k0) - plain0).abs() < 1e-14);
    }

    #[test]
    fn graph_norms_match_plain() {
        let rows = [-1.0, 2.0, 0.5, -0.25];
        for n in [NormKind::L1, NormKind::L2, NormKind::Linf] {
            let mut g = Graph::new();
            let v = g.constant(vec![2, 2], rows.to_vec()).unwrap();
            let r = norm_graph(&mut g, v, n).unwrap();
            let plain = (norm_value(&rows[..2], n) + norm_value(&rows[2..], n)) / 2.0;
            assert!((g.item(r) - plain).abs() < 1e-15);
        }
    }
}
