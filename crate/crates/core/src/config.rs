//! Run configuration and manifest.
//!
//! Configs are strict JSON: unknown keys anywhere are rejected so a typo in
//! `beta` or `strategy` cannot silently fall back to a default.

use crate::datasets::{gen_gaussian_grid, gen_two_blocks, load_idx, LabeledDataset};
use crate::error::{Error, Result};
use crate::regularizers::{NormKind, RegStrategy, StrategyKind, DEFAULT_DROPOUT_PROB};
use crate::solvers::SolverConfig;
use crate::velocity::{NetConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SEED_ENV: &str = "BLOCKFLOW_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoBlocks {
        #[serde(default = "default_n")]
        n_per_block: usize,
        #[serde(default = "default_centers")]
        centers: [[f64; 2]; 2],
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
    GaussianGrid {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_n")]
        n_per_block: usize,
        #[serde(default = "default_box")]
        box_half: f64,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        seed: u64,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` samples.
        #[serde(default)]
        limit: Option<usize>,
    },
}

fn default_n() -> usize {
    1000
}
fn default_centers() -> [[f64; 2]; 2] {
    [[-3.0, 0.0], [3.0, 0.0]]
}
fn default_spread() -> f64 {
    0.3
}
fn default_k() -> usize {
    3
}
fn default_box() -> f64 {
    3.0
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoBlocks {
            n_per_block: default_n(),
            centers: default_centers(),
            spread: default_spread(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn build(&self) -> Result<LabeledDataset> {
        match self {
            DatasetSpec::TwoBlocks {
                n_per_block,
                centers,
                spread,
                seed,
            } => gen_two_blocks(*n_per_block, *centers, *spread, *seed),
            DatasetSpec::GaussianGrid {
                k,
                n_per_block,
                box_half,
                spread,
                seed,
            } => gen_gaussian_grid(*k, *n_per_block, *box_half, *spread, *seed),
            DatasetSpec::Mnist { images, labels, limit } => {
                let d = load_idx(images, labels)?;
                match limit {
                    Some(m) if *m < d.len() => {
                        let dim = d.dim;
                        LabeledDataset::new(
                            d.name.clone(),
                            dim,
                            d.samples_flat()[..m * dim].to_vec(),
                            d.labels()[..*m].to_vec(),
                            d.num_labels,
                        )
                    }
                    _ => Ok(d),
                }
            }
        }
    }

    /// Same dataset with a different generator seed; file-backed sets are unchanged.
    pub fn with_seed(&self, new_seed: u64) -> Self {
        let mut s = self.clone();
        match &mut s {
            DatasetSpec::TwoBlocks { seed, .. } | DatasetSpec::GaussianGrid { seed, .. } => *seed = new_seed,
            DatasetSpec::Mnist { .. } => {}
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub strategy: StrategyKind,
    pub beta: f64,
    /// FANR only; defaults to L1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormKind>,
    /// HABR only; defaults to 0.5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_prob: Option<f64>,
    #[serde(default)]
    pub model: NetConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    pub output_dir: PathBuf,
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, applies the `BLOCKFLOW_SEED` override, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.train.seed = v
                .trim()
                .parse()
                .map_err(|_| field_err(SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
        }
        Ok(cfg)
    }

    /// The resolved strategy with per-kind defaults filled in.
    pub fn reg_strategy(&self) -> Result<RegStrategy> {
        let norm = match (self.strategy, self.norm) {
            (StrategyKind::Fanr, n) => Some(n.unwrap_or(NormKind::L1)),
            (_, Some(_)) => return Err(field_err("norm", "only valid with strategy fanr")),
            (_, None) => None,
        };
        let dropout = match (self.strategy, self.dropout_prob) {
            (StrategyKind::Habr, p) => Some(p.unwrap_or(DEFAULT_DROPOUT_PROB)),
            (_, Some(_)) => return Err(field_err("dropout_prob", "only valid with strategy habr")),
            (_, None) => None,
        };
        RegStrategy::new(self.strategy, self.beta, norm, dropout).map_err(|e| field_err("strategy", e))
    }

    pub fn validate(&self) -> Result<()> {
        self.reg_strategy()?;
        match &self.dataset {
            DatasetSpec::TwoBlocks { n_per_block, spread, centers, .. } => {
                check_gen("dataset", *n_per_block, *spread)?;
                if centers.iter().flatten().any(|c| !c.is_finite()) {
                    return Err(field_err("dataset.centers", "must be finite"));
                }
            }
            DatasetSpec::GaussianGrid {
                k,
                n_per_block,
                spread,
                box_half,
                ..
            } => {
                check_gen("dataset", *n_per_block, *spread)?;
                if *k == 0 {
                    return Err(field_err("dataset.k", "must be >= 1"));
                }
                if !(box_half.is_finite() && *box_half >= 0.0) {
                    return Err(field_err("dataset.box_half", "must be finite and >= 0"));
                }
            }
            DatasetSpec::Mnist { limit, .. } => {
                if *limit == Some(0) {
                    return Err(field_err("dataset.limit", "must be >= 1"));
                }
            }
        }
        let m = &self.model;
        if m.hidden.contains(&0) {
            return Err(field_err("model.hidden", "widths must be >= 1"));
        }
        if m.encoder_hidden.contains(&0) {
            return Err(field_err("model.encoder_hidden", "widths must be >= 1"));
        }
        let t = &self.train;
        if t.batch == 0 {
            return Err(field_err("train.batch", "must be >= 1"));
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return Err(field_err("train.lr", "must be finite and >= 0"));
        }
        if t.log_every == 0 {
            return Err(field_err("train.log_every", "must be >= 1"));
        }
        self.solver.validate().map_err(|e| field_err("solver", e))?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(field_err("output_dir", "must not be empty"));
        }
        Ok(())
    }

    /// Config echo stored in checkpoints: the run's content without its output location,
    /// so identical runs into different directories produce identical bytes.
    pub fn checkpoint_echo(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        Ok(v)
    }
}

fn check_gen(prefix: &str, n: usize, spread: f64) -> Result<()> {
    if n == 0 {
        return Err(field_err(&format!("{prefix}.n_per_block"), "must be >= 1"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(field_err(&format!("{prefix}.spread"), "must be finite and >= 0"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub metrics: Vec<PathBuf>,
}

pub fn unix_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
