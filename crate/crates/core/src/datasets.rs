//! Labeled toy distributions, MNIST IDX parsing, and minibatch sampling.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Points in `R^dim` with integer labels in `[0, num_labels)`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub dim: usize,
    pub num_labels: usize,
    samples: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, dim: usize, samples: Vec<f64>, labels: Vec<usize>, num_labels: usize) -> Result<Self> {
        if dim == 0 || num_labels == 0 {
            return Err(Error::Argument("dim and num_labels must be positive".into()));
        }
        if samples.len() != labels.len() * dim {
            return Err(Error::Argument(format!(
                "{} values cannot hold {} samples of dim {dim}",
                samples.len(),
                labels.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset samples".into()));
        }
        let mut seen = vec![false; num_labels];
        for &y in &labels {
            if y >= num_labels {
                return Err(Error::Argument(format!("label {y} outside [0, {num_labels})")));
            }
            seen[y] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Argument(format!("label {missing} has no samples")));
        }
        Ok(Self {
            name: name.into(),
            dim,
            num_labels,
            samples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn samples_flat(&self) -> &[f64] {
        &self.samples
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_labels];
        self.labels.iter().for_each(|&y| c[y] += 1);
        c
    }

    /// Empirical `p(y)`.
    pub fn label_frequencies(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.label_counts().into_iter().map(|c| c as f64 / n).collect()
    }

    /// Per-label sample mean.
    pub fn block_means(&self) -> Vec<Vec<f64>> {
        let mut sums = vec![vec![0.0; self.dim]; self.num_labels];
        for i in 0..self.len() {
            for (s, x) in sums[self.labels[i]].iter_mut().zip(self.sample(i)) {
                *s += x;
            }
        }
        let counts = self.label_counts();
        sums.iter_mut()
            .zip(counts)
            .for_each(|(s, c)| s.iter_mut().for_each(|v| *v /= c as f64));
        sums
    }

    /// Writes `label,x_1..x_d` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["label".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x_{i}")));
        wr.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec = vec![self.labels[i].to_string()];
            rec.extend(self.sample(i).iter().map(|v| v.to_string()));
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn check_gen(n: usize, spread: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Argument("n_per_block must be at least 1".into()));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::Argument(format!("spread must be positive, got {spread}")));
    }
    Ok(())
}

fn gaussian_blocks(name: &str, centers: &[[f64; 2]], n: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(centers.len() * n * 2);
    let mut labels = Vec::with_capacity(centers.len() * n);
    for (y, c) in centers.iter().enumerate() {
        for _ in 0..n {
            for &ci in c {
                let e: f64 = StandardNormal.sample(&mut rng);
                samples.push(ci + spread * e);
            }
            labels.push(y);
        }
    }
    LabeledDataset::new(name, 2, samples, labels, centers.len())
}

/// Two isotropic Gaussian blocks, labels 0 and 1.
pub fn gen_two_blocks(n_per_block: usize, centers: [[f64; 2]; 2], spread: f64, seed: u64) -> Result<LabeledDataset> {
    check_gen(n_per_block, spread)?;
    gaussian_blocks("two-blocks", &centers, n_per_block, spread, seed)
}

/// `k × k` grid of Gaussian blocks spanning `[-box, box]²`; label `i·k + j`.
pub fn gen_gaussian_grid(k: usize, n_per_block: usize, box_half: f64, spread: f64, seed: u64) -> Result<LabeledDataset> {
    check_gen(n_per_block, spread)?;
    if k == 0 {
        return Err(Error::Argument("grid size k must be at least 1".into()));
    }
    let coord = |i: usize| {
        if k == 1 {
            0.0
        } else {
            -box_half + 2.0 * box_half * i as f64 / (k - 1) as f64
        }
    };
    let centers: Vec<[f64; 2]> = (0..k)
        .flat_map(|i| (0..k).map(move |j| [coord(i), coord(j)]))
        .collect();
    gaussian_blocks("gaussian-grid", &centers, n_per_block, spread, seed)
}

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image/label pair already in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("images magic {magic}, expected {IDX_IMAGES_MAGIC}")));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("labels magic {magic}, expected {IDX_LABELS_MAGIC}")));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let nl = be_u32(labels, 4, "labels")? as usize;
    if n != nl {
        return Err(Error::Format(format!("{n} images but {nl} labels")));
    }
    let dim = rows * cols;
    let pix = images
        .get(16..16 + n * dim)
        .ok_or_else(|| Error::Format("images: truncated pixel data".into()))?;
    let lab = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Format("labels: truncated label data".into()))?;
    let samples = pix.iter().map(|&b| b as f64 / 255.0 * 2.0 - 1.0).collect();
    let labels: Vec<usize> = lab.iter().map(|&b| b as usize).collect();
    let num_labels = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new("mnist", dim, samples, labels, num_labels).map_err(|e| Error::Format(e.to_string()))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

/// Minibatch index generator; with shuffling, each epoch is a fresh permutation.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    shuffle: bool,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::Argument("empty dataset or zero batch size".into()));
        }
        let mut s = Self {
            n,
            batch_size,
            shuffle,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: 0,
        };
        s.new_epoch();
        Ok(s)
    }

    fn new_epoch(&mut self) {
        self.cursor = 0;
        if self.shuffle {
            self.order.shuffle(&mut self.rng);
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.n {
                self.new_epoch();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
