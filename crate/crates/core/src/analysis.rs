//! Trajectory curvature (network-substituted and exact), the variance bounds on it,
//! and a sliced 2-Wasserstein sample distance.

use crate::error::{Error, Result};
use crate::solvers::{euler_solve_observed, NetField};
use crate::velocity::BlockFlowModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Points whose interpolants differ by at most this (max-norm) are one conditioning event.
pub const COINCIDENCE_TOL: f64 = 1e-9;
pub const DEFAULT_T_GRID: usize = 201;
pub const DEFAULT_TRAJECTORIES: usize = 10_000;
pub const DEFAULT_EULER_STEPS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurvatureMethod {
    Network,
    Bruteforce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub v_estimate: f64,
    pub n_trajectories: usize,
    pub n_euler_steps: usize,
    pub method: CurvatureMethod,
    /// `(t, integrand)`; `v_estimate` is their plain mean.
    pub per_t: Vec<(f64, f64)>,
}

impl CurvatureReport {
    pub fn write_per_t_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "integrand"]).map_err(crate::datasets::csv_err)?;
        for (t, v) in &self.per_t {
            wr.write_record([t.to_string(), v.to_string()]).map_err(crate::datasets::csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Curvature of the learned flow along `k` Euler trajectories of `n` steps.
///
/// For each trajectory with endpoints `(start, end)`, the integrand at grid time
/// `t_i` is `‖(end − start) − v(x_{t_i}, t_i)‖²`, with the network standing in for
/// the conditional mean displacement.
pub fn curvature_network(model: &BlockFlowModel, k: usize, n: usize, seed: u64) -> Result<CurvatureReport> {
    if k == 0 || n == 0 {
        return Err(Error::Argument("need at least one trajectory and one step".into()));
    }
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = vec![0.0; n];
    let mut vels = vec![0.0; n * d];
    for _ in 0..k {
        let y = model.prior.sample_label(&mut rng);
        let start = model.prior.sample_prior(y, &mut rng)?;
        let field = NetField {
            net: &model.net,
            label: Some(y),
        };
        let res = euler_solve_observed(&field, &start, 0.0, 1.0, n, |i, _, _, v| {
            vels[i * d..(i + 1) * d].copy_from_slice(v);
        })
        .map_err(|e| Error::Analysis(format!("trajectory failed: {e}")))?;
        for i in 0..n {
            let dev: f64 = (0..d)
                .map(|j| (res.x[j] - start[j] - vels[i * d + j]).powi(2))
                .sum();
            sums[i] += dev;
        }
    }
    let per_t: Vec<(f64, f64)> = sums
        .iter()
        .enumerate()
        .map(|(i, s)| (i as f64 / n as f64, s / k as f64))
        .collect();
    let v = per_t.iter().map(|p| p.1).sum::<f64>() / n as f64;
    if !v.is_finite() {
        return Err(Error::Analysis("non-finite curvature estimate".into()));
    }
    Ok(CurvatureReport {
        v_estimate: v,
        n_trajectories: k,
        n_euler_steps: n,
        method: CurvatureMethod::Network,
        per_t,
    })
}

/// Finite-support coupling of `(x0, x1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pub support: Vec<(Vec<f64>, Vec<f64>)>,
    pub probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(support: Vec<(Vec<f64>, Vec<f64>)>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Argument("empty support".into()));
        }
        if probs.len() != support.len() {
            return Err(Error::Argument("one probability per support pair".into()));
        }
        let d = support[0].0.len();
        if support.iter().any(|(a, b)| a.len() != d || b.len() != d) {
            return Err(Error::Argument("support points must share one dimension".into()));
        }
        let s: f64 = probs.iter().sum();
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!("probabilities must sum to 1, got {s}")));
        }
        Ok(Self { support, probs })
    }

    /// Product of two marginals given as `(points, weights)`.
    pub fn independent(x0: &[(Vec<f64>, f64)], x1: &[(Vec<f64>, f64)]) -> Result<Self> {
        let mut support = Vec::new();
        let mut probs = Vec::new();
        for (a, pa) in x0 {
            for (b, pb) in x1 {
                support.push((a.clone(), b.clone()));
                probs.push(pa * pb);
            }
        }
        Self::new(support, probs)
    }

    pub fn dim(&self) -> usize {
        self.support[0].0.len()
    }

    fn weighted_var(&self, pick: impl Fn(&(Vec<f64>, Vec<f64>)) -> Vec<f64>) -> f64 {
        let d = self.dim();
        let pts: Vec<Vec<f64>> = self.support.iter().map(pick).collect();
        let mut mean = vec![0.0; d];
        for (p, w) in pts.iter().zip(&self.probs) {
            mean.iter_mut().zip(p).for_each(|(m, x)| *m += w * x);
        }
        pts.iter()
            .zip(&self.probs)
            .map(|(p, w)| w * p.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
            .sum()
    }

    /// `E‖x0 − E x0‖²`.
    pub fn var_x0(&self) -> f64 {
        self.weighted_var(|s| s.0.clone())
    }

    pub fn var_x1(&self) -> f64 {
        self.weighted_var(|s| s.1.clone())
    }

    /// `E‖D − E D‖²` for the displacement `D = x1 − x0`.
    pub fn var_displacement(&self) -> f64 {
        self.weighted_var(|s| s.1.iter().zip(&s.0).map(|(b, a)| b - a).collect())
    }

    /// True when the probabilities factor into the product of the marginals.
    pub fn is_product_form(&self) -> bool {
        let (n0, i0) = distinct_points(self.support.iter().map(|s| s.0.as_slice()));
        let (n1, i1) = distinct_points(self.support.iter().map(|s| s.1.as_slice()));
        let mut joint = vec![0.0f64; n0 * n1];
        let (mut m0, mut m1) = (vec![0.0f64; n0], vec![0.0f64; n1]);
        for (k, &p) in self.probs.iter().enumerate() {
            joint[i0[k] * n1 + i1[k]] += p;
            m0[i0[k]] += p;
            m1[i1[k]] += p;
        }
        (0..n0).all(|a| (0..n1).all(|b| (joint[a * n1 + b] - m0[a] * m1[b]).abs() <= 1e-12))
    }
}

/// Number of distinct points and each input's class index.
fn distinct_points<'a>(pts: impl Iterator<Item = &'a [f64]>) -> (usize, Vec<usize>) {
    let mut reps: Vec<&[f64]> = Vec::new();
    let idx = pts
        .map(|p| match reps.iter().position(|r| same_point(r, p)) {
            Some(j) => j,
            None => {
                reps.push(p);
                reps.len() - 1
            }
        })
        .collect();
    (reps.len(), idx)
}

fn same_point(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= COINCIDENCE_TOL)
}

/// Conditional statistics of the displacement at one interpolation time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalSplit {
    pub t: f64,
    /// `E[‖D − E[D | x_t]‖²]`, the curvature integrand.
    pub expected_conditional_var: f64,
    /// `E‖E[D | x_t] − E D‖²`.
    pub var_of_conditional_mean: f64,
    /// `E‖D − E D‖²`.
    pub total_var: f64,
}

/// Groups support pairs by coincident `x_t = t·x1 + (1 − t)·x0` and splits the displacement variance.
pub fn conditional_split(joint: &DiscreteJoint, t: f64) -> ConditionalSplit {
    let d = joint.dim();
    let disp: Vec<Vec<f64>> = joint
        .support
        .iter()
        .map(|(a, b)| b.iter().zip(a).map(|(y, x)| y - x).collect())
        .collect();
    let xt: Vec<Vec<f64>> = joint
        .support
        .iter()
        .map(|(a, b)| a.iter().zip(b).map(|(x0, x1)| t * x1 + (1.0 - t) * x0).collect())
        .collect();

    // group[i] = index of the first pair whose interpolant coincides with pair i's
    let mut reps: Vec<usize> = Vec::new();
    let mut group = vec![0usize; xt.len()];
    for i in 0..xt.len() {
        match reps.iter().position(|&r| same_point(&xt[r], &xt[i])) {
            Some(g) => group[i] = g,
            None => {
                group[i] = reps.len();
                reps.push(i);
            }
        }
    }
    let ng = reps.len();
    let mut mass = vec![0.0; ng];
    let mut cmean = vec![vec![0.0; d]; ng];
    for (i, &p) in joint.probs.iter().enumerate() {
        mass[group[i]] += p;
        cmean[group[i]].iter_mut().zip(&disp[i]).for_each(|(m, v)| *m += p * v);
    }
    for (m, &w) in cmean.iter_mut().zip(&mass) {
        if w > 0.0 {
            m.iter_mut().for_each(|v| *v /= w);
        }
    }
    let mut mean = vec![0.0; d];
    for (i, &p) in joint.probs.iter().enumerate() {
        mean.iter_mut().zip(&disp[i]).for_each(|(m, v)| *m += p * v);
    }
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut ecv = 0.0;
    let mut total = 0.0;
    for (i, &p) in joint.probs.iter().enumerate() {
        ecv += p * sq(&disp[i], &cmean[group[i]]);
        total += p * sq(&disp[i], &mean);
    }
    let vcm = (0..ng).map(|g| mass[g] * sq(&cmean[g], &mean)).sum();
    ConditionalSplit {
        t,
        expected_conditional_var: ecv,
        var_of_conditional_mean: vcm,
        total_var: total,
    }
}

/// Exact curvature of a finite coupling with midpoint quadrature over `t_grid_size` points.
pub fn curvature_bruteforce(joint: &DiscreteJoint, t_grid_size: usize) -> Result<CurvatureReport> {
    if joint.support.is_empty() {
        return Err(Error::Argument("empty support".into()));
    }
    if t_grid_size == 0 {
        return Err(Error::Argument("t grid must have at least one point".into()));
    }
    let m = t_grid_size as f64;
    let per_t: Vec<(f64, f64)> = (0..t_grid_size)
        .map(|i| {
            let t = (i as f64 + 0.5) / m;
            (t, conditional_split(joint, t).expected_conditional_var)
        })
        .collect();
    let v = per_t.iter().map(|p| p.1).sum::<f64>() / m;
    Ok(CurvatureReport {
        v_estimate: v,
        n_trajectories: joint.support.len(),
        n_euler_steps: 0,
        method: CurvatureMethod::Bruteforce,
        per_t,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop2Check {
    pub v: f64,
    pub var_x0: f64,
    pub var_x1: f64,
    /// `(√Var x1 + √Var x0)²`
    pub bound_coupled: f64,
    /// `Var x1 + Var x0`, only for product-form joints.
    pub bound_independent: Option<f64>,
    pub holds: bool,
}

/// Checks the variance bounds on curvature for a finite coupling.
pub fn check_prop2(joint: &DiscreteJoint) -> Result<Prop2Check> {
    let v = curvature_bruteforce(joint, DEFAULT_T_GRID)?.v_estimate;
    let (v0, v1) = (joint.var_x0(), joint.var_x1());
    let bound_coupled = (v1.sqrt() + v0.sqrt()).powi(2);
    let bound_independent = joint.is_product_form().then_some(v0 + v1);
    let holds = v <= bound_coupled + 1e-9 && bound_independent.is_none_or(|b| v <= b + 1e-9);
    Ok(Prop2Check {
        v,
        var_x0: v0,
        var_x1: v1,
        bound_coupled,
        bound_independent,
        holds,
    })
}

/// Squared 2-Wasserstein distance between two 1-D empirical measures (uniform weights).
pub fn w2_squared_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        return a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / na as f64;
    }
    // Merge the two quantile step functions on [0, 1].
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        acc += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    acc
}

/// Sliced 2-Wasserstein distance over `n_projections` random unit directions.
///
/// Both sets are row-major with `dim` columns.
pub fn sliced_w2(a: &[f64], b: &[f64], dim: usize, n_projections: usize, seed: u64) -> Result<f64> {
    if dim == 0 || a.is_empty() || b.is_empty() || !a.len().is_multiple_of(dim) || !b.len().is_multiple_of(dim) {
        return Err(Error::Argument(format!(
            "sample sets of {} and {} values do not split into rows of dim {dim}",
            a.len(),
            b.len()
        )));
    }
    if n_projections == 0 {
        return Err(Error::Argument("need at least one projection".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_projections {
        let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        dir.iter_mut().for_each(|v| *v /= norm);
        let proj = |s: &[f64]| -> Vec<f64> {
            s.chunks(dim)
                .map(|r| r.iter().zip(&dir).map(|(x, w)| x * w).sum())
                .collect()
        };
        let (mut pa, mut pb) = (proj(a), proj(b));
        total += w2_squared_1d(&mut pa, &mut pb);
    }
    Ok((total / n_projections as f64).sqrt())
}
