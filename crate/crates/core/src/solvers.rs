//! Fixed-step Euler and adaptive Dormand–Prince 5(4) integration of `dx/dt = v(x, t)`.

use crate::error::{Error, Result};
use crate::prior::BlockPrior;
use crate::velocity::{BlockFlowModel, VelocityNet};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>>;
}

/// Adapts a closure `(t, x) -> v` into a [`VectorField`].
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(f64, &[f64]) -> Vec<f64>> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok((self.f)(t, x))
    }
}

/// The learned field with a fixed conditioning label.
pub struct NetField<'a> {
    pub net: &'a VelocityNet,
    pub label: Option<usize>,
}

impl VectorField for NetField<'_> {
    fn dim(&self) -> usize {
        self.net.dim
    }
    fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        self.net.eval_v(x, t, self.label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub trajectory: Option<Vec<(f64, Vec<f64>)>>,
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SolverConfig {
    Euler {
        n_steps: usize,
    },
    Rk45 {
        #[serde(default = "default_tol")]
        atol: f64,
        #[serde(default = "default_tol")]
        rtol: f64,
        #[serde(default = "default_max_steps")]
        max_steps: usize,
    },
}

fn default_tol() -> f64 {
    1e-5
}
fn default_max_steps() -> usize {
    10_000
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::Euler { n_steps: 20 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SolverConfig::Euler { n_steps: 0 } => Err(Error::Argument("n_steps must be >= 1".into())),
            SolverConfig::Rk45 { atol, rtol, .. } if !(atol > 0.0 && rtol > 0.0) => {
                Err(Error::Argument("atol and rtol must be positive".into()))
            }
            SolverConfig::Rk45 { max_steps: 0, .. } => Err(Error::Argument("max_steps must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

fn check_state(x: &[f64], step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver(format!("non-finite state at step {step}")));
    }
    Ok(())
}

/// Euler steps with a callback `(step, t, x, v)` seeing each evaluated state.
pub fn euler_solve_observed<F: VectorField + ?Sized>(
    field: &F,
    x_start: &[f64],
    t0: f64,
    t1: f64,
    n_steps: usize,
    mut observe: impl FnMut(usize, f64, &[f64], &[f64]),
) -> Result<SolveResult> {
    if n_steps == 0 || t0 == t1 {
        return Err(Error::Argument("euler needs n_steps >= 1 and t0 != t1".into()));
    }
    let h = (t1 - t0) / n_steps as f64;
    let mut x = x_start.to_vec();
    for i in 0..n_steps {
        let t = t0 + i as f64 * h;
        let v = field.eval(t, &x)?;
        observe(i, t, &x, &v);
        x.iter_mut().zip(&v).for_each(|(xi, vi)| *xi += h * vi);
        check_state(&x, i)?;
    }
    Ok(SolveResult {
        x,
        trajectory: None,
        nfe: n_steps,
        accepted: n_steps,
        rejected: 0,
    })
}

pub fn euler_solve<F: VectorField + ?Sized>(
    field: &F,
    x_start: &[f64],
    t0: f64,
    t1: f64,
    n_steps: usize,
    record: bool,
) -> Result<SolveResult> {
    let mut traj = Vec::new();
    let mut res = euler_solve_observed(field, x_start, t0, t1, n_steps, |_, t, x, _| {
        if record {
            traj.push((t, x.to_vec()));
        }
    })?;
    if record {
        traj.push((t1, res.x.clone()));
        res.trajectory = Some(traj);
    }
    Ok(res)
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - 0.75 * PI_BETA;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

/// Adaptive Dormand–Prince 5(4) with a PI step controller and FSAL reuse.
///
/// Error norm is the RMS of `err_i / (atol + rtol·max(|x_i|, |x_new_i|))`; a step
/// is accepted when it is at most 1. Each attempted step costs 6 evaluations,
/// plus one for the initial slope.
#[allow(clippy::too_many_arguments)]
pub fn rk45_solve<F: VectorField + ?Sized>(
    field: &F,
    x_start: &[f64],
    t0: f64,
    t1: f64,
    atol: f64,
    rtol: f64,
    max_steps: usize,
    record: bool,
) -> Result<SolveResult> {
    if !(atol > 0.0 && rtol > 0.0) {
        return Err(Error::Argument("atol and rtol must be positive".into()));
    }
    if t0 == t1 {
        return Err(Error::Argument("rk45 needs t0 != t1".into()));
    }
    let n = x_start.len();
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut h = span / 100.0;
    let mut t = t0;
    let mut x = x_start.to_vec();
    let mut k: Vec<Vec<f64>> = vec![field.eval(t, &x)?];
    let mut nfe = 1;
    let (mut accepted, mut rejected) = (0, 0);
    let mut err_old: f64 = 1e-4;
    let mut h_min = h;
    let mut traj = record.then(|| vec![(t, x.clone())]);

    while (t1 - t) * dir > span * 1e-14 {
        if accepted + rejected >= max_steps {
            return Err(Error::Solver(format!(
                "exceeded {max_steps} steps; smallest step {h_min:e} at t={t}"
            )));
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let hs = h * dir;
        k.truncate(1);
        let mut stage = vec![0.0; n];
        for s in 1..7 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate() {
                    acc += A[s][j] * kj[i];
                }
                stage[i] = x[i] + hs * acc;
            }
            let ts = if s == 6 || (last && C[s] == 1.0) { t + hs } else { t + C[s] * hs };
            k.push(field.eval(ts, &stage)?);
            nfe += 1;
        }
        // stage now holds the fifth-order solution (row 6 of A equals b).
        let x_new = stage;
        let mut err = 0.0;
        for i in 0..n {
            let e: f64 = hs * (0..7).map(|j| E[j] * k[j][i]).sum::<f64>();
            let sc = atol + rtol * x[i].abs().max(x_new[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / n.max(1) as f64).sqrt();
        if !err.is_finite() {
            return Err(Error::Solver(format!("non-finite error estimate at t={t}")));
        }
        h_min = h_min.min(h);

        if err <= 1.0 {
            let fac = (SAFETY * err.max(1e-16).powf(-PI_ALPHA) * err_old.powf(PI_BETA)).clamp(FAC_MIN, FAC_MAX);
            err_old = err.max(1e-4);
            t = if last { t1 } else { t + hs };
            x = x_new;
            check_state(&x, accepted)?;
            accepted += 1;
            if let Some(tr) = traj.as_mut() {
                tr.push((t, x.clone()));
            }
            let k7 = k.pop().expect("seven stages");
            k = vec![k7];
            h *= fac;
        } else {
            let fac = (SAFETY * err.powf(-PI_ALPHA)).clamp(FAC_MIN, 1.0);
            rejected += 1;
            h *= fac;
        }
    }
    Ok(SolveResult {
        x,
        trajectory: traj,
        nfe,
        accepted,
        rejected,
    })
}

/// Integrates `t: 0 → 1` with the configured solver.
pub fn solve<F: VectorField + ?Sized>(field: &F, x_start: &[f64], cfg: &SolverConfig, record: bool) -> Result<SolveResult> {
    cfg.validate()?;
    match *cfg {
        SolverConfig::Euler { n_steps } => euler_solve(field, x_start, 0.0, 1.0, n_steps, record),
        SolverConfig::Rk45 { atol, rtol, max_steps } => rk45_solve(field, x_start, 0.0, 1.0, atol, rtol, max_steps, record),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub label: usize,
    pub start: Vec<f64>,
    pub x: Vec<f64>,
    pub trajectory: Option<Vec<(f64, Vec<f64>)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub samples: Vec<GeneratedSample>,
    pub mean_nfe: f64,
}

/// Draws labels from `p(y)` unless `label` is fixed, then integrates prior draws to data.
pub fn sample<R: Rng + ?Sized>(
    model: &BlockFlowModel,
    cfg: &SolverConfig,
    n_samples: usize,
    label: Option<usize>,
    record: bool,
    rng: &mut R,
) -> Result<SampleOutput> {
    let labels: Vec<usize> = (0..n_samples)
        .map(|_| label.unwrap_or_else(|| model.prior.sample_label(rng)))
        .collect();
    sample_with_labels(model, &model.prior, cfg, &labels, record, rng)
}

/// One generated sample per entry of `labels`, starting from `prior`.
pub fn sample_with_labels<R: Rng + ?Sized>(
    model: &BlockFlowModel,
    prior: &BlockPrior,
    cfg: &SolverConfig,
    labels: &[usize],
    record: bool,
    rng: &mut R,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(labels.len());
    let mut nfe = 0usize;
    for &y in labels {
        let start = prior.sample_prior(y, rng)?;
        let field = NetField {
            net: &model.net,
            label: Some(y),
        };
        let res = solve(&field, &start, cfg, record)?;
        nfe += res.nfe;
        samples.push(GeneratedSample {
            label: y,
            start,
            x: res.x,
            trajectory: res.trajectory,
        });
    }
    let mean_nfe = if labels.is_empty() { 0.0 } else { nfe as f64 / labels.len() as f64 };
    Ok(SampleOutput { samples, mean_nfe })
}
