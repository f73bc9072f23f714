use super::graph::{Gradients, Graph, Var};
use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Fully connected network; hidden layers share one activation, the output layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    /// `(weight [in × out], bias [out])` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
    pub activation: Activation,
}

/// Graph handles for one binding of an [`Mlp`]'s parameters.
#[derive(Clone, Debug)]
pub struct MlpVars(Vec<(Var, Var)>);

impl Mlp {
    /// Uniform(±1/√fan_in) initialization for weights and biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Argument(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fi, fo) = (w[0], w[1]);
                let bound = 1.0 / (fi as f64).sqrt();
                let wt: Vec<f64> = (0..fi * fo).map(|_| rng.random_range(-bound..bound)).collect();
                let bt: Vec<f64> = (0..fo).map(|_| rng.random_range(-bound..bound)).collect();
                Ok((
                    Tensor::new(vec![fi, fo], wt)?.tracked(),
                    Tensor::new(vec![fo], bt)?.tracked(),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().0.shape()[1]
    }

    /// Zeroes the final layer so the network outputs 0 everywhere.
    pub fn zero_output(&mut self) {
        let (w, b) = self.layers.last_mut().unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        b.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn bind(&self, g: &mut Graph) -> MlpVars {
        MlpVars(self.layers.iter().map(|(w, b)| (g.leaf(w), g.leaf(b))).collect())
    }

    pub fn forward(&self, g: &mut Graph, vars: &MlpVars, x: Var) -> Result<Var> {
        let mut h = x;
        let last = vars.0.len() - 1;
        for (i, &(w, b)) in vars.0.iter().enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add(z, b)?;
            if i < last {
                h = match self.activation {
                    Activation::Silu => g.silu(h)?,
                    Activation::Relu => g.relu(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Adds this binding's gradients into the parameter tensors.
    pub fn absorb(&mut self, grads: &Gradients, vars: &MlpVars) -> Result<()> {
        for ((w, b), &(wv, bv)) in self.layers.iter_mut().zip(&vars.0) {
            if w.requires_grad() {
                grads.accumulate_into(wv, w)?;
            }
            if b.requires_grad() {
                grads.accumulate_into(bv, b)?;
            }
        }
        Ok(())
    }

    /// Graph-free forward pass over `rows` stacked inputs.
    pub fn infer(&self, input: &[f64], rows: usize) -> Vec<f64> {
        let mut h = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (fi, fo) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0; rows * fo];
            matmul_into(&h, w.data(), &mut out, rows, fi, fo);
            for row in out.chunks_mut(fo) {
                for (v, bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                    if i < last {
                        *v = self.activation.apply(*v);
                    }
                }
            }
            h = out;
        }
        h
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }
}
