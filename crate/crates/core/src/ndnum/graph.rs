//! Append-only tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the nodes in strict reverse order and sums gradient contributions on fan-out.

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Relu(Var),
    Silu(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumLast(Var),
    MaxLast(Var),
    ConcatLast(Vec<Var>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Exp,
    Log,
    Square,
    Sqrt,
    Abs,
    Relu,
    Silu,
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or `None` when `v` does not track gradients.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.wrt(v) {
            Some(g) => t.accumulate_grad(g),
            None => Err(Error::Contract(format!("node {} carries no gradient", v.0))),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, tracked: bool) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records `t` as a leaf. Tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            tracked: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked leaf built from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(Op::MatMul(a, b), vec![m, n], out, tr)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::Dimension {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.value(b);
        let nb = bv.len();
        Ok(self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect())
    }

    /// `a + b`, where `b`'s shape is a trailing suffix of `a`'s (scalar included).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let tr = self.tracked(a) || self.tracked(b);
        self.push(Op::Add(a, b), self.shape(a).to_vec(), out, tr)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let tr = self.tracked(a) || self.tracked(b);
        self.push(Op::Sub(a, b), self.shape(a).to_vec(), out, tr)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let tr = self.tracked(a) || self.tracked(b);
        self.push(Op::Mul(a, b), self.shape(a).to_vec(), out, tr)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), self.shape(a).to_vec(), out, self.tracked(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x + c).collect();
        self.push(Op::AddScalar(a), self.shape(a).to_vec(), out, self.tracked(a))
    }

    pub fn unary(&mut self, op: ElemOp, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out: Vec<f64> = match op {
            ElemOp::Exp => x.iter().map(|v| v.exp()).collect(),
            ElemOp::Log => {
                if let Some(bad) = x.iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                x.iter().map(|v| v.ln()).collect()
            }
            ElemOp::Square => x.iter().map(|v| v * v).collect(),
            ElemOp::Sqrt => {
                if let Some(bad) = x.iter().find(|&&v| v < 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("negative input {bad}"),
                    });
                }
                x.iter().map(|v| v.sqrt()).collect()
            }
            ElemOp::Abs => x.iter().map(|v| v.abs()).collect(),
            ElemOp::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            ElemOp::Silu => x.iter().map(|&v| v * sigmoid(v)).collect(),
        };
        let node = match op {
            ElemOp::Exp => Op::Exp(a),
            ElemOp::Log => Op::Log(a),
            ElemOp::Square => Op::Square(a),
            ElemOp::Sqrt => Op::Sqrt(a),
            ElemOp::Abs => Op::Abs(a),
            ElemOp::Relu => Op::Relu(a),
            ElemOp::Silu => Op::Silu(a),
        };
        self.push(node, self.shape(a).to_vec(), out, self.tracked(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Log, a)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Square, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Sqrt, a)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Abs, a)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Relu, a)
    }
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(ElemOp::Silu, a)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v.clamp(lo, hi)).collect();
        self.push(Op::Clamp(a, lo, hi), self.shape(a).to_vec(), out, self.tracked(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(Op::Sum(a), vec![], vec![s], self.tracked(a))
    }

    /// Reduces the last axis by summation: `[.., n] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::Argument("sum_last on scalar".into()))?;
        let out = self.value(a).chunks(n).map(|c| c.iter().sum()).collect();
        self.push(Op::SumLast(a), shape[..shape.len() - 1].to_vec(), out, self.tracked(a))
    }

    /// Reduces the last axis by maximum: `[.., n] -> [..]`.
    pub fn max_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::Argument("max_last on scalar".into()))?;
        let out = self
            .value(a)
            .chunks(n)
            .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        self.push(Op::MaxLast(a), shape[..shape.len() - 1].to_vec(), out, self.tracked(a))
    }

    /// Concatenates 2-D nodes along columns.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Argument("empty concat".into()))?;
        let rows = self.shape(*first)[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Dimension {
                    op: "concat_last",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let tr = parts.iter().any(|&p| self.tracked(p));
        self.push(Op::ConcatLast(parts.to_vec()), vec![rows, cols], out, tr)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else {
                if matches!(node.op, Op::Leaf) {
                    grads[id] = Some(vec![0.0; node.value.len()]);
                }
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Interior nodes keep their gradients; untracked ones stay `None`.
        for (n, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if n.tracked && g.is_none() {
                *g = Some(vec![0.0; n.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let mut acc = |v: Var, f: &dyn Fn(usize) -> f64| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            for (i, s) in slot.iter_mut().enumerate() {
                *s += f(i);
            }
        };
        // Reduces a full-size gradient onto a trailing-broadcast operand.
        let reduce = |full: &dyn Fn(usize) -> f64, nb: usize| -> Vec<f64> {
            let mut out = vec![0.0; nb];
            for i in 0..g.len() {
                out[i % nb] += full(i);
            }
            out
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                if self.nodes[a.0].tracked {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, &|i| da[i]);
                }
                if self.nodes[b.0].tracked {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += aip * gv;
                            }
                        }
                    }
                    acc(*b, &|i| db[i]);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &|i| g[i]);
                if self.nodes[b.0].tracked {
                    let nb = val(*b).len();
                    let rb = reduce(&|i| sign * g[i], nb);
                    acc(*b, &|i| rb[i]);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                acc(*a, &|i| g[i] * bv[i % nb]);
                if self.nodes[b.0].tracked {
                    let rb = reduce(&|i| g[i] * av[i], nb);
                    acc(*b, &|i| rb[i]);
                }
            }
            Op::Scale(a, c) => acc(*a, &|i| g[i] * c),
            Op::AddScalar(a) => acc(*a, &|i| g[i]),
            Op::Exp(a) => acc(*a, &|i| g[i] * node.value[i]),
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &|i| g[i] / av[i])
            }
            Op::Square(a) => {
                let av = val(*a);
                acc(*a, &|i| 2.0 * av[i] * g[i])
            }
            Op::Sqrt(a) => acc(*a, &|i| {
                let s = node.value[i];
                if s > 0.0 {
                    g[i] / (2.0 * s)
                } else {
                    0.0
                }
            }),
            Op::Abs(a) => {
                let av = val(*a);
                acc(*a, &|i| g[i] * av[i].signum() * f64::from(av[i] != 0.0))
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &|i| if av[i] > 0.0 { g[i] } else { 0.0 })
            }
            Op::Silu(a) => {
                let av = val(*a);
                acc(*a, &|i| {
                    let s = sigmoid(av[i]);
                    g[i] * s * (1.0 + av[i] * (1.0 - s))
                })
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                acc(*a, &|i| if av[i] >= *lo && av[i] <= *hi { g[i] } else { 0.0 })
            }
            Op::Sum(a) => acc(*a, &|_| g[0]),
            Op::SumLast(a) => {
                let n = *self.nodes[a.0].shape.last().unwrap();
                acc(*a, &|i| g[i / n])
            }
            Op::MaxLast(a) => {
                let av = val(*a);
                let n = *self.nodes[a.0].shape.last().unwrap();
                // Gradient goes to the first maximizer of each row.
                let mut arg = vec![0usize; g.len()];
                for (r, row) in av.chunks(n).enumerate() {
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    arg[r] = best;
                }
                acc(*a, &|i| if i % n == arg[i / n] { g[i / n] } else { 0.0 })
            }
            Op::ConcatLast(parts) => {
                let rows = node.shape[0];
                let cols = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let c = self.nodes[p.0].shape[1];
                    acc(p, &|i| {
                        let (r, j) = (i / c, i % c);
                        g[r * cols + off + j]
                    });
                    off += c;
                }
                debug_assert_eq!(rows * cols, g.len());
            }
        }
    }
}
