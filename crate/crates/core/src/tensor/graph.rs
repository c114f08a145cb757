//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables together with
//! the forward values. [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every recorded node, collected per parameter name.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, Activation, BatchNormCache, BatchNormStats};
use super::Tensor;
use crate::error::{DehazeError, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Constant,
    Param(String),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
    },
    BatchNormTrain {
        gamma: usize,
        beta: usize,
        x: usize,
        cache: BatchNormCache,
    },
    BatchNormInfer {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Tensor,
        var: Tensor,
        eps: f64,
    },
    Activate {
        x: usize,
        kind: Activation,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Affine {
        x: usize,
        scale: f64,
    },
    Reshape {
        x: usize,
    },
    SquaredError {
        a: usize,
        b: usize,
        divisor: f64,
    },
    NegLog {
        p: usize,
        clamp: f64,
        complement: bool,
    },
    WeightedSum {
        terms: Vec<(usize, f64)>,
    },
    Dot {
        x: usize,
        weights: Tensor,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Input | Op::Constant | Op::Param(_) => Vec::new(),
            Op::Conv2d { x, w, b, .. } | Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormInfer { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Activate { x, .. } | Op::Affine { x, .. } | Op::Reshape { x } | Op::Dot { x, .. } => vec![*x],
            Op::Sub { a, b } | Op::Add { a, b } | Op::SquaredError { a, b, .. } => vec![*a, *b],
            Op::NegLog { p, .. } => vec![*p],
            Op::WeightedSum { terms } => terms.iter().map(|(t, _)| *t).collect(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
    frozen: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the seeded output with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.nodes.get(v.index).and_then(Option::as_ref)
    }

    /// Gradients of every parameter that influenced the output, by name.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: false,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(DehazeError::State("variable was not recorded on this graph".to_owned()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let requires_grad = match &op {
            Op::Input | Op::Param(_) => true,
            Op::Constant => false,
            other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    /// A leaf that never receives a gradient (data, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    /// A named parameter leaf. Registering the same name twice returns the
    /// first variable so that shared uses accumulate into one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        if let Some(&index) = self.params.get(name) {
            return Ok(Var { graph: self.id, index });
        }
        let op = if self.frozen {
            Op::Constant
        } else {
            Op::Param(name.to_owned())
        };
        let v = self.push(value.clone(), op, name)?;
        self.params.insert(name.to_owned(), v.index);
        Ok(v)
    }

    /// While frozen, newly registered parameters are recorded as constants
    /// and receive no gradient.
    pub fn set_params_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let out = ops::conv2d_forward(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
            stride,
        )?;
        self.push(
            out,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                stride,
            },
            "conv2d",
        )
    }

    /// Batch norm with the batch's own statistics; the statistics are returned
    /// so the caller can fold them into running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchNormStats)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (out, cache, stats) =
            ops::batch_norm_train_forward(&self.nodes[xi].value, &self.nodes[gi].value, &self.nodes[bi].value, eps)?;
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x: xi,
                gamma: gi,
                beta: bi,
                cache,
            },
            "batch_norm",
        )?;
        Ok((v, stats))
    }

    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor,
        var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let out = ops::batch_norm_infer_forward(
            &self.nodes[xi].value,
            &self.nodes[gi].value,
            &self.nodes[bi].value,
            mean,
            var,
            eps,
        )?;
        self.push(
            out,
            Op::BatchNormInfer {
                x: xi,
                gamma: gi,
                beta: bi,
                mean: mean.clone(),
                var: var.clone(),
                eps,
            },
            "batch_norm",
        )
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(|v| kind.apply(v));
        self.push(out, Op::Activate { x: xi, kind }, "activation")
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let out = ops::dense_forward(&self.nodes[xi].value, &self.nodes[wi].value, &self.nodes[bi].value)?;
        self.push(out, Op::Dense { x: xi, w: wi, b: bi }, "dense")
    }

    /// Elementwise `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ai].value.zip_map(&self.nodes[bi].value, |x, y| x - y)?;
        self.push(out, Op::Sub { a: ai, b: bi }, "elementwise subtraction")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ai].value.zip_map(&self.nodes[bi].value, |x, y| x + y)?;
        self.push(out, Op::Add { a: ai, b: bi }, "elementwise addition")
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.map(|v| scale * v + shift);
        self.push(out, Op::Affine { x: xi, scale }, "affine")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.reshape(shape)?;
        self.push(out, Op::Reshape { x: xi }, "reshape")
    }

    /// `N x ...` to `N x F`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x)?.shape().to_vec();
        let n = shape[0];
        let f = shape[1..].iter().product();
        self.reshape(x, &[n, f])
    }

    /// Scalar `sum((a - b)^2) / divisor`.
    pub fn squared_error(&mut self, a: Var, b: Var, divisor: f64) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if !(divisor > 0.0) {
            return Err(DehazeError::invalid("squared error divisor must be positive"));
        }
        let av = &self.nodes[ai].value;
        let bv = &self.nodes[bi].value;
        av.same_shape(bv, "squared error operands")?;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(
            Tensor::scalar(s / divisor),
            Op::SquaredError { a: ai, b: bi, divisor },
            "squared error",
        )
    }

    /// Scalar `sum(-ln p)` with `p` clamped to `[clamp, 1 - clamp]`; gradients
    /// vanish where the clamp is active.
    pub fn neg_log_sum(&mut self, p: Var, clamp: f64) -> Result<Var> {
        self.neg_log_impl(p, clamp, false)
    }

    /// Scalar `sum(-ln(1 - p))` with the same clamping rule.
    pub fn neg_log_complement_sum(&mut self, p: Var, clamp: f64) -> Result<Var> {
        self.neg_log_impl(p, clamp, true)
    }

    fn neg_log_impl(&mut self, p: Var, clamp: f64, complement: bool) -> Result<Var> {
        let pi = self.idx(p)?;
        let s: f64 = self.nodes[pi]
            .value
            .data()
            .iter()
            .map(|&v| {
                let c = v.clamp(clamp, 1.0 - clamp);
                if complement {
                    -(1.0 - c).ln()
                } else {
                    -c.ln()
                }
            })
            .sum();
        self.push(
            Tensor::scalar(s),
            Op::NegLog {
                p: pi,
                clamp,
                complement,
            },
            "negative log",
        )
    }

    /// Scalar `sum_i w_i * x_i` over one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut idx = Vec::with_capacity(terms.len());
        let mut s = 0.0;
        for &(v, w) in terms {
            let i = self.idx(v)?;
            s += w * self.nodes[i].value.item()?;
            idx.push((i, w));
        }
        self.push(Tensor::scalar(s), Op::WeightedSum { terms: idx }, "weighted sum")
    }

    /// Scalar `sum(x * weights)` against a constant tensor.
    pub fn dot(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        xv.same_shape(weights, "dot operands")?;
        let s: f64 = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.push(
            Tensor::scalar(s),
            Op::Dot {
                x: xi,
                weights: weights.clone(),
            },
            "dot",
        )
    }

    /// Reverse pass from a one-element output with seed 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let i = self.idx(output)?;
        let shape = self.nodes[i].value.shape().to_vec();
        if self.nodes[i].value.len() != 1 {
            return Err(DehazeError::dims(format!(
                "backward without a seed needs a one-element output, shape is {shape:?}"
            )));
        }
        self.backward_with_seed(output, Tensor::full(&shape, 1.0))
    }

    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        let out = self.idx(output)?;
        self.nodes[out].value.same_shape(&seed, "seed gradient")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(seed);
        let mut params = BTreeMap::new();

        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let nodes = &self.nodes;
            let needs = |target: usize| nodes[target].requires_grad;
            let mut send = |target: usize, contribution: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            };
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input | Op::Constant => {}
                Op::Param(name) => {
                    params.insert(name.clone(), g.clone());
                }
                Op::Conv2d { x, w, b, stride } => {
                    let (gx, gw, gb) = ops::conv2d_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*w].value,
                        *stride,
                        &g,
                        needs(*x),
                        needs(*w),
                    )?;
                    if let Some(gx) = gx {
                        send(*x, gx);
                    }
                    if let Some(gw) = gw {
                        send(*w, gw);
                    }
                    send(*b, gb);
                }
                Op::BatchNormTrain { x, gamma, beta, cache } => {
                    let (gx, gg, gb) = ops::batch_norm_train_backward(&self.nodes[*gamma].value, cache, &g)?;
                    send(*x, gx);
                    send(*gamma, gg);
                    send(*beta, gb);
                }
                Op::BatchNormInfer {
                    x,
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    let (gx, gg, gb) = ops::batch_norm_infer_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*gamma].value,
                        mean,
                        var,
                        *eps,
                        &g,
                    )?;
                    send(*x, gx);
                    send(*gamma, gg);
                    send(*beta, gb);
                }
                Op::Activate { x, kind } => {
                    let xv = &self.nodes[*x].value;
                    let yv = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data().iter().zip(yv.data()))
                        .map(|(gi, (&xi, &yi))| gi * kind.derivative(xi, yi))
                        .collect();
                    send(*x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Dense { x, w, b } => {
                    let (gx, gw, gb) = ops::dense_backward(&self.nodes[*x].value, &self.nodes[*w].value, &g)?;
                    send(*x, gx);
                    send(*w, gw);
                    send(*b, gb);
                }
                Op::Sub { a, b } => {
                    send(*b, g.map(|v| -v));
                    send(*a, g.clone());
                }
                Op::Add { a, b } => {
                    send(*b, g.clone());
                    send(*a, g.clone());
                }
                Op::Affine { x, scale } => {
                    send(*x, g.map(|v| v * scale));
                }
                Op::Reshape { x } => {
                    send(*x, g.reshape(self.nodes[*x].value.shape())?);
                }
                Op::SquaredError { a, b, divisor } => {
                    let s = g.item()? * 2.0 / divisor;
                    let diff = self.nodes[*a]
                        .value
                        .zip_map(&self.nodes[*b].value, |x, y| s * (x - y))?;
                    send(*b, diff.map(|v| -v));
                    send(*a, diff);
                }
                Op::NegLog { p, clamp, complement } => {
                    let s = g.item()?;
                    let (lo, hi) = (*clamp, 1.0 - *clamp);
                    let gp = self.nodes[*p].value.map(|v| {
                        if v < lo || v > hi {
                            0.0
                        } else if *complement {
                            s / (1.0 - v)
                        } else {
                            -s / v
                        }
                    });
                    send(*p, gp);
                }
                Op::WeightedSum { terms } => {
                    let s = g.item()?;
                    for &(t, w) in terms {
                        send(t, Tensor::scalar(s * w));
                    }
                }
                Op::Dot { x, weights } => {
                    let s = g.item()?;
                    send(*x, weights.map(|v| v * s));
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            nodes: grads,
            params,
        })
    }
}
