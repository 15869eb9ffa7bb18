use super::kernels::{self, Padding};
use super::{Element, Tensor};
use crate::entropy::logistic;
use crate::error::{Error, Result};

/// Handle of a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A recorded operation. Inputs are tape indices, always smaller than the
/// index of the node that holds the operation.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        pad: Padding,
    },
    ConvTranspose2d {
        input: usize,
        kernel: usize,
        stride: usize,
        pad: Padding,
    },
    AddBias {
        input: usize,
        bias: usize,
    },
    LeakyRelu {
        input: usize,
        slope: f64,
    },
    Clamp {
        input: usize,
        lo: f64,
        hi: f64,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Sum {
        input: usize,
    },
    Mse {
        a: usize,
        b: usize,
    },
    /// Σ −log₂ of the discretized-logistic likelihood, each term capped at `cap_bits`.
    LogisticBits {
        input: usize,
        loc: usize,
        log_scale: usize,
        cap_bits: f64,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::AddBias { .. } => "add_bias",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Clamp { .. } => "clamp",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mse { .. } => "mse",
            Op::LogisticBits { .. } => "logistic_bits",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode gradient tape. Confined to one thread; run one tape per image
/// or batch shard.
#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], keyed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `var`; zeros of the right shape when no path reaches it.
    pub fn get(&self, var: Var) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(contribution.data())
            .for_each(|(a, &c)| *a = *a + c),
        None => *slot = Some(contribution),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in recording order.
    pub fn trace(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// The linear piece each element of every piecewise op sits on: sign for
    /// `leaky_relu`, below/inside/above for `clamp`, capped or not for
    /// `logistic_bits`. Two evaluations with equal signatures lie on one
    /// smooth branch of the recorded function.
    pub fn branch_signature(&self) -> Vec<u8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu { input, .. } => sig.extend(
                    self.nodes[input]
                        .value
                        .data()
                        .iter()
                        .map(|&v| u8::from(v >= T::zero())),
                ),
                Op::Clamp { input, lo, hi } => {
                    let (lo, hi) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
                    sig.extend(self.nodes[input].value.data().iter().map(|&v| {
                        if v < lo {
                            0
                        } else if v > hi {
                            2
                        } else {
                            1
                        }
                    }))
                }
                Op::LogisticBits {
                    input,
                    loc,
                    log_scale,
                    cap_bits,
                } => {
                    let x = &self.nodes[input].value;
                    let (mu, ls) = (&self.nodes[loc].value, &self.nodes[log_scale].value);
                    let c = mu.len();
                    let plane = x.len() / x.shape()[0].max(1) / c.max(1);
                    let cap = T::from_f64_lossy(cap_bits);
                    for (i, chunk) in x.data().chunks(plane.max(1)).enumerate() {
                        let ch = i % c;
                        let scale = ls.data()[ch].exp();
                        sig.extend(chunk.iter().map(|&v| {
                            let bits = logistic::neg_log2_likelihood(v - mu.data()[ch], scale);
                            u8::from(bits > cap || !bits.is_finite())
                        }));
                    }
                }
                _ => {}
            }
        }
        sig
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Move a value off the tape, leaving an empty tensor behind.
    pub fn take_value(&mut self, var: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[var.0].value, Tensor::zeros(vec![0]))
    }

    /// Leaf whose gradient will be computed.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: Padding) -> Result<Var> {
        let value = kernels::conv2d_raw(self.value(input), self.value(kernel), stride, pad)?;
        let rg = self.needs(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: Padding,
    ) -> Result<Var> {
        let value =
            kernels::conv_transpose2d_raw(self.value(input), self.value(kernel), stride, pad)?;
        let rg = self.needs(&[input, kernel]);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input: input.0,
                kernel: kernel.0,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of an order-4 input.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        let [_, c, h, w] = x.dims4()?;
        if b.len() != c {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut value = x.clone();
        for (i, chunk) in value.data_mut().chunks_mut(plane).enumerate() {
            let bias = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bias);
        }
        let rg = self.needs(&[input, bias]);
        Ok(self.push(
            value,
            Op::AddBias {
                input: input.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        let value = super::leaky_relu(self.value(input), s);
        let rg = self.needs(&[input]);
        self.push(
            value,
            Op::LeakyRelu {
                input: input.0,
                slope,
            },
            rg,
        )
    }

    /// Clamp into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        let value = self.value(input).map(|v| v.max(l).min(h));
        let rg = self.needs(&[input]);
        self.push(value, Op::Clamp { input: input.0, lo, hi }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "add")?;
        let mut value = x.clone();
        value
            .data_mut()
            .iter_mut()
            .zip(y.data())
            .for_each(|(v, &w)| *v = *v + w);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::from_f64_lossy(factor);
        let value = self.value(input).map(|v| v * f);
        let rg = self.needs(&[input]);
        self.push(
            value,
            Op::Scale {
                input: input.0,
                factor,
            },
            rg,
        )
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(&[input]);
        self.push(value, Op::Sum { input: input.0 }, rg)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::scalar(super::mse(self.value(a), self.value(b))?);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mse { a: a.0, b: b.0 }, rg))
    }

    /// Total bits `Σ min(−log₂ p(v), cap_bits)` of an order-4 input under a
    /// per-channel discretized logistic with location `loc[c]` and scale
    /// `exp(log_scale[c])`. Returns the node and the number of capped terms.
    ///
    /// Capped terms still pass the uncapped gradient, which always points
    /// toward higher likelihood.
    pub fn logistic_bits(
        &mut self,
        input: Var,
        loc: Var,
        log_scale: Var,
        cap_bits: f64,
    ) -> Result<(Var, usize)> {
        let x = self.value(input);
        let [_, c, h, w] = x.dims4()?;
        let (mu, ls) = (self.value(loc), self.value(log_scale));
        if mu.len() != c || ls.len() != c {
            return Err(Error::ShapeMismatch {
                op: "logistic_bits",
                left: x.shape().to_vec(),
                right: mu.shape().to_vec(),
            });
        }
        let cap = T::from_f64_lossy(cap_bits);
        let plane = h * w;
        let mut total = T::zero();
        let mut capped = 0usize;
        for (i, chunk) in x.data().chunks(plane).enumerate() {
            let ch = i % c;
            let scale = ls.data()[ch].exp();
            for &v in chunk {
                let bits = logistic::neg_log2_likelihood(v - mu.data()[ch], scale);
                if bits > cap || !bits.is_finite() {
                    capped += 1;
                    total = total + cap;
                } else {
                    total = total + bits;
                }
            }
        }
        let rg = self.needs(&[input, loc, log_scale]);
        let var = self.push(
            Tensor::scalar(total),
            Op::LogisticBits {
                input: input.0,
                loc: loc.0,
                log_scale: log_scale.0,
                cap_bits,
            },
            rg,
        );
        Ok((var, capped))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::rejected("backward root is not on this tape"))?;
        if !root_node.value.is_scalar() {
            return Err(Error::rejected(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_node.value.shape().to_vec(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.op == Op::Leaf {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(Error::divergence(
                    format!("backward node {i} ({})", node.op.name()),
                    "non-finite gradient",
                ));
            }
            self.propagate(&node.op, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn propagate(&self, op: &Op, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |idx: usize| &self.nodes[idx].value;
        match *op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                if self.wants(input) {
                    let dx = kernels::conv2d_grad_input(g, val(input), val(kernel), stride, pad)?;
                    accumulate(&mut grads[input], dx);
                }
                if self.wants(kernel) {
                    let dw = kernels::conv2d_grad_kernel(g, val(input), val(kernel), stride, pad)?;
                    accumulate(&mut grads[kernel], dw);
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                if self.wants(input) {
                    let dx = kernels::conv_transpose2d_grad_input(
                        g,
                        val(input),
                        val(kernel),
                        stride,
                        pad,
                    )?;
                    accumulate(&mut grads[input], dx);
                }
                if self.wants(kernel) {
                    let dw = kernels::conv_transpose2d_grad_kernel(
                        g,
                        val(input),
                        val(kernel),
                        stride,
                        pad,
                    )?;
                    accumulate(&mut grads[kernel], dw);
                }
            }
            Op::AddBias { input, bias } => {
                if self.wants(bias) {
                    let c = val(bias).len();
                    let [_, _, h, w] = g.dims4()?;
                    let mut db = Tensor::zeros(val(bias).shape().to_vec());
                    for (i, chunk) in g.data().chunks(h * w).enumerate() {
                        let s: T = chunk.iter().copied().sum();
                        db.data_mut()[i % c] = db.data()[i % c] + s;
                    }
                    accumulate(&mut grads[bias], db);
                }
                if self.wants(input) {
                    accumulate(&mut grads[input], g.clone());
                }
            }
            Op::LeakyRelu { input, slope } => {
                if self.wants(input) {
                    let s = T::from_f64_lossy(slope);
                    let x = val(input);
                    let mut dx = g.clone();
                    dx.data_mut()
                        .iter_mut()
                        .zip(x.data())
                        .for_each(|(d, &v)| {
                            if v <= T::zero() {
                                *d = *d * s
                            }
                        });
                    accumulate(&mut grads[input], dx);
                }
            }
            Op::Clamp { input, lo, hi } => {
                if self.wants(input) {
                    let (l, h) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
                    let mut dx = g.clone();
                    dx.data_mut()
                        .iter_mut()
                        .zip(val(input).data())
                        .for_each(|(d, &v)| {
                            if v < l || v > h {
                                *d = T::zero()
                            }
                        });
                    accumulate(&mut grads[input], dx);
                }
            }
            Op::Add { a, b } => {
                if self.wants(a) {
                    accumulate(&mut grads[a], g.clone());
                }
                if self.wants(b) {
                    accumulate(&mut grads[b], g.clone());
                }
            }
            Op::Scale { input, factor } => {
                if self.wants(input) {
                    let f = T::from_f64_lossy(factor);
                    accumulate(&mut grads[input], g.map(|v| v * f));
                }
            }
            Op::Sum { input } => {
                if self.wants(input) {
                    accumulate(
                        &mut grads[input],
                        Tensor::full(val(input).shape().to_vec(), g.item()),
                    );
                }
            }
            Op::Mse { a, b } => {
                let (x, y) = (val(a), val(b));
                let coef = T::from_f64_lossy(2.0) * g.item() / T::from_usize(x.len()).unwrap();
                let diff = Tensor::new(
                    x.shape().to_vec(),
                    x.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&p, &q)| coef * (p - q))
                        .collect(),
                )?;
                if self.wants(b) {
                    accumulate(&mut grads[b], diff.map(|v| -v));
                }
                if self.wants(a) {
                    accumulate(&mut grads[a], diff);
                }
            }
            Op::LogisticBits {
                input,
                loc,
                log_scale,
                ..
            } => {
                let x = val(input);
                let (mu, ls) = (val(loc), val(log_scale));
                let c = mu.len();
                let [_, _, h, w] = x.dims4()?;
                let gs = g.item();
                let mut dx = Tensor::zeros(x.shape().to_vec());
                let mut dmu = vec![T::zero(); c];
                let mut dls = vec![T::zero(); c];
                for (i, (chunk, dchunk)) in x
                    .data()
                    .chunks(h * w)
                    .zip(dx.data_mut().chunks_mut(h * w))
                    .enumerate()
                {
                    let ch = i % c;
                    let scale = ls.data()[ch].exp();
                    let (mut acc_mu, mut acc_ls) = (T::zero(), T::zero());
                    for (&v, d) in chunk.iter().zip(dchunk.iter_mut()) {
                        let (dv, dlog_scale) =
                            logistic::neg_log2_likelihood_grad(v - mu.data()[ch], scale);
                        *d = gs * dv;
                        acc_mu = acc_mu - dv;
                        acc_ls = acc_ls + dlog_scale;
                    }
                    dmu[ch] = dmu[ch] + gs * acc_mu;
                    dls[ch] = dls[ch] + gs * acc_ls;
                }
                if self.wants(input) {
                    accumulate(&mut grads[input], dx);
                }
                if self.wants(loc) {
                    accumulate(&mut grads[loc], Tensor::new(mu.shape().to_vec(), dmu)?);
                }
                if self.wants(log_scale) {
                    accumulate(&mut grads[log_scale], Tensor::new(ls.shape().to_vec(), dls)?);
                }
            }
        }
        Ok(())
    }
}
