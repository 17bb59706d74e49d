//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are appended in execution order, which is a topological order of
//! the computation DAG. [`Tape::backward`] walks the records in exact reverse,
//! accumulating adjoints additively so fan-out is handled by summation.

use crate::error::{arg_err, dim_err, Result};
use crate::ops::{self, PoolKind};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where batch normalization takes its statistics from.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a, T> {
    /// Current batch statistics (training).
    Batch { eps: T },
    /// Stored running statistics (inference).
    Running { mean: &'a [T], var: &'a [T], eps: T },
}

/// Batch mean and unbiased batch variance per channel, returned by a
/// training-mode batch norm so the caller can update its running estimates.
#[derive(Debug, Clone)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Pool2d {
        input: Var,
        kind: PoolKind,
        k: usize,
        stride: usize,
        padding: usize,
        argmax: Option<Vec<usize>>,
    },
    GlobalPool {
        input: Var,
        kind: PoolKind,
        argmax: Option<Vec<usize>>,
    },
    ChannelPool {
        input: Var,
        kind: PoolKind,
        argmax: Option<Vec<usize>>,
    },
    Concat {
        parts: Vec<Var>,
        channels: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaskMul {
        input: Var,
        mask: Vec<T>,
    },
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    adjoint_fault: Option<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            adjoint_fault: None,
        }
    }

    /// Test fixture: scales every propagated adjoint by `factor`, producing
    /// deliberately wrong gradients for negative-control checks.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, factor: T) {
        self.adjoint_fault = Some(factor);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product; either side may broadcast (attention gates).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).map(|x| x * s);
        self.push(y, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = ops::relu(self.value(a));
        self.push(y, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = ops::sigmoid(self.value(a));
        self.push(y, Op::Sigmoid(a), &[a])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        ))
    }

    pub fn pool2d(&mut self, input: Var, kind: PoolKind, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let pooled = ops::pool2d(self.value(input), kind, k, stride, padding)?;
        Ok(self.push(
            pooled.output,
            Op::Pool2d {
                input,
                kind,
                k,
                stride,
                padding,
                argmax: pooled.argmax,
            },
            &[input],
        ))
    }

    pub fn global_pool(&mut self, input: Var, kind: PoolKind) -> Result<Var> {
        let pooled = ops::global_pool(self.value(input), kind)?;
        Ok(self.push(
            pooled.output,
            Op::GlobalPool {
                input,
                kind,
                argmax: pooled.argmax,
            },
            &[input],
        ))
    }

    /// Mean or max across channels at every pixel, `[N,C,H,W] -> [N,1,H,W]`.
    pub fn channel_pool(&mut self, input: Var, kind: PoolKind) -> Result<Var> {
        let pooled = ops::channel_pool(self.value(input), kind)?;
        Ok(self.push(
            pooled.output,
            Op::ChannelPool {
                input,
                kind,
                argmax: pooled.argmax,
            },
            &[input],
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_channels(&values)?;
        let channels = values.iter().map(|v| v.shape()[1]).collect();
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                channels,
            },
            parts,
        ))
    }

    /// Per-channel normalization of `[N,C,H,W]` followed by `gamma * xhat + beta`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(dim_err!(
                "batch norm over {} channels given gamma {:?}, beta {:?}",
                c,
                g.shape(),
                b.shape()
            ));
        }
        let area = h * w;
        let count = n * area;
        let xd = x.data();
        let (mean, var, eps, moments) = match stats {
            NormStats::Batch { eps } => {
                if count < 2 {
                    return Err(crate::Error::DegenerateBatch(format!(
                        "batch norm statistics over {count} element(s) per channel (shape {:?})",
                        x.shape()
                    )));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv_count = T::one() / T::from_f64(count as f64);
                for ch in 0..c {
                    let mut acc = T::zero();
                    for s in 0..n {
                        for &v in &xd[(s * c + ch) * area..(s * c + ch + 1) * area] {
                            acc = acc + v;
                        }
                    }
                    let mu = acc * inv_count;
                    let mut sq = T::zero();
                    for s in 0..n {
                        for &v in &xd[(s * c + ch) * area..(s * c + ch + 1) * area] {
                            sq = sq + (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq * inv_count;
                }
                let bessel = T::from_f64(count as f64 / (count - 1) as f64);
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|&v| v * bessel).collect(),
                };
                (mean, var, eps, Some(moments))
            }
            NormStats::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err!("running statistics do not cover {} channels", c));
                }
                (mean.to_vec(), var.to_vec(), eps, None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        let (gd, bd) = (g.data(), b.data());
        for s in 0..n {
            for ch in 0..c {
                let range = (s * c + ch) * area..(s * c + ch + 1) * area;
                for i in range {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    y[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        let batch_stats = moments.is_some();
        let out = self.push(
            Tensor::new(&shape, y)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        );
        Ok((out, moments))
    }

    /// Multiplies by a fixed mask (inverted dropout keeps `1/(1-p)` for survivors).
    pub fn mask_mul(&mut self, input: Var, mask: Vec<T>) -> Result<Var> {
        let x = self.value(input);
        if mask.len() != x.len() {
            return Err(dim_err!("mask of {} for tensor of {}", mask.len(), x.len()));
        }
        let y = Tensor::new(
            x.shape(),
            x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        )?;
        Ok(self.push(y, Op::MaskMul { input, mask }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(input).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(input), &[input]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = ops::transpose(self.value(a))?;
        Ok(self.push(y, Op::Transpose(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let y = Tensor::scalar(x.sum() / T::from_f64(x.len() as f64));
        self.push(y, Op::Mean(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let y = ops::softmax(self.value(a))?;
        Ok(self.push(y, Op::Softmax(a), &[a]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (n, k) = x.dims2()?;
        if labels.len() != n {
            return Err(dim_err!("{} labels for {} logit rows", labels.len(), n));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(arg_err!("label {} out of range for {} classes", bad, k));
        }
        let lse = ops::log_sum_exp_rows(x)?;
        let mut total = T::zero();
        for (row, (&label, &l)) in labels.iter().zip(&lse).enumerate() {
            total = total + (l - x.data()[row * k + label]);
        }
        let loss = total / T::from_f64(n as f64);
        let probs = ops::softmax(x)?.into_data();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Propagates `d loss / d v` to every recorded value that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(arg_err!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, mut g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        if let Some(f) = self.adjoint_fault {
            g = g.map(|x| x * f);
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, ops::sum_to_shape(g, self.value(*a).shape())?)?;
                self.accumulate(grads, *b, ops::sum_to_shape(g, self.value(*b).shape())?)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, ops::sum_to_shape(g, self.value(*a).shape())?)?;
                let neg = g.map(|x| -x);
                self.accumulate(grads, *b, ops::sum_to_shape(&neg, self.value(*b).shape())?)?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = ops::broadcast_binary(g, vb, |x, y| x * y)?;
                    self.accumulate(grads, *a, ops::sum_to_shape(&ga, va.shape())?)?;
                }
                if self.requires_grad(*b) {
                    let gb = ops::broadcast_binary(g, va, |x, y| x * y)?;
                    self.accumulate(grads, *b, ops::sum_to_shape(&gb, vb.shape())?)?;
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s))?;
            }
            Op::Relu(a) => {
                let gx = g.zip_map(self.value(*a), |gy, x| if x > T::zero() { gy } else { T::zero() })?;
                self.accumulate(grads, *a, gx)?;
            }
            Op::Sigmoid(a) => {
                let gx = g.zip_map(&node.value, |gy, y| gy * y * (T::one() - y))?;
                self.accumulate(grads, *a, gx)?;
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (gi, gk) = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *padding,
                    self.requires_grad(*input),
                )?;
                if let Some(gi) = gi {
                    self.accumulate(grads, *input, gi)?;
                }
                self.accumulate(grads, *kernel, gk)?;
            }
            Op::Pool2d {
                input,
                kind,
                k,
                stride,
                padding,
                argmax,
            } => {
                let gi = ops::pool2d_backward(
                    self.value(*input).shape(),
                    g,
                    *kind,
                    *k,
                    *stride,
                    *padding,
                    argmax.as_deref(),
                )?;
                self.accumulate(grads, *input, gi)?;
            }
            Op::GlobalPool { input, kind, argmax } => {
                let gi = ops::global_pool_backward(self.value(*input).shape(), g, *kind, argmax.as_deref())?;
                self.accumulate(grads, *input, gi)?;
            }
            Op::ChannelPool { input, kind, argmax } => {
                let gi = ops::channel_pool_backward(self.value(*input).shape(), g, *kind, argmax.as_deref())?;
                self.accumulate(grads, *input, gi)?;
            }
            Op::Concat { parts, channels } => {
                for (part, gp) in parts.iter().zip(ops::split_channels(g, channels)?) {
                    self.accumulate(grads, *part, gp)?;
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = g.dims4()?;
                let area = h * w;
                let count = T::from_f64((n * area) as f64);
                let gd = g.data();
                let gamma_v = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        for j in (s * c + ch) * area..(s * c + ch + 1) * area {
                            dgamma[ch] = dgamma[ch] + gd[j] * xhat[j];
                            dbeta[ch] = dbeta[ch] + gd[j];
                        }
                    }
                }
                if self.requires_grad(*input) {
                    let mut dx = vec![T::zero(); gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let scale = gamma_v[ch] * inv_std[ch];
                            for j in (s * c + ch) * area..(s * c + ch + 1) * area {
                                dx[j] = if *batch_stats {
                                    // dgamma/dbeta are exactly the sums of dy*xhat and dy
                                    scale * (gd[j] - (dbeta[ch] + xhat[j] * dgamma[ch]) / count)
                                } else {
                                    scale * gd[j]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(g.shape(), dx)?)?;
                }
                let gshape = self.value(*gamma).shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(&gshape, dgamma)?)?;
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *beta, Tensor::new(&bshape, dbeta)?)?;
            }
            Op::MaskMul { input, mask } => {
                let gx = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect(),
                )?;
                self.accumulate(grads, *input, gx)?;
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape)?)?;
            }
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let bt = ops::transpose(self.value(*b))?;
                    self.accumulate(grads, *a, ops::matmul(g, &bt)?)?;
                }
                if self.requires_grad(*b) {
                    let at = ops::transpose(self.value(*a))?;
                    self.accumulate(grads, *b, ops::matmul(&at, g)?)?;
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, ops::transpose(g)?)?;
            }
            Op::Sum(a) => {
                let gy = g.item()?;
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gy))?;
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let gy = g.item()? / T::from_f64(x.len() as f64);
                let shape = x.shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, gy))?;
            }
            Op::Softmax(a) => {
                let (_, k) = node.value.dims2()?;
                let y = node.value.data();
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(k).zip(g.data().chunks(k)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                    gx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                self.accumulate(grads, *a, Tensor::new(node.value.shape(), gx)?)?;
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let shape = self.value(*logits).shape().to_vec();
                let (n, k) = (shape[0], shape[1]);
                let scale = g.item()? / T::from_f64(n as f64);
                let mut gx = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    gx[row * k + label] = gx[row * k + label] - T::one();
                }
                gx.iter_mut().for_each(|v| *v = *v * scale);
                self.accumulate(grads, *logits, Tensor::new(&shape, gx)?)?;
            }
        }
        Ok(())
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient, materialized as zeros when `v` did not reach the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
