//! Dynamic gradient tape.
//!
//! Every forward operation appends a node holding its output value and the
//! information its backward rule needs. [`Tape::backward`] walks the nodes
//! in reverse recording order exactly once, accumulating gradients
//! additively so that fan-out sums per-branch contributions.
//!
//! A tape is built per forward pass and discarded afterwards.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::conv::{conv2d_backward, conv2d_im2col, ConvShape, Padding, Window2d};
use crate::kernels::gemm::{matmul, MatRef};
use crate::kernels::pool::{maxpool2d, maxpool2d_backward};
use crate::scalar::Real;
use crate::tensor::{numel, strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    MaskMul(Var, Vec<T>),
    MatMul(Var, Var),
    ChannelBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        shape: ConvShape,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    Bce {
        pred: Var,
        targets: Vec<T>,
        eps: T,
    },
    CategoricalCe {
        probs: Var,
        targets: Vec<T>,
        eps: T,
    },
    AffineGrid(Var),
    GridSample {
        input: Var,
        grid: Var,
    },
    Squash(Var),
    Norm(Var),
    CapsuleTransform {
        caps: Var,
        weight: Var,
    },
    CapsuleSum {
        coupling: Var,
        predictions: Var,
    },
    CapsuleAgreement {
        predictions: Var,
        outputs: Var,
    },
    MarginLoss {
        lengths: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Statistics returned by [`Tape::backward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardReport {
    /// Nodes whose backward rule ran (leaves excluded).
    pub nodes_visited: usize,
    pub nodes_recorded: usize,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    finished: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_or_scalar(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || numel(b) == 1 {
        Ok(a.to_vec())
    } else if numel(a) == 1 {
        Ok(b.to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Broadcast read: scalars repeat, everything else indexes directly.
#[inline]
fn bget<T: Copy>(v: &[T], i: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

/// Reduce a full-size gradient to an operand's size (sums for scalars).
fn unbroadcast<T: Real>(full: Vec<T>, operand_len: usize) -> Vec<T> {
    if operand_len == 1 && full.len() != 1 {
        vec![full.iter().copied().sum()]
    } else {
        full
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            finished: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`backward`](Self::backward).
    /// Intermediate gradients are released during the sweep.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value shape"))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Vec<usize>)> {
        let shape = same_or_scalar(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let n = numel(&shape);
        let out = (0..n).map(|i| f(bget(da, i), bget(db, i))).collect();
        Ok((Tensor::new(&shape, out)?, shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    /// `a + offset`; a negative offset gives subtract-constant.
    pub fn add_scalar(&mut self, a: Var, offset: T) -> Result<Var> {
        let value = self.value(a).map(|x| x + offset);
        self.push("add_scalar", value, Op::Offset(a), &[a])
    }

    pub fn sub_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.add_scalar(a, -c)
    }

    /// Multiply by a fixed (non-differentiable) mask of the same length.
    pub fn mask_mul(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "mask_mul",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(src.shape(), data)?;
        self.push("mask_mul", value, Op::MaskMul(a, mask), &[a])
    }

    // ----- linear algebra ---------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul(MatRef::new(self.data(a), m, k), MatRef::new(self.data(b), k, n));
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds `bias[c]` along axis 1 of an `[N, C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let inner = numel(&sx[2..]);
        let channels = sx[1];
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bc = b[i % channels];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let value = Tensor::new(&sx, data)?;
        self.push("add_channel_bias", value, Op::ChannelBias(x, bias), &[x, bias])
    }

    // ----- convolution and pooling ------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sw,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let window = Window2d::new("conv2d", (si[2], si[3]), (sw[2], sw[3]), stride, padding)?;
        let shape = ConvShape {
            batch: si[0],
            in_channels: si[1],
            filters: sw[0],
            window,
        };
        let out = conv2d_im2col(
            self.data(input),
            self.data(weight),
            bias.map(|b| self.data(b)),
            &shape,
        );
        let value = Tensor::new(&shape.output_shape(), out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                shape,
            },
            &inputs,
        )
    }

    pub fn maxpool2d(
        &mut self,
        input: Var,
        window: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        if si.len() != 4 {
            return Err(Error::InvalidShape {
                op: "maxpool2d",
                shape: si,
                reason: "expected NCHW",
            });
        }
        let g = Window2d::new("maxpool2d", (si[2], si[3]), window, stride, padding)?;
        let (out, argmax) = maxpool2d(self.data(input), si[0] * si[1], &g);
        let value = Tensor::new(&[si[0], si[1], g.out_h, g.out_w], out)?;
        self.push("maxpool2d", value, Op::MaxPool { input, argmax }, &[input])
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        if si.len() != 4 || si[2] == 0 || si[3] == 0 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                shape: si,
                reason: "expected NCHW with non-empty spatial extent",
            });
        }
        let area = si[2] * si[3];
        let inv = T::one() / T::of(area as f64);
        let out = self
            .data(input)
            .chunks(area)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&si[..2], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(input), &[input])
    }

    // ----- normalization -----------------------------------------------

    /// Batch normalization with batch statistics over every axis but 1.
    /// Returns the output plus the per-channel batch mean and (biased)
    /// variance so the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let si = self.shape(input).to_vec();
        let channels = self.check_bn_shapes(input, gamma, beta)?;
        if si[0] < 2 {
            return Err(Error::InvalidShape {
                op: "batch_norm",
                shape: si,
                reason: "training mode needs a batch of at least 2",
            });
        }
        let inner = numel(&si[2..]);
        let count = T::of((si[0] * inner) as f64);
        let x = self.data(input);
        let mut mean = vec![T::zero(); channels];
        for (i, chunk) in x.chunks(inner).enumerate() {
            mean[i % channels] += chunk.iter().copied().sum::<T>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![T::zero(); channels];
        for (i, chunk) in x.chunks(inner).enumerate() {
            let m = mean[i % channels];
            var[i % channels] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.normalize(input, gamma, beta, &mean, &inv_std, si.clone())?;
        let (value, xhat) = out;
        let v = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            &[input, gamma, beta],
        )?;
        Ok((v, mean, var))
    }

    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let channels = self.check_bn_shapes(input, gamma, beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::ShapeMismatch {
                op: "batch_norm running stats",
                lhs: vec![channels],
                rhs: vec![running_mean.len()],
            });
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = self.normalize(input, gamma, beta, running_mean, &inv_std, si)?;
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            &[input, gamma, beta],
        )
    }

    fn check_bn_shapes(&self, input: Var, gamma: Var, beta: Var) -> Result<usize> {
        let si = self.shape(input);
        if si.len() < 2 {
            return Err(Error::InvalidShape {
                op: "batch_norm",
                shape: si.to_vec(),
                reason: "expected at least [N, C]",
            });
        }
        let c = si[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: si.to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok(c)
    }

    fn normalize(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        shape: Vec<usize>,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        let channels = shape[1];
        let inner = numel(&shape[2..]);
        let (g, b) = (self.data(gamma), self.data(beta));
        let x = self.data(input);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for (i, (src, (xh, dst))) in x
            .chunks(inner)
            .zip(xhat.chunks_mut(inner).zip(out.chunks_mut(inner)))
            .enumerate()
        {
            let c = i % channels;
            for ((&v, h), o) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
                *h = (v - mean[c]) * inv_std[c];
                *o = g[c] * *h + b[c];
            }
        }
        Ok((Tensor::new(&shape, out)?, xhat))
    }

    // ----- activations -------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or(Error::InvalidShape {
            op: "softmax",
            shape: shape.clone(),
            reason: "needs at least one axis",
        })?;
        let mut out = self.data(x).to_vec();
        if width > 0 {
            for row in out.chunks_mut(width) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    // ----- shape manipulation -----------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Collapse all axes after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = s.first().copied().unwrap_or(1);
        let rest = numel(s.get(1..).unwrap_or(&[]));
        self.reshape(x, &[n, rest])
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || core::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: s,
                reason: "axes must be a permutation of the input rank",
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for_each_permuted(&s, axes, |o, i| out[o] = src[i]);
        let value = Tensor::new(&out_shape, out)?;
        self.push("permute", value, Op::Permute(x, axes.to_vec()), &[x])
    }

    /// Concatenate two `[N, *]` matrices along axis 1.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len() + db.len());
        for n in 0..sa[0] {
            out.extend_from_slice(&da[n * sa[1]..(n + 1) * sa[1]]);
            out.extend_from_slice(&db[n * sb[1]..(n + 1) * sb[1]]);
        }
        let value = Tensor::new(&[sa[0], sa[1] + sb[1]], out)?;
        self.push("concat", value, Op::Concat(a, b), &[a, b])
    }

    // ----- reductions and losses --------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        if d.is_empty() {
            return Err(Error::InvalidShape {
                op: "mean",
                shape: self.shape(x).to_vec(),
                reason: "empty tensor",
            });
        }
        let m = d.iter().copied().sum::<T>() / T::of(d.len() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy with predictions clamped to `[eps, 1-eps]`.
    ///
    /// When `pred` is a sigmoid output the gradient goes straight to its
    /// logits as `p - y`, so saturated predictions still learn.
    pub fn bce(&mut self, pred: Var, targets: &[T], eps: T) -> Result<Var> {
        let p = self.data(pred);
        if p.len() != targets.len() || p.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let one = T::one();
        let total: T = p
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let q = p.max(eps).min(one - eps);
                -(y * q.ln() + (one - y) * (one - q).ln())
            })
            .sum();
        let value = Tensor::scalar(total / T::of(p.len() as f64));
        self.push(
            "bce",
            value,
            Op::Bce {
                pred,
                targets: targets.to_vec(),
                eps,
            },
            &[pred],
        )
    }

    /// Mean categorical cross-entropy of `[N, K]` probabilities against
    /// one-hot targets. Softmax inputs get the fused `p - y` logit gradient.
    pub fn categorical_ce(&mut self, probs: Var, targets: &[T], eps: T) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || numel(&s) != targets.len() || s[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "categorical_ce",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        if !is_one_hot(targets, s[1]) {
            return Err(Error::Invalid("cross-entropy targets must be one-hot rows".into()));
        }
        let total: T = self
            .data(probs)
            .iter()
            .zip(targets)
            .map(|(&p, &y)| -(y * p.max(eps).min(T::one()).ln()))
            .sum();
        let value = Tensor::scalar(total / T::of(s[0] as f64));
        self.push(
            "categorical_ce",
            value,
            Op::CategoricalCe {
                probs,
                targets: targets.to_vec(),
                eps,
            },
            &[probs],
        )
    }

    /// Capsule margin loss with m+ = 0.9, m- = 0.1, lambda = 0.5,
    /// summed over classes and averaged over the batch.
    pub fn margin_loss(&mut self, lengths: Var, targets: &[T]) -> Result<Var> {
        let s = self.shape(lengths).to_vec();
        if s.len() != 2 || numel(&s) != targets.len() || s[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "margin_loss",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        if !is_one_hot(targets, s[1]) {
            return Err(Error::Invalid("margin loss targets must be one-hot rows".into()));
        }
        let (hi, lo, down) = (T::of(0.9), T::of(0.1), T::of(0.5));
        let zero = T::zero();
        let total: T = self
            .data(lengths)
            .iter()
            .zip(targets)
            .map(|(&l, &t)| {
                let pos = (hi - l).max(zero);
                let neg = (l - lo).max(zero);
                t * pos * pos + down * (T::one() - t) * neg * neg
            })
            .sum();
        let value = Tensor::scalar(total / T::of(s[0] as f64));
        self.push(
            "margin_loss",
            value,
            Op::MarginLoss {
                lengths,
                targets: targets.to_vec(),
            },
            &[lengths],
        )
    }

    // ----- spatial transformer ---------------------------------------

    /// Map a `[N, 2, 3]` affine matrix over the normalized target lattice of
    /// an `out_h x out_w` image. Output `[N, out_h, out_w, 2]` holds source
    /// `(x, y)` in `[-1, 1]` coordinates, corners aligned to pixel centers.
    pub fn affine_grid(&mut self, theta: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(theta).to_vec();
        if s.len() != 3 || s[1] != 2 || s[2] != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::InvalidShape {
                op: "affine_grid",
                shape: s,
                reason: "theta must be [N, 2, 3] and the output non-empty",
            });
        }
        let th = self.data(theta);
        let (ys, xs) = (lattice::<T>(out_h), lattice::<T>(out_w));
        let mut out = Vec::with_capacity(s[0] * out_h * out_w * 2);
        for n in 0..s[0] {
            let t = &th[n * 6..n * 6 + 6];
            for &y in &ys {
                for &x in &xs {
                    out.push(t[0] * x + t[1] * y + t[2]);
                    out.push(t[3] * x + t[4] * y + t[5]);
                }
            }
        }
        let value = Tensor::new(&[s[0], out_h, out_w, 2], out)?;
        self.push("affine_grid", value, Op::AffineGrid(theta), &[theta])
    }

    /// Bilinear sampling of `[N, C, H, W]` at `[N, H', W', 2]` normalized
    /// coordinates; neighbours outside the image read as zero.
    pub fn grid_sample(&mut self, input: Var, grid: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sg = self.shape(grid).to_vec();
        if si.len() != 4 || sg.len() != 4 || sg[3] != 2 || si[0] != sg[0] {
            return Err(Error::ShapeMismatch {
                op: "grid_sample",
                lhs: si,
                rhs: sg,
            });
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (oh, ow) = (sg[1], sg[2]);
        let x = self.data(input);
        let g = self.data(grid);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for b in 0..n {
            for p in 0..oh * ow {
                let at = bilinear_taps(g[(b * oh * ow + p) * 2], g[(b * oh * ow + p) * 2 + 1], h, w);
                for ch in 0..c {
                    let plane = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    out[(b * c + ch) * oh * ow + p] = at.sample(plane);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        self.push("grid_sample", value, Op::GridSample { input, grid }, &[input, grid])
    }

    // ----- capsules ----------------------------------------------------

    /// Squash along the last axis: `v = s * |s| / (1 + |s|^2)`.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let mut out = self.data(x).to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                let f = n / (T::one() + n * n);
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        let value = Tensor::new(&shape, out)?;
        self.push("squash", value, Op::Squash(x), &[x])
    }

    /// Euclidean norm along the last axis (the axis is removed).
    pub fn vector_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&d, outer)) = shape.split_last() else {
            return Err(Error::InvalidShape {
                op: "vector_norm",
                shape,
                reason: "needs at least one axis",
            });
        };
        let out: Vec<T> = if d == 0 {
            vec![T::zero(); numel(outer)]
        } else {
            self.data(x)
                .chunks(d)
                .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
                .collect()
        };
        let value = Tensor::new(outer, out)?;
        self.push("vector_norm", value, Op::Norm(x), &[x])
    }

    /// Per-capsule affine predictions: `u [N, I, Din]` and weights
    /// `[I, J, Dout, Din]` give `u_hat [N, I, J, Dout]`.
    pub fn capsule_transform(&mut self, caps: Var, weight: Var) -> Result<Var> {
        let (su, sw) = (self.shape(caps).to_vec(), self.shape(weight).to_vec());
        if su.len() != 3 || sw.len() != 4 || su[1] != sw[0] || su[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "capsule_transform",
                lhs: su,
                rhs: sw,
            });
        }
        let (n, i_caps, din) = (su[0], su[1], su[2]);
        let (j_caps, dout) = (sw[1], sw[2]);
        let (u, w) = (self.data(caps), self.data(weight));
        let mut out = vec![T::zero(); n * i_caps * j_caps * dout];
        for b in 0..n {
            for i in 0..i_caps {
                let ui = &u[(b * i_caps + i) * din..(b * i_caps + i + 1) * din];
                for j in 0..j_caps {
                    for o in 0..dout {
                        let wr = &w[((i * j_caps + j) * dout + o) * din..((i * j_caps + j) * dout + o + 1) * din];
                        let mut acc = T::zero();
                        for d in 0..din {
                            acc += wr[d] * ui[d];
                        }
                        out[((b * i_caps + i) * j_caps + j) * dout + o] = acc;
                    }
                }
            }
        }
        let value = Tensor::new(&[n, i_caps, j_caps, dout], out)?;
        self.push("capsule_transform", value, Op::CapsuleTransform { caps, weight }, &[caps, weight])
    }

    /// `s[n, j, :] = sum_i c[n, i, j] * u_hat[n, i, j, :]`.
    pub fn capsule_sum(&mut self, coupling: Var, predictions: Var) -> Result<Var> {
        let (sc, sp) = (self.shape(coupling).to_vec(), self.shape(predictions).to_vec());
        if sc.len() != 3 || sp.len() != 4 || sc[..] != sp[..3] {
            return Err(Error::ShapeMismatch {
                op: "capsule_sum",
                lhs: sc,
                rhs: sp,
            });
        }
        let (n, ic, jc, d) = (sp[0], sp[1], sp[2], sp[3]);
        let (c, u) = (self.data(coupling), self.data(predictions));
        let mut out = vec![T::zero(); n * jc * d];
        for b in 0..n {
            for i in 0..ic {
                for j in 0..jc {
                    let cij = c[(b * ic + i) * jc + j];
                    let src = &u[((b * ic + i) * jc + j) * d..((b * ic + i) * jc + j + 1) * d];
                    let dst = &mut out[(b * jc + j) * d..(b * jc + j + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += cij * v;
                    }
                }
            }
        }
        let value = Tensor::new(&[n, jc, d], out)?;
        self.push(
            "capsule_sum",
            value,
            Op::CapsuleSum {
                coupling,
                predictions,
            },
            &[coupling, predictions],
        )
    }

    /// Routing agreement `a[n, i, j] = <u_hat[n, i, j, :], v[n, j, :]>`.
    pub fn capsule_agreement(&mut self, predictions: Var, outputs: Var) -> Result<Var> {
        let (sp, sv) = (self.shape(predictions).to_vec(), self.shape(outputs).to_vec());
        if sp.len() != 4 || sv.len() != 3 || sv[0] != sp[0] || sv[1] != sp[2] || sv[2] != sp[3] {
            return Err(Error::ShapeMismatch {
                op: "capsule_agreement",
                lhs: sp,
                rhs: sv,
            });
        }
        let (n, ic, jc, d) = (sp[0], sp[1], sp[2], sp[3]);
        let (u, v) = (self.data(predictions), self.data(outputs));
        let mut out = vec![T::zero(); n * ic * jc];
        for b in 0..n {
            for i in 0..ic {
                for j in 0..jc {
                    let ur = &u[((b * ic + i) * jc + j) * d..((b * ic + i) * jc + j + 1) * d];
                    let vr = &v[(b * jc + j) * d..(b * jc + j + 1) * d];
                    out[(b * ic + i) * jc + j] = ur.iter().zip(vr).map(|(&a, &b)| a * b).sum();
                }
            }
        }
        let value = Tensor::new(&[n, ic, jc], out)?;
        self.push(
            "capsule_agreement",
            value,
            Op::CapsuleAgreement {
                predictions,
                outputs,
            },
            &[predictions, outputs],
        )
    }

    /// Hash of every piecewise branch taken so far: relu masks, pooling
    /// winners, bilinear cells and loss hinges. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = Fnv::new();
        for node in &self.nodes {
            let y = node.value.data();
            match &node.op {
                Op::Relu(_) => y.iter().for_each(|&v| h.bit(v > T::zero())),
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&a| h.word(a as u64)),
                Op::GridSample { input, grid } => {
                    let s = self.shape(*input);
                    let (hh, ww) = (s[2], s[3]);
                    for p in self.data(*grid).chunks(2) {
                        let t = bilinear_taps(p[0], p[1], hh, ww);
                        h.word(t.x0 as u64);
                        h.word(t.y0 as u64);
                    }
                }
                Op::MarginLoss { lengths, .. } => self.data(*lengths).iter().for_each(|&l| {
                    h.bit(l < T::of(0.9));
                    h.bit(l > T::of(0.1));
                }),
                Op::Bce { pred, eps, .. } => self
                    .data(*pred)
                    .iter()
                    .for_each(|&p| h.bit(p <= *eps || p >= T::one() - *eps)),
                Op::CategoricalCe { probs, eps, .. } => self.data(*probs).iter().for_each(|&p| h.bit(p <= *eps)),
                _ => {}
            }
        }
        h.finish()
    }

    // ----- backward ----------------------------------------------------

    /// Reverse sweep from a one-element `loss`. Leaf gradients are kept and
    /// can be read with [`grad`](Self::grad). A tape supports one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        if self.finished {
            return Err(Error::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.finished = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            visited += 1;
            let contributions = self.backward_rule(idx, &g);
            for (v, c) in contributions {
                if self.nodes[v.0].requires_grad {
                    self.accumulate(v, c);
                }
            }
        }
        Ok(BackwardReport {
            nodes_visited: visited,
            nodes_recorded: self.nodes.len(),
        })
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        let node = &mut self.nodes[v.0];
        debug_assert_eq!(contribution.len(), node.value.len());
        match &mut node.grad {
            Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += *c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_rule(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => {
                let mut r = Vec::new();
                if self.wants(*a) {
                    r.push((*a, unbroadcast(g.to_vec(), self.data(*a).len())));
                }
                if self.wants(*b) {
                    r.push((*b, unbroadcast(g.to_vec(), self.data(*b).len())));
                }
                r
            }
            Op::Sub(a, b) => {
                let mut r = Vec::new();
                if self.wants(*a) {
                    r.push((*a, unbroadcast(g.to_vec(), self.data(*a).len())));
                }
                if self.wants(*b) {
                    let neg = g.iter().map(|&v| -v).collect();
                    r.push((*b, unbroadcast(neg, self.data(*b).len())));
                }
                r
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let mut r = Vec::new();
                if self.wants(*a) {
                    let full = g.iter().enumerate().map(|(i, &gv)| gv * bget(db, i)).collect();
                    r.push((*a, unbroadcast(full, da.len())));
                }
                if self.wants(*b) {
                    let full = g.iter().enumerate().map(|(i, &gv)| gv * bget(da, i)).collect();
                    r.push((*b, unbroadcast(full, db.len())));
                }
                r
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|&v| v * *f).collect())],
            Op::Offset(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::MaskMul(a, mask) => vec![(*a, g.iter().zip(mask).map(|(&v, &m)| v * m).collect())],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let gm = MatRef::new(g, m, n);
                let mut r = Vec::new();
                if self.wants(*a) {
                    r.push((*a, matmul(gm, MatRef::new(self.data(*b), k, n).t())));
                }
                if self.wants(*b) {
                    r.push((*b, matmul(MatRef::new(self.data(*a), m, k).t(), gm)));
                }
                r
            }
            Op::ChannelBias(x, bias) => {
                let mut r = Vec::new();
                if self.wants(*x) {
                    r.push((*x, g.to_vec()));
                }
                if self.wants(*bias) {
                    let channels = out_shape[1];
                    let inner = numel(&out_shape[2..]);
                    let mut db = vec![T::zero(); channels];
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        db[i % channels] += chunk.iter().copied().sum::<T>();
                    }
                    r.push((*bias, db));
                }
                r
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                shape,
            } => {
                let want_b = bias.map(|b| self.wants(b)).unwrap_or(false);
                let grads = conv2d_backward(
                    self.data(*input),
                    self.data(*weight),
                    g,
                    shape,
                    (self.wants(*input), self.wants(*weight), want_b),
                );
                let mut r = Vec::new();
                if let Some(dx) = grads.input {
                    r.push((*input, dx));
                }
                if let Some(dw) = grads.weight {
                    r.push((*weight, dw));
                }
                if let (Some(db), Some(b)) = (grads.bias, bias) {
                    r.push((*b, db));
                }
                r
            }
            Op::MaxPool { input, argmax } => {
                vec![(*input, maxpool2d_backward(g, argmax, self.data(*input).len()))]
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let area = s[2] * s[3];
                let inv = T::one() / T::of(area as f64);
                let mut dx = vec![T::zero(); numel(s)];
                for (plane, &gv) in dx.chunks_mut(area).zip(g) {
                    plane.iter_mut().for_each(|v| *v = gv * inv);
                }
                vec![(*x, dx)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let channels = out_shape[1];
                let inner = numel(&out_shape[2..]);
                let gam = self.data(*gamma);
                let mut sum_g = vec![T::zero(); channels];
                let mut sum_gx = vec![T::zero(); channels];
                for (i, (gc, xc)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    let c = i % channels;
                    for (&gv, &xv) in gc.iter().zip(xc) {
                        sum_g[c] += gv;
                        sum_gx[c] += gv * xv;
                    }
                }
                let mut r = Vec::new();
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    let count = T::of((out_shape[0] * inner) as f64);
                    for (i, ((dc, gc), xc)) in dx
                        .chunks_mut(inner)
                        .zip(g.chunks(inner))
                        .zip(xhat.chunks(inner))
                        .enumerate()
                    {
                        let c = i % channels;
                        let k = gam[c] * inv_std[c];
                        if *train {
                            let mg = sum_g[c] / count;
                            let mgx = sum_gx[c] / count;
                            for ((d, &gv), &xv) in dc.iter_mut().zip(gc).zip(xc) {
                                *d = k * (gv - mg - xv * mgx);
                            }
                        } else {
                            for (d, &gv) in dc.iter_mut().zip(gc) {
                                *d = k * gv;
                            }
                        }
                    }
                    r.push((*input, dx));
                }
                if self.wants(*gamma) {
                    r.push((*gamma, sum_gx));
                }
                if self.wants(*beta) {
                    r.push((*beta, sum_g));
                }
                r
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let dx = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                vec![(*x, dx)]
            }
            Op::Softmax(x) => {
                let width = *out_shape.last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                if width > 0 {
                    for ((d, gr), yr) in dx.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((dv, &gv), &yv) in d.iter_mut().zip(gr).zip(yr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Permute(x, axes) => {
                let s = self.shape(*x);
                let mut dx = vec![T::zero(); g.len()];
                for_each_permuted(s, axes, |o, i| dx[i] = g[o]);
                vec![(*x, dx)]
            }
            Op::Concat(a, b) => {
                let (wa, wb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let n = out_shape[0];
                let mut ga = Vec::with_capacity(n * wa);
                let mut gb = Vec::with_capacity(n * wb);
                for row in g.chunks(wa + wb) {
                    ga.extend_from_slice(&row[..wa]);
                    gb.extend_from_slice(&row[wa..]);
                }
                let mut r = Vec::new();
                if self.wants(*a) {
                    r.push((*a, ga));
                }
                if self.wants(*b) {
                    r.push((*b, gb));
                }
                r
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.data(*x).len()])],
            Op::Mean(x) => {
                let n = self.data(*x).len();
                vec![(*x, vec![g[0] / T::of(n as f64); n])]
            }
            Op::Bce { pred, targets, eps } => {
                let p = self.data(*pred);
                let scale = g[0] / T::of(p.len() as f64);
                let one = T::one();
                if let Op::Sigmoid(z) = self.nodes[pred.0].op {
                    let dz = p.iter().zip(targets).map(|(&pv, &yv)| scale * (pv - yv)).collect();
                    return vec![(z, dz)];
                }
                let dx = p
                    .iter()
                    .zip(targets)
                    .map(|(&pv, &yv)| {
                        if pv <= *eps || pv >= one - *eps {
                            T::zero()
                        } else {
                            scale * (pv - yv) / (pv * (one - pv))
                        }
                    })
                    .collect();
                vec![(*pred, dx)]
            }
            Op::CategoricalCe { probs, targets, eps } => {
                let p = self.data(*probs);
                let scale = g[0] / T::of(self.shape(*probs)[0] as f64);
                if let Op::Softmax(z) = self.nodes[probs.0].op {
                    let dz = p.iter().zip(targets).map(|(&pv, &yv)| scale * (pv - yv)).collect();
                    return vec![(z, dz)];
                }
                let dx = p
                    .iter()
                    .zip(targets)
                    .map(|(&pv, &yv)| if pv <= *eps { T::zero() } else { -scale * yv / pv })
                    .collect();
                vec![(*probs, dx)]
            }
            Op::MarginLoss { lengths, targets } => {
                let l = self.data(*lengths);
                let scale = g[0] / T::of(self.shape(*lengths)[0] as f64);
                let (hi, lo, two) = (T::of(0.9), T::of(0.1), T::of(2.0));
                let zero = T::zero();
                let dx = l
                    .iter()
                    .zip(targets)
                    .map(|(&lv, &t)| {
                        let pos = (hi - lv).max(zero);
                        let neg = (lv - lo).max(zero);
                        scale * (-two * t * pos + (T::one() - t) * neg)
                    })
                    .collect();
                vec![(*lengths, dx)]
            }
            Op::AffineGrid(theta) => {
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let (ys, xs) = (lattice::<T>(oh), lattice::<T>(ow));
                let n = out_shape[0];
                let mut dt = vec![T::zero(); n * 6];
                for b in 0..n {
                    let t = &mut dt[b * 6..b * 6 + 6];
                    for (r, &yv) in ys.iter().enumerate() {
                        for (c, &xv) in xs.iter().enumerate() {
                            let at = ((b * oh + r) * ow + c) * 2;
                            let (gx, gy) = (g[at], g[at + 1]);
                            t[0] += gx * xv;
                            t[1] += gx * yv;
                            t[2] += gx;
                            t[3] += gy * xv;
                            t[4] += gy * yv;
                            t[5] += gy;
                        }
                    }
                }
                vec![(*theta, dt)]
            }
            Op::GridSample { input, grid } => {
                let si = self.shape(*input);
                let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let x = self.data(*input);
                let gr = self.data(*grid);
                let want_x = self.wants(*input);
                let want_g = self.wants(*grid);
                let mut dx = if want_x { vec![T::zero(); x.len()] } else { Vec::new() };
                let mut dg = if want_g { vec![T::zero(); gr.len()] } else { Vec::new() };
                let half = T::of(0.5);
                for b in 0..n {
                    for p in 0..oh * ow {
                        let gi = (b * oh * ow + p) * 2;
                        let taps = bilinear_taps(gr[gi], gr[gi + 1], h, w);
                        let (mut dpx, mut dpy) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let gv = g[(b * c + ch) * oh * ow + p];
                            let base = (b * c + ch) * h * w;
                            if want_x {
                                taps.scatter(&mut dx[base..base + h * w], gv);
                            }
                            if want_g {
                                let (ddx, ddy) = taps.coord_grads(&x[base..base + h * w]);
                                dpx += gv * ddx;
                                dpy += gv * ddy;
                            }
                        }
                        if want_g {
                            dg[gi] = dpx * T::of((w - 1) as f64) * half;
                            dg[gi + 1] = dpy * T::of((h - 1) as f64) * half;
                        }
                    }
                }
                let mut r = Vec::new();
                if want_x {
                    r.push((*input, dx));
                }
                if want_g {
                    r.push((*grid, dg));
                }
                r
            }
            Op::Squash(x) => {
                let s = self.data(*x);
                let d = *out_shape.last().unwrap();
                let mut dx = vec![T::zero(); s.len()];
                if d > 0 {
                    for ((dr, sr), gr) in dx.chunks_mut(d).zip(s.chunks(d)).zip(g.chunks(d)) {
                        let n2: T = sr.iter().map(|&v| v * v).sum();
                        let n = n2.sqrt();
                        if n == T::zero() {
                            continue;
                        }
                        let denom = T::one() + n2;
                        let f = n / denom;
                        let fp_over_n = (T::one() - n2) / (denom * denom) / n;
                        let dot: T = sr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((dv, &sv), &gv) in dr.iter_mut().zip(sr).zip(gr) {
                            *dv = f * gv + sv * dot * fp_over_n;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Norm(x) => {
                let s = self.data(*x);
                let d = *self.shape(*x).last().unwrap();
                let mut dx = vec![T::zero(); s.len()];
                if d > 0 {
                    for (((dr, sr), &gv), &yv) in dx.chunks_mut(d).zip(s.chunks(d)).zip(g).zip(y) {
                        if yv > T::zero() {
                            for (dv, &sv) in dr.iter_mut().zip(sr) {
                                *dv = gv * sv / yv;
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::CapsuleTransform { caps, weight } => {
                let su = self.shape(*caps);
                let sw = self.shape(*weight);
                let (n, ic, din) = (su[0], su[1], su[2]);
                let (jc, dout) = (sw[1], sw[2]);
                let (u, w) = (self.data(*caps), self.data(*weight));
                let want_u = self.wants(*caps);
                let want_w = self.wants(*weight);
                let mut du = if want_u { vec![T::zero(); u.len()] } else { Vec::new() };
                let mut dw = if want_w { vec![T::zero(); w.len()] } else { Vec::new() };
                for b in 0..n {
                    for i in 0..ic {
                        let ui = (b * ic + i) * din;
                        for j in 0..jc {
                            for o in 0..dout {
                                let gv = g[((b * ic + i) * jc + j) * dout + o];
                                let wi = ((i * jc + j) * dout + o) * din;
                                for d in 0..din {
                                    if want_u {
                                        du[ui + d] += gv * w[wi + d];
                                    }
                                    if want_w {
                                        dw[wi + d] += gv * u[ui + d];
                                    }
                                }
                            }
                        }
                    }
                }
                let mut r = Vec::new();
                if want_u {
                    r.push((*caps, du));
                }
                if want_w {
                    r.push((*weight, dw));
                }
                r
            }
            Op::CapsuleSum {
                coupling,
                predictions,
            } => {
                let sp = self.shape(*predictions);
                let (n, ic, jc, d) = (sp[0], sp[1], sp[2], sp[3]);
                let (c, u) = (self.data(*coupling), self.data(*predictions));
                let mut r = Vec::new();
                if self.wants(*coupling) {
                    let mut dc = vec![T::zero(); c.len()];
                    for b in 0..n {
                        for i in 0..ic {
                            for j in 0..jc {
                                let ur = &u[((b * ic + i) * jc + j) * d..((b * ic + i) * jc + j + 1) * d];
                                let gr = &g[(b * jc + j) * d..(b * jc + j + 1) * d];
                                dc[(b * ic + i) * jc + j] = ur.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            }
                        }
                    }
                    r.push((*coupling, dc));
                }
                if self.wants(*predictions) {
                    let mut du = vec![T::zero(); u.len()];
                    for b in 0..n {
                        for i in 0..ic {
                            for j in 0..jc {
                                let cij = c[(b * ic + i) * jc + j];
                                let gr = &g[(b * jc + j) * d..(b * jc + j + 1) * d];
                                let dst = &mut du[((b * ic + i) * jc + j) * d..((b * ic + i) * jc + j + 1) * d];
                                for (o, &gv) in dst.iter_mut().zip(gr) {
                                    *o = cij * gv;
                                }
                            }
                        }
                    }
                    r.push((*predictions, du));
                }
                r
            }
            Op::CapsuleAgreement {
                predictions,
                outputs,
            } => {
                let sp = self.shape(*predictions);
                let (n, ic, jc, d) = (sp[0], sp[1], sp[2], sp[3]);
                let (u, v) = (self.data(*predictions), self.data(*outputs));
                let mut r = Vec::new();
                if self.wants(*predictions) {
                    let mut du = vec![T::zero(); u.len()];
                    for b in 0..n {
                        for i in 0..ic {
                            for j in 0..jc {
                                let gv = g[(b * ic + i) * jc + j];
                                let vr = &v[(b * jc + j) * d..(b * jc + j + 1) * d];
                                let dst = &mut du[((b * ic + i) * jc + j) * d..((b * ic + i) * jc + j + 1) * d];
                                for (o, &vv) in dst.iter_mut().zip(vr) {
                                    *o = gv * vv;
                                }
                            }
                        }
                    }
                    r.push((*predictions, du));
                }
                if self.wants(*outputs) {
                    let mut dv = vec![T::zero(); v.len()];
                    for b in 0..n {
                        for i in 0..ic {
                            for j in 0..jc {
                                let gv = g[(b * ic + i) * jc + j];
                                let ur = &u[((b * ic + i) * jc + j) * d..((b * ic + i) * jc + j + 1) * d];
                                let dst = &mut dv[(b * jc + j) * d..(b * jc + j + 1) * d];
                                for (o, &uv) in dst.iter_mut().zip(ur) {
                                    *o += gv * uv;
                                }
                            }
                        }
                    }
                    r.push((*outputs, dv));
                }
                r
            }
        }
    }
}

fn is_one_hot<T: Real>(targets: &[T], width: usize) -> bool {
    width > 0
        && targets.chunks(width).all(|row| {
            row.iter().all(|&v| v == T::zero() || v == T::one())
                && row.iter().filter(|&&v| v == T::one()).count() == 1
        })
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn word(&mut self, w: u64) {
        for b in w.to_le_bytes() {
            self.0 = (self.0 ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn bit(&mut self, b: bool) {
        self.0 = (self.0 ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// Normalized coordinates of `n` pixel centers, `-1` at the first and `+1`
/// at the last.
pub fn lattice<T: Real>(n: usize) -> Vec<T> {
    if n == 1 {
        return vec![T::zero()];
    }
    let span = T::of((n - 1) as f64);
    (0..n)
        .map(|i| T::of((2 * i) as f64 - (n - 1) as f64) / span)
        .collect()
}

/// The four neighbours of a normalized sample point and their weights.
struct Taps<T> {
    x0: isize,
    y0: isize,
    wx: T,
    wy: T,
    h: usize,
    w: usize,
}

fn bilinear_taps<T: Real>(xn: T, yn: T, h: usize, w: usize) -> Taps<T> {
    let half = T::of(0.5);
    let px = (xn + T::one()) * half * T::of((w - 1) as f64);
    let py = (yn + T::one()) * half * T::of((h - 1) as f64);
    let fx = px.floor();
    let fy = py.floor();
    Taps {
        x0: fx.as_f64() as isize,
        y0: fy.as_f64() as isize,
        wx: px - fx,
        wy: py - fy,
        h,
        w,
    }
}

impl<T: Real> Taps<T> {
    #[inline]
    fn read(&self, plane: &[T], y: isize, x: isize) -> T {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            T::zero()
        } else {
            plane[y as usize * self.w + x as usize]
        }
    }

    fn corners(&self) -> [(isize, isize, T); 4] {
        let one = T::one();
        [
            (self.y0, self.x0, (one - self.wy) * (one - self.wx)),
            (self.y0, self.x0 + 1, (one - self.wy) * self.wx),
            (self.y0 + 1, self.x0, self.wy * (one - self.wx)),
            (self.y0 + 1, self.x0 + 1, self.wy * self.wx),
        ]
    }

    fn sample(&self, plane: &[T]) -> T {
        self.corners()
            .iter()
            .map(|&(y, x, wt)| if wt == T::zero() { T::zero() } else { wt * self.read(plane, y, x) })
            .fold(T::zero(), |a, b| a + b)
    }

    fn scatter(&self, plane: &mut [T], g: T) {
        for (y, x, wt) in self.corners() {
            if y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w {
                plane[y as usize * self.w + x as usize] += g * wt;
            }
        }
    }

    /// Derivatives of the sample w.r.t. pixel coordinates (px, py).
    fn coord_grads(&self, plane: &[T]) -> (T, T) {
        let one = T::one();
        let v00 = self.read(plane, self.y0, self.x0);
        let v01 = self.read(plane, self.y0, self.x0 + 1);
        let v10 = self.read(plane, self.y0 + 1, self.x0);
        let v11 = self.read(plane, self.y0 + 1, self.x0 + 1);
        let dx = (v01 - v00) * (one - self.wy) + (v11 - v10) * self.wy;
        let dy = (v10 - v00) * (one - self.wx) + (v11 - v01) * self.wx;
        (dx, dy)
    }
}

/// Calls `f(out_offset, in_offset)` for every element of a permutation.
fn for_each_permuted(in_shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(in_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut coord = vec![0usize; rank];
    let mut in_off = 0usize;
    for out_off in 0..total {
        f(out_off, in_off);
        for axis in (0..rank).rev() {
            coord[axis] += 1;
            in_off += step[axis];
            if coord[axis] < out_shape[axis] {
                break;
            }
            in_off -= step[axis] * out_shape[axis];
            coord[axis] = 0;
        }
    }
}
