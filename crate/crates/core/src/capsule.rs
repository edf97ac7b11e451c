//! Capsule layers: primary capsules, squash, routing-by-agreement and the
//! length readout.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_ROUTINGS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapsVariant {
    /// Stride-1 'valid' first convolution.
    Basic,
    /// Stride-2 'same' convolutions, a much smaller capsule grid.
    Modified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleConfig {
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_padding: Padding,
    pub primary_dim: usize,
    pub primary_channels: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    pub primary_padding: Padding,
    pub n_class: usize,
    pub digit_dim: usize,
    pub routings: usize,
}

impl CapsuleConfig {
    pub fn new(variant: CapsVariant) -> Self {
        let (conv_stride, padding) = match variant {
            CapsVariant::Basic => (1, Padding::Valid),
            CapsVariant::Modified => (2, Padding::Same),
        };
        Self {
            conv_filters: 256,
            conv_kernel: 9,
            conv_stride,
            conv_padding: padding,
            primary_dim: 8,
            primary_channels: 32,
            primary_kernel: 9,
            primary_stride: 2,
            primary_padding: padding,
            n_class: 2,
            digit_dim: 16,
            routings: DEFAULT_ROUTINGS,
        }
    }
}

pub fn squash<T: Real>(tape: &mut Tape<T>, s: Var) -> Result<Var> {
    tape.squash(s)
}

/// Convolution into `channels * dim` maps, regrouped into capsules of
/// `dim` components ordered by (row, column, channel), then squashed.
/// Returns `[N, rows * cols * channels, dim]`.
#[allow(clippy::too_many_arguments)]
pub fn primary_caps<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    weight: Var,
    bias: Var,
    dim: usize,
    channels: usize,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    if tape.shape(weight).first() != Some(&(dim * channels)) {
        return Err(Error::ShapeMismatch {
            op: "primary_caps",
            lhs: vec![dim * channels],
            rhs: tape.shape(weight).to_vec(),
        });
    }
    let conv = tape.conv2d(features, weight, Some(bias), (stride, stride), padding)?;
    let s = tape.shape(conv).to_vec();
    let nhwc = tape.permute(conv, &[0, 2, 3, 1])?;
    let caps = tape.reshape(nhwc, &[s[0], s[2] * s[3] * channels, dim])?;
    tape.squash(caps)
}

/// Result of dynamic routing.
pub struct Routing<T> {
    /// `v [N, J, D]`.
    pub output: Var,
    /// Coupling coefficients `c [N, I, J]` used at each iteration.
    pub couplings: Vec<Tensor<T>>,
}

/// Routing-by-agreement over predictions `u_hat [N, I, J, D]`.
///
/// Logits start at zero; each iteration takes a softmax over output
/// capsules, forms weighted sums, squashes, then adds the agreement to the
/// logits (except after the last iteration). Gradients flow through every
/// iteration.
pub fn routing<T: Real>(tape: &mut Tape<T>, u_hat: Var, iterations: usize) -> Result<Routing<T>> {
    if iterations < 1 {
        return Err(Error::out_of_range("routing iterations", iterations as f64, ">= 1"));
    }
    let s = tape.shape(u_hat).to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op: "routing",
            shape: s,
            reason: "expected [N, in_caps, out_caps, dim]",
        });
    }
    let mut logits = tape.constant(Tensor::zeros(&s[..3]));
    let mut couplings = Vec::with_capacity(iterations);
    let mut output = None;
    for it in 0..iterations {
        let c = tape.softmax(logits)?;
        couplings.push(tape.value(c).clone());
        let weighted = tape.capsule_sum(c, u_hat)?;
        let v = tape.squash(weighted)?;
        if it + 1 < iterations {
            let agreement = tape.capsule_agreement(u_hat, v)?;
            logits = tape.add(logits, agreement)?;
        }
        output = Some(v);
    }
    Ok(Routing {
        output: output.expect("at least one iteration"),
        couplings,
    })
}

/// Predictions from input capsules followed by routing.
pub fn diagnosis_caps<T: Real>(tape: &mut Tape<T>, caps: Var, weight: Var, iterations: usize) -> Result<Routing<T>> {
    let u_hat = tape.capsule_transform(caps, weight)?;
    routing(tape, u_hat, iterations)
}

pub fn capsule_length<T: Real>(tape: &mut Tape<T>, v: Var) -> Result<Var> {
    tape.vector_norm(v)
}

pub fn margin_loss<T: Real>(tape: &mut Tape<T>, lengths: Var, one_hot: &[T]) -> Result<Var> {
    tape.margin_loss(lengths, one_hot)
}
