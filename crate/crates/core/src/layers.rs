//! Layer-level building blocks on top of the tape primitives, plus weight
//! initialization.

use alloc::vec::Vec;

use rand::{Rng, RngCore};
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    Sigmoid,
    Softmax,
}

pub fn activate<T: Real>(tape: &mut Tape<T>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Linear => Ok(x),
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Softmax => tape.softmax(x),
    }
}

/// `x [N, D] @ w [D, U] + b [U]`.
pub fn dense<T: Real>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add_channel_bias(y, bias)
}

pub fn conv2d<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Var> {
    tape.conv2d(x, weight, Some(bias), stride, padding)
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` in training,
/// inference is the identity.
pub fn dropout<T: Real>(tape: &mut Tape<T>, x: Var, rate: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
    check_dropout_rate(rate)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..tape.value(x).len())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    tape.mask_mul(x, mask)
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::out_of_range("dropout rate", rate, "[0, 1)"))
    }
}

/// Learnable scale/shift and running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    /// Normalizes `x` (channels on axis 1). In training mode the running
    /// statistics are updated from the batch.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, mode: Mode) -> Result<Var> {
        let (y, stats) = batchnorm(
            tape,
            x,
            gamma,
            beta,
            self.running_mean.data(),
            self.running_var.data(),
            mode,
            self.epsilon,
        )?;
        if let Some((mean, var)) = stats {
            update_running_stats(
                self.running_mean.data_mut(),
                self.running_var.data_mut(),
                &mean,
                &var,
                self.momentum,
            );
        }
        Ok(y)
    }
}

/// Functional batch norm. Returns the batch mean and variance in training
/// mode so the caller can fold them into its running statistics.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn batchnorm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[T],
    running_var: &[T],
    mode: Mode,
    epsilon: f64,
) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
    match mode {
        Mode::Train => {
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, T::of(epsilon))?;
            Ok((y, Some((mean, var))))
        }
        Mode::Infer => Ok((
            tape.batch_norm_infer(x, gamma, beta, running_mean, running_var, T::of(epsilon))?,
            None,
        )),
    }
}

/// `running = momentum * running + (1 - momentum) * batch`.
pub fn update_running_stats<T: Real>(
    running_mean: &mut [T],
    running_var: &mut [T],
    batch_mean: &[T],
    batch_var: &[T],
    momentum: f64,
) {
    let m = T::of(momentum);
    let r = T::one() - m;
    for (run, &b) in running_mean.iter_mut().zip(batch_mean) {
        *run = m * *run + r * b;
    }
    for (run, &b) in running_var.iter_mut().zip(batch_var) {
        *run = m * *run + r * b;
    }
}

pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor<T> {
    uniform(shape, (6.0 / fan_in.max(1) as f64).sqrt(), rng)
}

pub fn glorot_uniform<T: Real>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut dyn RngCore) -> Tensor<T> {
    uniform(shape, (6.0 / (fan_in + fan_out).max(1) as f64).sqrt(), rng)
}

pub fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut dyn RngCore) -> Tensor<T> {
    let data = (0..numel(shape))
        .map(|_| T::of(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}
