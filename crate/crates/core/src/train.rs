//! One optimization step and inference-mode scoring for zoo networks.

use alloc::vec::Vec;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::{loss_for, positive_scores};
use crate::optim::Adam;
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::zoo::Network;

/// A mini-batch: images `[N, C, H, W]`, optional metadata `[N, 5]` and
/// binary labels.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a, T> {
    pub images: &'a Tensor<T>,
    pub meta: Option<&'a Tensor<T>>,
    pub labels: &'a [u8],
}

fn record<T: Real>(tape: &mut Tape<T>, batch: &Batch<'_, T>) -> (Var, Option<Var>) {
    let x = tape.constant(batch.images.clone());
    let m = batch.meta.map(|m| tape.constant(m.clone()));
    (x, m)
}

/// Forward in training mode, backward, one Adam update and the running
/// batch-norm statistics. Returns the pre-update loss.
pub fn train_step<T: Real>(
    net: &mut Network<T>,
    adam: &mut Adam<T>,
    batch: &Batch<'_, T>,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    train_step_scored(net, adam, batch, rng).map(|(loss, _)| loss)
}

/// [`train_step`] that also returns the training-mode positive-class
/// scores of the batch.
pub fn train_step_scored<T: Real>(
    net: &mut Network<T>,
    adam: &mut Adam<T>,
    batch: &Batch<'_, T>,
    rng: &mut dyn RngCore,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let (x, m) = record(&mut tape, batch);
    let pass = net.forward(&mut tape, x, m, Mode::Train, rng)?;
    let kind = net.spec().output_kind;
    let loss = loss_for(&mut tape, pass.output, kind, batch.labels)?;
    let value = tape.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let scores = positive_scores(tape.value(pass.output), kind)?;
    tape.backward(loss)?;
    let grads: Vec<Option<&[T]>> = pass.params.iter().map(|&p| tape.grad(p)).collect();
    adam.update(net.params_mut(), &grads)?;
    net.apply_batch_stats(&pass.batch_stats);
    Ok((value, scores))
}

/// Inference-mode loss and positive-class scores.
pub fn evaluate_batch<T: Real>(net: &Network<T>, batch: &Batch<'_, T>, rng: &mut dyn RngCore) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let (x, m) = record(&mut tape, batch);
    let pass = net.forward(&mut tape, x, m, Mode::Infer, rng)?;
    let kind = net.spec().output_kind;
    let loss = loss_for(&mut tape, pass.output, kind, batch.labels)?;
    let scores = positive_scores(tape.value(pass.output), kind)?;
    Ok((tape.value(loss).item()?.as_f64(), scores))
}
