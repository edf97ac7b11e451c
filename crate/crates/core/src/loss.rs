//! Training objectives and score readout for each output kind.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::zoo::OutputKind;

/// Probability clamp used by the cross-entropy losses.
pub const PROB_EPSILON: f64 = 1e-7;

fn check_labels(labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "labels",
            lhs: alloc::vec![n],
            rhs: alloc::vec![labels.len()],
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    Ok(())
}

fn one_hot<T: Real>(labels: &[u8]) -> Vec<T> {
    labels
        .iter()
        .flat_map(|&l| if l == 1 { [T::zero(), T::one()] } else { [T::one(), T::zero()] })
        .collect()
}

/// Binary cross-entropy for sigmoid heads, categorical cross-entropy for
/// two-way softmax heads and margin loss for capsule lengths.
pub fn loss_for<T: Real>(tape: &mut Tape<T>, output: Var, kind: OutputKind, labels: &[u8]) -> Result<Var> {
    let n = tape.shape(output).first().copied().unwrap_or(0);
    check_labels(labels, n)?;
    let eps = T::of(PROB_EPSILON);
    match kind {
        OutputKind::SigmoidBinary => {
            let y: Vec<T> = labels.iter().map(|&l| T::of(l as f64)).collect();
            tape.bce(output, &y, eps)
        }
        OutputKind::Softmax2 => tape.categorical_ce(output, &one_hot(labels), eps),
        OutputKind::CapsuleLength2 => tape.margin_loss(output, &one_hot(labels)),
    }
}

/// Per-sample score for the positive (disease) class: the sigmoid output,
/// the softmax probability of class 1, or the length of the class-1
/// capsule.
pub fn positive_scores<T: Real>(output: &Tensor<T>, kind: OutputKind) -> Result<Vec<f64>> {
    let s = output.shape();
    let width = match kind {
        OutputKind::SigmoidBinary => 1,
        OutputKind::Softmax2 | OutputKind::CapsuleLength2 => 2,
    };
    if s.len() != 2 || s[1] != width {
        return Err(Error::InvalidShape {
            op: "positive_scores",
            shape: s.to_vec(),
            reason: "output width does not match the head",
        });
    }
    Ok(output.data().chunks(width).map(|r| r[width - 1].as_f64()).collect())
}
