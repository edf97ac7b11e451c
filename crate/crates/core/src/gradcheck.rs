//! Finite-difference gradient verification in double precision.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error floor used in the denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a relu, pooling, sampling or
    /// loss-hinge boundary and therefore have no two-sided derivative.
    pub skipped_at_kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `f` against central differences at every coordinate of `x`.
/// Returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = (0..x.len()).map(|i| (0, i)).collect();
    let report = check_gradients(core::slice::from_ref(x), |t, v| f(t, v[0]), &coords, eps)?;
    Ok(report.max_rel_error)
}

/// Checks a scalar function of several inputs at the given
/// `(input, coordinate)` pairs.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    mut f: F,
    coords: &[(usize, usize)],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(loss).to_vec()));
    }
    let base_signature = tape.kink_signature();
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();
    drop(tape);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut eval = |work: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = work.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape.value(loss).item()?, tape.kink_signature()))
    };

    let mut report = GradCheckReport::default();
    for &(input, coord) in coords {
        let original = work[input].data()[coord];
        work[input].data_mut()[coord] = original + eps;
        let (plus, sig_plus) = eval(&work)?;
        work[input].data_mut()[coord] = original - eps;
        let (minus, sig_minus) = eval(&work)?;
        work[input].data_mut()[coord] = original;
        if sig_plus != base_signature || sig_minus != base_signature {
            report.skipped_at_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[input].as_ref().map_or(0.0, |g| g[coord]);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((input, coord));
        }
    }
    Ok(report)
}

/// `sum(y * r)` for fixed pseudo-random weights `r` in `[-1, 1]`. Turns any
/// output into a scalar whose gradient exercises every element.
pub fn random_projection(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..tape.value(y).len()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let r = tape.constant(Tensor::new(tape.shape(y), r)?);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

/// Up to `per_input` distinct random coordinates from each input.
pub fn sample_coords(inputs: &[Tensor<f64>], per_input: usize, rng: &mut dyn RngCore) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let n = x.len();
        if n <= per_input {
            out.extend((0..n).map(|c| (i, c)));
        } else {
            let mut picked: Vec<usize> = sample(rng, n, per_input).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|c| (i, c)));
        }
    }
    out
}
