//! Spatial transformer front block: the lambda re-centering layer, the
//! localization network that predicts a per-sample affine transform, and
//! the grid generator plus bilinear sampler that apply it.

use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::layers::{dense, kaiming_uniform};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Shift applied by the lambda layer, mapping `[0, 1]` onto `[-0.5, 0.5]`.
pub const LAMBDA_OFFSET: f64 = 0.5;

pub const LOCNET_FILTERS: usize = 8;
pub const LOCNET_KERNEL: usize = 5;
pub const LOCNET_HIDDEN: usize = 32;
pub const LOCNET_MIN_EXTENT: usize = 8;

pub const IDENTITY_THETA: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

pub fn lambda_scale<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.sub_scalar(x, T::of(LAMBDA_OFFSET))
}

/// Parameter shapes of the localization network for a `c x h x w` input,
/// in forward order: two conv weight/bias pairs, then two dense pairs.
pub fn locnet_param_shapes(c: usize, h: usize, w: usize) -> Result<Vec<Vec<usize>>> {
    if h < LOCNET_MIN_EXTENT || w < LOCNET_MIN_EXTENT {
        return Err(Error::InvalidShape {
            op: "locnet",
            shape: vec![c, h, w],
            reason: "spatial extent must be at least 8x8",
        });
    }
    let (f, k) = (LOCNET_FILTERS, LOCNET_KERNEL);
    let flat = f * (h / 2 / 2) * (w / 2 / 2);
    Ok(vec![
        vec![f, c, k, k],
        vec![f],
        vec![f, f, k, k],
        vec![f],
        vec![flat, LOCNET_HIDDEN],
        vec![LOCNET_HIDDEN],
        vec![LOCNET_HIDDEN, 6],
        vec![6],
    ])
}

/// Fresh locnet parameters. The final layer has zero weights and the
/// identity transform as bias, so the block starts as a pass-through.
pub fn init_locnet<T: Real>(c: usize, h: usize, w: usize, rng: &mut dyn RngCore) -> Result<Vec<Tensor<T>>> {
    let shapes = locnet_param_shapes(c, h, w)?;
    let k2 = LOCNET_KERNEL * LOCNET_KERNEL;
    Ok(vec![
        kaiming_uniform(&shapes[0], c * k2, rng),
        Tensor::zeros(&shapes[1]),
        kaiming_uniform(&shapes[2], LOCNET_FILTERS * k2, rng),
        Tensor::zeros(&shapes[3]),
        kaiming_uniform(&shapes[4], shapes[4][0], rng),
        Tensor::zeros(&shapes[5]),
        Tensor::zeros(&shapes[6]),
        Tensor::from_f64(&shapes[7], &IDENTITY_THETA)?,
    ])
}

/// Predicts `theta [N, 2, 3]` from `x [N, C, H, W]`.
pub fn locnet_forward<T: Real>(tape: &mut Tape<T>, x: Var, params: &[Var]) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op: "locnet",
            shape: s,
            reason: "expected NCHW",
        });
    }
    locnet_param_shapes(s[1], s[2], s[3])?;
    if params.len() != 8 {
        return Err(Error::Invalid("locnet expects 8 parameter tensors".into()));
    }
    let mut h = x;
    for stage in 0..2 {
        h = tape.conv2d(h, params[2 * stage], Some(params[2 * stage + 1]), (1, 1), Padding::Same)?;
        h = tape.relu(h)?;
        h = tape.maxpool2d(h, (2, 2), (2, 2), Padding::Valid)?;
    }
    h = tape.flatten(h)?;
    h = dense(tape, h, params[4], params[5])?;
    h = tape.relu(h)?;
    let theta = dense(tape, h, params[6], params[7])?;
    tape.reshape(theta, &[s[0], 2, 3])
}

/// Resamples `x` through `theta` onto a grid of the same spatial size.
pub fn transform<T: Real>(tape: &mut Tape<T>, x: Var, theta: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            op: "spatial transformer",
            shape: s,
            reason: "expected NCHW",
        });
    }
    let grid = tape.affine_grid(theta, s[2], s[3])?;
    tape.grid_sample(x, grid)
}

/// Locnet followed by resampling. Returns the transformed batch and theta.
pub fn spatial_transformer<T: Real>(tape: &mut Tape<T>, x: Var, params: &[Var]) -> Result<(Var, Var)> {
    let theta = locnet_forward(tape, x, params)?;
    Ok((transform(tape, x, theta)?, theta))
}

/// `n` copies of the identity transform as a `[n, 2, 3]` tensor.
pub fn identity_thetas<T: Real>(n: usize) -> Tensor<T> {
    let data: Vec<f64> = (0..n).flat_map(|_| IDENTITY_THETA).collect();
    Tensor::from_f64(&[n, 2, 3], &data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_endpoints() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[3], &[0.0, 0.5, 1.0]).unwrap());
        let y = lambda_scale(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.5, 0.0, 0.5]);
    }

    #[test]
    fn locnet_starts_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_locnet::<f64>(3, 16, 16, &mut rng).unwrap();
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = params.into_iter().map(|p| tape.param(p)).collect();
        let x = tape.constant(crate::layers::uniform(&[3, 3, 16, 16], 1.0, &mut rng));
        let theta = locnet_forward(&mut tape, x, &vars).unwrap();
        assert_eq!(tape.shape(theta), &[3, 2, 3]);
        assert_eq!(tape.value(theta).data(), identity_thetas::<f64>(3).data());
    }

    #[test]
    fn locnet_rejects_small_inputs() {
        assert!(locnet_param_shapes(1, 7, 8).is_err());
        assert!(locnet_param_shapes(1, 8, 8).is_ok());
    }

    #[test]
    fn grid_midpoint_between_pixels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 1, 2], &[1.0, 3.0]).unwrap());
        let grid = tape.constant(Tensor::from_f64(&[1, 1, 1, 2], &[0.0, 0.0]).unwrap());
        let y = tape.grid_sample(x, grid).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
    }

    #[test]
    fn zoom_and_translation_grids() {
        let mut tape = Tape::<f64>::new();
        let zoom = tape.constant(Tensor::from_f64(&[1, 2, 3], &[0.5, 0.0, 0.0, 0.0, 0.5, 0.0]).unwrap());
        let g = tape.affine_grid(zoom, 5, 5).unwrap();
        let v = tape.value(g).data();
        let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert_eq!((lo, hi), (-0.5, 0.5));

        let shift = tape.constant(Tensor::from_f64(&[1, 2, 3], &[1.0, 0.0, 0.2, 0.0, 1.0, 0.0]).unwrap());
        let id = tape.constant(identity_thetas(1));
        let gs = tape.affine_grid(shift, 4, 4).unwrap();
        let gi = tape.affine_grid(id, 4, 4).unwrap();
        for (a, b) in tape.value(gs).data().chunks(2).zip(tape.value(gi).data().chunks(2)) {
            assert!((a[0] - b[0] - 0.2).abs() < 1e-15);
            assert_eq!(a[1], b[1]);
        }
    }

    #[test]
    fn outside_grid_reads_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 3, 3], 7.0f64));
        let far = tape.constant(Tensor::from_f64(&[1, 2, 3], &[1.0, 0.0, 5.0, 0.0, 1.0, -5.0]).unwrap());
        let y = transform(&mut tape, x, far).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
