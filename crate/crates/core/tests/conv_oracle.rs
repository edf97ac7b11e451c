//! The im2col fast path against the direct convolution loops, plus window
//! geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdsnet_core::kernels::conv::{conv2d_im2col, conv2d_reference, ConvShape};
use vdsnet_core::kernels::pool::maxpool2d;
use vdsnet_core::kernels::{Padding, Window2d};
use vdsnet_core::{Tape, Tensor};

fn random_case(rng: &mut ChaCha8Rng) -> (ConvShape, Vec<f64>, Vec<f64>, Vec<f64>) {
    loop {
        let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
        let (h, w) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let (kh, kw) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let (sh, sw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let Ok(window) = Window2d::new("conv2d", (h, w), (kh, kw), (sh, sw), padding) else {
            continue;
        };
        let s = ConvShape {
            batch: rng.gen_range(1..=4),
            in_channels: rng.gen_range(1..=4),
            filters: rng.gen_range(1..=5),
            window,
        };
        let x = (0..s.batch * s.in_channels * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wt = (0..s.filters * s.in_channels * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = (0..s.filters).map(|_| rng.gen_range(-1.0..1.0)).collect();
        return (s, x, wt, b);
    }
}

#[test]
fn im2col_matches_direct_loops_on_200_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (s, x, w, b) = random_case(&mut rng);
        let fast = conv2d_im2col(&x, &w, Some(&b), &s);
        let slow = conv2d_reference(&x, &w, Some(&b), &s);
        assert_eq!(fast.len(), slow.len());
        for (a, r) in fast.iter().zip(&slow) {
            worst = worst.max((a - r).abs());
        }
    }
    assert!(worst < 1e-5, "max deviation {worst:e}");
}

#[test]
fn single_precision_agrees_too() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let (s, x, w, b) = random_case(&mut rng);
        let cast = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
        let fast = conv2d_im2col(&cast(&x), &cast(&w), Some(&cast(&b)), &s);
        let slow = conv2d_reference(&x, &w, Some(&b), &s);
        for (a, r) in fast.iter().zip(&slow) {
            assert!((*a as f64 - r).abs() < 1e-5 * (1.0 + r.abs()) * 10.0);
        }
    }
}

#[test]
fn identity_kernel_copies_input() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(&[1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap());
    let k = t.constant(Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap());
    let y = t.conv2d(x, k, None, (1, 1), Padding::Valid).unwrap();
    assert_eq!(t.value(y), t.value(x));
}

#[test]
fn small_case_within_1e6() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..2 * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut t = Tape::<f64>::new();
    let vx = t.constant(Tensor::new(&[1, 2, 5, 5], x.clone()).unwrap());
    let vw = t.constant(Tensor::new(&[3, 2, 3, 3], w.clone()).unwrap());
    let y = t.conv2d(vx, vw, None, (1, 1), Padding::Valid).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 3, 3]);
    for f in 0..3 {
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            acc += x[c * 25 + (i + ki) * 5 + j + kj] * w[((f * 2 + c) * 3 + ki) * 3 + kj];
                        }
                    }
                }
                assert!((t.value(y).data()[(f * 3 + i) * 3 + j] - acc).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn same_padding_preserves_extent_for_odd_kernels() {
    for k in [1, 3, 5, 7, 9] {
        for n in 1..=20 {
            let g = Window2d::new("conv2d", (n, n + 3), (k, k), (1, 1), Padding::Same).unwrap();
            assert_eq!((g.out_h, g.out_w), (n, n + 3));
        }
    }
    let g = Window2d::new("conv2d", (64, 64), (9, 9), (2, 2), Padding::Same).unwrap();
    assert_eq!((g.out_h, g.out_w), (32, 32));
    for (n, k, s) in [(64, 9, 1), (56, 9, 2), (10, 3, 3)] {
        let g = Window2d::new("conv2d", (n, n), (k, k), (s, s), Padding::Valid).unwrap();
        assert_eq!(g.out_h, (n - k) / s + 1);
    }
}

#[test]
fn conv_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let wrong_channels = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(t.conv2d(x, wrong_channels, None, (1, 1), Padding::Same).is_err());
    let too_big = t.constant(Tensor::zeros(&[1, 2, 5, 5]));
    assert!(t.conv2d(x, too_big, None, (1, 1), Padding::Valid).is_err());
    assert!(t.maxpool2d(x, (5, 5), (1, 1), Padding::Valid).is_err());
}

#[test]
fn pooling_examples() {
    let g = Window2d::new("pool", (2, 2), (2, 2), (2, 2), Padding::Valid).unwrap();
    let (out, _) = maxpool2d(&[1.0f64, 2.0, 3.0, 4.0], 1, &g);
    assert_eq!(out, vec![4.0]);

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::full(&[1, 1, 4, 4], 3.0));
    let y = t.maxpool2d(x, (2, 2), (2, 2), Padding::Valid).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 3.0));
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    let g = t.grad(x).unwrap();
    let winners: Vec<usize> = (0..16).filter(|&i| g[i] != 0.0).collect();
    assert_eq!(winners, vec![0, 2, 8, 10]);

    let mut extent = 64;
    for _ in 0..5 {
        extent = Window2d::new("pool", (extent, extent), (2, 2), (2, 2), Padding::Valid).unwrap().out_h;
    }
    assert_eq!(extent, 2);
}
