//! Squash, routing-by-agreement, primary capsules and the length readout.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdsnet_core::capsule::{capsule_length, margin_loss, primary_caps, routing, squash};
use vdsnet_core::gradcheck::grad_check;
use vdsnet_core::kernels::Padding;
use vdsnet_core::zoo::{ModelId, NodeShape};
use vdsnet_core::{Tape, Tensor};

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn squash_norm(v: &[f64]) -> f64 {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[1, v.len()], v.to_vec()).unwrap());
    let y = squash(&mut t, x).unwrap();
    t.value(y).data().iter().map(|a| a * a).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn squash_stays_inside_the_unit_ball(v in proptest::collection::vec(-1e5f64..1e5, 1..17)) {
        let n = squash_norm(&v);
        prop_assert!(n < 1.0);
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!((n - norm * norm / (1.0 + norm * norm)).abs() < 1e-12);
    }

    #[test]
    fn squash_keeps_direction(v in proptest::collection::vec(-10f64..10.0, 2..9)) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[v.len()], v.clone()).unwrap());
        let y = squash(&mut t, x).unwrap();
        let out = t.value(y).data();
        let dot: f64 = out.iter().zip(&v).map(|(a, b)| a * b).sum();
        prop_assert!(dot >= 0.0);
    }

    #[test]
    fn squash_is_monotone_in_norm(a in 0.0f64..50.0, b in 0.0f64..50.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(squash_norm(&[lo, 0.0]) <= squash_norm(&[hi, 0.0]));
    }

    #[test]
    fn couplings_are_distributions(seed in any::<u64>(), iters in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::<f64>::new();
        let u = t.constant(rand_tensor(&[2, 5, 3, 4], -1.0, 1.0, &mut rng));
        let r = routing(&mut t, u, iters).unwrap();
        prop_assert_eq!(r.couplings.len(), iters);
        for c in &r.couplings {
            for row in c.data().chunks(3) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p > 0.0));
            }
        }
        for row in r.couplings[0].data().chunks(3) {
            prop_assert!(row.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        }
    }
}

#[test]
fn squash_examples() {
    assert!((squash_norm(&[1.0, 0.0, 0.0]) - 0.5).abs() < 1e-9);
    assert!((squash_norm(&[0.6, 0.8]) - 0.5).abs() < 1e-9);
    assert_eq!(squash_norm(&[0.0, 0.0]), 0.0);
    assert!(squash_norm(&[1e5, 0.0]) > 0.9999);
}

#[test]
fn routing_ignores_input_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = rand_tensor(&[1, 6, 2, 3], -1.0, 1.0, &mut rng);
    let perm = [4usize, 0, 5, 2, 1, 3];
    let row = 2 * 3;
    let permuted: Vec<f64> = perm.iter().flat_map(|&i| u.data()[i * row..(i + 1) * row].to_vec()).collect();
    let mut t = Tape::<f64>::new();
    let a = t.constant(u);
    let b = t.constant(Tensor::new(&[1, 6, 2, 3], permuted).unwrap());
    let ra = routing(&mut t, a, 3).unwrap();
    let rb = routing(&mut t, b, 3).unwrap();
    assert!(t.value(ra.output).max_abs_diff(t.value(rb.output)) < 1e-12);
}

#[test]
fn identical_predictions_keep_uniform_couplings() {
    let pred = [0.3, -0.2, 0.5];
    let data: Vec<f64> = (0..4 * 2).flat_map(|_| pred).collect();
    let mut t = Tape::<f64>::new();
    let u = t.constant(Tensor::new(&[1, 4, 2, 3], data).unwrap());
    let r = routing(&mut t, u, 3).unwrap();
    for c in &r.couplings {
        assert!(c.data().iter().all(|&p| (p - 0.5).abs() < 1e-12));
    }
    let mut t2 = Tape::<f64>::new();
    let s = t2.constant(Tensor::new(&[3], pred.iter().map(|p| p * 4.0 * 0.5).collect()).unwrap());
    let expect = squash(&mut t2, s).unwrap();
    for j in 0..2 {
        for d in 0..3 {
            let got = t.value(r.output).data()[j * 3 + d];
            assert!((got - t2.value(expect).data()[d]).abs() < 1e-12);
        }
    }
}

#[test]
fn agreement_beats_conflicting_predictions() {
    // Output 0 receives the same vote from every input; output 1 receives
    // votes that cancel pairwise.
    let mut data = Vec::new();
    for i in 0..4 {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        data.extend([1.0, 0.5, 0.0, sign, -sign * 0.5, 0.0]);
    }
    let mut t = Tape::<f64>::new();
    let u = t.constant(Tensor::new(&[1, 4, 2, 3], data).unwrap());
    let r = routing(&mut t, u, 3).unwrap();
    let last = r.couplings.last().unwrap();
    assert!(last.data().chunks(2).all(|c| c[0] > 0.5));
    let len = capsule_length(&mut t, r.output).unwrap();
    let l = t.value(len).data();
    assert!(l[0] > l[1] && l[1] < 1e-12);
}

#[test]
fn routing_rejects_bad_arguments() {
    let mut t = Tape::<f64>::new();
    let u = t.constant(Tensor::zeros(&[1, 2, 2, 3]));
    assert!(routing(&mut t, u, 0).is_err());
    let flat = t.constant(Tensor::zeros(&[2, 3]));
    assert!(routing(&mut t, flat, 1).is_err());
}

#[test]
fn modified_grid_has_8192_primary_capsules() {
    let spec = ModelId::CapsnetModified.spec_at(64).unwrap();
    let plan = spec.plan().unwrap();
    assert!(plan.shapes.contains(&NodeShape::Caps { count: 8192, dim: 8 }));
    assert!(plan.shapes.contains(&NodeShape::Caps { count: 2, dim: 16 }));
    assert_eq!(plan.output(), NodeShape::Flat(2));
}

#[test]
fn zero_features_give_zero_capsules() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 4, 6, 6]));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = t.constant(rand_tensor(&[2 * 8, 4, 3, 3], -1.0, 1.0, &mut rng));
    let b = t.constant(Tensor::zeros(&[16]));
    let caps = primary_caps(&mut t, x, w, b, 8, 2, 2, Padding::Same).unwrap();
    assert_eq!(t.shape(caps), &[1, 3 * 3 * 2, 8]);
    assert!(t.value(caps).data().iter().all(|&v| v == 0.0));
    let bad = t.constant(Tensor::zeros(&[15, 4, 3, 3]));
    assert!(primary_caps(&mut t, x, bad, b, 8, 2, 2, Padding::Same).is_err());
}

#[test]
fn primary_capsules_group_channels_per_location() {
    // 1x1 conv with identity weights: capsule k at a location holds the
    // input channels k*dim..(k+1)*dim at that location, then squashed.
    let (dim, ch) = (2usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = rand_tensor(&[1, 4, 2, 2], -1.0, 1.0, &mut rng);
    let eye: Vec<f64> = (0..16).map(|i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).collect();
    let mut t = Tape::<f64>::new();
    let x = t.constant(input.clone());
    let w = t.constant(Tensor::new(&[4, 4, 1, 1], eye).unwrap());
    let b = t.constant(Tensor::zeros(&[4]));
    let caps = primary_caps(&mut t, x, w, b, dim, ch, 1, Padding::Valid).unwrap();
    let out = t.value(caps).data().to_vec();
    for loc in 0..4 {
        for k in 0..ch {
            let raw: Vec<f64> = (0..dim).map(|d| input.data()[(k * dim + d) * 4 + loc]).collect();
            let n = raw.iter().map(|a| a * a).sum::<f64>().sqrt();
            for d in 0..dim {
                let want = raw[d] * n / (1.0 + n * n);
                assert!((out[(loc * ch + k) * dim + d] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn length_and_margin_examples() {
    let mut t = Tape::<f64>::new();
    let v = t.constant(Tensor::from_f64(&[1, 2, 2], &[3.0, 4.0, 0.0, 0.0]).unwrap());
    let l = capsule_length(&mut t, v).unwrap();
    assert_eq!(t.value(l).data(), &[5.0, 0.0]);

    let confident = t.constant(Tensor::from_f64(&[1, 2], &[0.95, 0.05]).unwrap());
    let m = margin_loss(&mut t, confident, &[1.0, 0.0]).unwrap();
    assert_eq!(t.value(m).item().unwrap(), 0.0);
    let unsure = t.constant(Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap());
    let m = margin_loss(&mut t, unsure, &[1.0, 0.0]).unwrap();
    assert!((t.value(m).item().unwrap() - 0.24).abs() < 1e-12);
    assert!(margin_loss(&mut t, unsure, &[1.0, 1.0]).is_err());
}

#[test]
fn capsule_readout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let lengths = rand_tensor(&[3, 2], 0.15, 0.85, &mut rng);
    let e = grad_check(|t, x| margin_loss(t, x, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]), &lengths, 1e-6).unwrap();
    assert!(e < 1e-6, "{e:e}");
    let u = rand_tensor(&[2, 3, 2, 4], -1.0, 1.0, &mut rng);
    let e = grad_check(
        |t, x| {
            let r = routing(t, x, 3)?;
            let l = capsule_length(t, r.output)?;
            margin_loss(t, l, &[0.0, 1.0, 1.0, 0.0])
        },
        &u,
        1e-6,
    )
    .unwrap();
    assert!(e < 1e-5, "{e:e}");
}
