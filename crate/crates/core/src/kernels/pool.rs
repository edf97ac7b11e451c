use alloc::vec;
use alloc::vec::Vec;

use super::conv::Window2d;
use crate::scalar::Real;

/// Max pooling over NCHW planes. Returns the pooled values and, for each
/// output cell, the flat input offset of the winning element. Ties resolve
/// to the first maximum in row-major window order; padded cells never win.
pub fn maxpool2d<T: Real>(
    input: &[T],
    planes: usize,
    g: &Window2d,
) -> (Vec<T>, Vec<usize>) {
    let out_len = g.out_len();
    let mut out = vec![T::zero(); planes * out_len];
    let mut argmax = vec![0usize; planes * out_len];
    for p in 0..planes {
        let base = p * g.in_len();
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best: Option<(T, usize)> = None;
                for ki in 0..g.kernel_h {
                    let ih = (oh * g.stride_h + ki) as isize - g.pad_top as isize;
                    if ih < 0 || ih as usize >= g.in_h {
                        continue;
                    }
                    for kj in 0..g.kernel_w {
                        let iw = (ow * g.stride_w + kj) as isize - g.pad_left as isize;
                        if iw < 0 || iw as usize >= g.in_w {
                            continue;
                        }
                        let at = base + ih as usize * g.in_w + iw as usize;
                        let v = input[at];
                        match best {
                            Some((b, _)) if !(v > b) => {}
                            _ => best = Some((v, at)),
                        }
                    }
                }
                let (v, at) = best.expect("pool window covers at least one input cell");
                let o = p * out_len + oh * g.out_w + ow;
                out[o] = v;
                argmax[o] = at;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2d_backward<T: Real>(grad_out: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &at) in grad_out.iter().zip(argmax) {
        dx[at] += g;
    }
    dx
}
