//! 2-D convolution: direct reference loops and the im2col + GEMM path.
//!
//! Layouts are NCHW for activations and `[filters, in_channels, kh, kw]` for
//! weights.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use super::par;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// Sliding-window geometry shared by convolution and pooling.
///
/// `same` follows the usual convention: output extent `ceil(in / stride)`,
/// total padding `max((out - 1) * stride + k - in, 0)` with the smaller half
/// placed before.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window2d {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn axis_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    if kernel == 0 || stride == 0 || input == 0 {
        return None;
    }
    match padding {
        Padding::Valid => {
            if input < kernel {
                return None;
            }
            Some(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

impl Window2d {
    pub fn new(
        op: &'static str,
        input: (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        let h = axis_extent(input.0, kernel.0, stride.0, padding);
        let w = axis_extent(input.1, kernel.1, stride.1, padding);
        match (h, w) {
            (Some((out_h, pad_top)), Some((out_w, pad_left))) => Ok(Self {
                in_h: input.0,
                in_w: input.1,
                kernel_h: kernel.0,
                kernel_w: kernel.1,
                stride_h: stride.0,
                stride_w: stride.1,
                pad_top,
                pad_left,
                out_h,
                out_w,
            }),
            _ => Err(Error::InvalidShape {
                op,
                shape: vec![input.0, input.1],
                reason: "window does not fit the (padded) input",
            }),
        }
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w
    }

    /// Output columns `[lo, hi)` whose input column `ow*stride + kj - pad`
    /// falls inside the image.
    #[inline]
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let shift = kj as isize - self.pad_left as isize;
        let s = self.stride_w as isize;
        // smallest ow with ow*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // largest ow with ow*s + shift <= in_w - 1
        let last = self.in_w as isize - 1 - shift;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let lo = (lo as usize).min(self.out_w);
        let hi = (hi as usize).min(self.out_w).max(lo);
        (lo, hi)
    }

    #[inline]
    fn input_row(&self, oh: usize, ki: usize) -> Option<usize> {
        let ih = (oh * self.stride_h + ki) as isize - self.pad_top as isize;
        (ih >= 0 && (ih as usize) < self.in_h).then_some(ih as usize)
    }
}

/// Unfold one CHW image into a `[C*kh*kw, out_h*out_w]` column matrix.
pub fn im2col<T: Real>(image: &[T], channels: usize, g: &Window2d, cols: &mut [T]) {
    im2col_at(image, channels, g, cols, g.out_len(), 0);
}

/// [`im2col`] into a wider matrix: row `r` starts at `r * ld + offset`.
fn im2col_at<T: Real>(image: &[T], channels: usize, g: &Window2d, cols: &mut [T], ld: usize, offset: usize) {
    let out_len = g.out_len();
    for c in 0..channels {
        let plane = &image[c * g.in_len()..(c + 1) * g.in_len()];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * ld + offset..row * ld + offset + out_len];
                let (lo, hi) = g.valid_cols(kj);
                for oh in 0..g.out_h {
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    match g.input_row(oh, ki) {
                        None => line.fill(T::zero()),
                        Some(ih) => {
                            line[..lo].fill(T::zero());
                            line[hi..].fill(T::zero());
                            let src = &plane[ih * g.in_w..(ih + 1) * g.in_w];
                            let base = kj as isize - g.pad_left as isize;
                            if g.stride_w == 1 && hi > lo {
                                let start = (lo as isize + base) as usize;
                                line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            } else {
                                for ow in lo..hi {
                                    line[ow] = src[(ow as isize * g.stride_w as isize + base) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a CHW image.
pub fn col2im<T: Real>(cols: &[T], channels: usize, g: &Window2d, image: &mut [T]) {
    col2im_at(cols, channels, g, image, g.out_len(), 0);
}

fn col2im_at<T: Real>(cols: &[T], channels: usize, g: &Window2d, image: &mut [T], ld: usize, offset: usize) {
    let out_len = g.out_len();
    for c in 0..channels {
        let plane = &mut image[c * g.in_len()..(c + 1) * g.in_len()];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * ld + offset..row * ld + offset + out_len];
                let (lo, hi) = g.valid_cols(kj);
                let base = kj as isize - g.pad_left as isize;
                for oh in 0..g.out_h {
                    if let Some(ih) = g.input_row(oh, ki) {
                        let dst = &mut plane[ih * g.in_w..(ih + 1) * g.in_w];
                        let line = &src[oh * g.out_w..(oh + 1) * g.out_w];
                        for ow in lo..hi {
                            dst[(ow as isize * g.stride_w as isize + base) as usize] += line[ow];
                        }
                    }
                }
            }
        }
    }
}

/// Shape information for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub filters: usize,
    pub window: Window2d,
}

impl ConvShape {
    fn patch_len(&self) -> usize {
        self.in_channels * self.window.kernel_h * self.window.kernel_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [
            self.batch,
            self.filters,
            self.window.out_h,
            self.window.out_w,
        ]
    }
}

/// Direct convolution with sequential accumulation; the oracle for
/// [`conv2d_im2col`].
pub fn conv2d_reference<T: Real>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    s: &ConvShape,
) -> Vec<T> {
    let g = &s.window;
    let (kh, kw, c_in) = (g.kernel_h, g.kernel_w, s.in_channels);
    let mut out = vec![T::zero(); s.batch * s.filters * g.out_len()];
    for n in 0..s.batch {
        for f in 0..s.filters {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = T::zero();
                    for c in 0..c_in {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oh * g.stride_h + ki) as isize - g.pad_top as isize;
                                let iw = (ow * g.stride_w + kj) as isize - g.pad_left as isize;
                                if ih < 0 || iw < 0 || ih as usize >= g.in_h || iw as usize >= g.in_w {
                                    continue;
                                }
                                let x = input[((n * c_in + c) * g.in_h + ih as usize) * g.in_w
                                    + iw as usize];
                                let w = weight[((f * c_in + c) * kh + ki) * kw + kj];
                                acc += x * w;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[f];
                    }
                    out[((n * s.filters + f) * g.out_h + oh) * g.out_w + ow] = acc;
                }
            }
        }
    }
    out
}

/// Minimum GEMM width targeted when grouping samples into one product.
const BLOCK_COLUMNS: usize = 256;

/// Samples per GEMM block. Depends only on the geometry, never on the
/// thread count, so every reduction order is fixed.
fn block_samples(s: &ConvShape) -> usize {
    BLOCK_COLUMNS.div_ceil(s.window.out_len().max(1)).clamp(1, s.batch.max(1))
}

/// Column matrix `[patch, B * out_len]` for samples `start..start + B`.
fn block_cols<T: Real>(input: &[T], s: &ConvShape, start: usize, count: usize, cols: &mut [T]) {
    let g = &s.window;
    let in_sample = s.in_channels * g.in_len();
    let ld = count * g.out_len();
    for j in 0..count {
        let n = start + j;
        im2col_at(&input[n * in_sample..(n + 1) * in_sample], s.in_channels, g, cols, ld, j * g.out_len());
    }
}

/// `[filters, B * out_len]` view of a block of output gradients.
fn block_rows<T: Real>(grad_out: &[T], s: &ConvShape, start: usize, count: usize) -> Vec<T> {
    let out_len = s.window.out_len();
    let out_sample = s.filters * out_len;
    let ld = count * out_len;
    let mut dy = vec![T::zero(); s.filters * ld];
    for j in 0..count {
        let src = &grad_out[(start + j) * out_sample..(start + j + 1) * out_sample];
        for f in 0..s.filters {
            dy[f * ld + j * out_len..f * ld + (j + 1) * out_len].copy_from_slice(&src[f * out_len..(f + 1) * out_len]);
        }
    }
    dy
}

/// im2col + GEMM forward pass over blocks of samples.
pub fn conv2d_im2col<T: Real>(input: &[T], weight: &[T], bias: Option<&[T]>, s: &ConvShape) -> Vec<T> {
    let out_len = s.window.out_len();
    let out_sample = s.filters * out_len;
    let patch = s.patch_len();
    let block = block_samples(s);
    let mut out = vec![T::zero(); s.batch * out_sample];
    let w = MatRef::new(weight, s.filters, patch);
    par::for_each_chunk(&mut out, block * out_sample, |bi, dst| {
        let start = bi * block;
        let count = dst.len() / out_sample;
        let ld = count * out_len;
        let mut cols = vec![T::zero(); patch * ld];
        block_cols(input, s, start, count, &mut cols);
        if count == 1 {
            gemm(T::one(), w, MatRef::new(&cols, patch, ld), T::zero(), dst);
        } else {
            let mut tmp = vec![T::zero(); s.filters * ld];
            gemm(T::one(), w, MatRef::new(&cols, patch, ld), T::zero(), &mut tmp);
            for j in 0..count {
                for f in 0..s.filters {
                    dst[j * out_sample + f * out_len..j * out_sample + (f + 1) * out_len]
                        .copy_from_slice(&tmp[f * ld + j * out_len..f * ld + (j + 1) * out_len]);
                }
            }
        }
        if let Some(b) = bias {
            for (i, row) in dst.chunks_mut(out_len).enumerate() {
                let bf = b[i % s.filters];
                row.iter_mut().for_each(|v| *v += bf);
            }
        }
    });
    out
}

/// Number of fixed block groups used when reducing weight gradients. The
/// grouping is independent of the thread count, which keeps the summation
/// order (and therefore the result) stable.
const WEIGHT_GRAD_GROUPS: usize = 4;

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    s: &ConvShape,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = s.window;
    let out_len = g.out_len();
    let in_sample = s.in_channels * g.in_len();
    let out_sample = s.filters * out_len;
    let patch = s.patch_len();
    let block = block_samples(s);
    let blocks = s.batch.div_ceil(block);

    let input_grad = want.0.then(|| {
        let mut dx = vec![T::zero(); s.batch * in_sample];
        let wt = MatRef::new(weight, s.filters, patch).t();
        par::for_each_chunk(&mut dx, block * in_sample, |bi, dst| {
            let start = bi * block;
            let count = dst.len() / in_sample;
            let ld = count * out_len;
            let dy = block_rows(grad_out, s, start, count);
            let mut cols = vec![T::zero(); patch * ld];
            gemm(T::one(), wt, MatRef::new(&dy, s.filters, ld), T::zero(), &mut cols);
            for j in 0..count {
                col2im_at(&cols, s.in_channels, &g, &mut dst[j * in_sample..(j + 1) * in_sample], ld, j * out_len);
            }
        });
        dx
    });

    let weight_grad = want.1.then(|| {
        let groups = WEIGHT_GRAD_GROUPS.min(blocks).max(1);
        let partials = par::map_range(groups, |gi| {
            let mut acc = vec![T::zero(); s.filters * patch];
            for bi in gi * blocks / groups..(gi + 1) * blocks / groups {
                let start = bi * block;
                let count = block.min(s.batch - start);
                let ld = count * out_len;
                let mut cols = vec![T::zero(); patch * ld];
                block_cols(input, s, start, count, &mut cols);
                let dy = block_rows(grad_out, s, start, count);
                gemm(
                    T::one(),
                    MatRef::new(&dy, s.filters, ld),
                    MatRef::new(&cols, patch, ld).t(),
                    T::one(),
                    &mut acc,
                );
            }
            acc
        });
        let mut iter = partials.into_iter();
        let mut total = iter.next().unwrap_or_else(|| vec![T::zero(); s.filters * patch]);
        for part in iter {
            total.iter_mut().zip(&part).for_each(|(t, p)| *t += *p);
        }
        total
    });

    let bias_grad = want.2.then(|| {
        let mut db = vec![T::zero(); s.filters];
        for n in 0..s.batch {
            for (f, d) in db.iter_mut().enumerate() {
                let row = &grad_out[n * out_sample + f * out_len..n * out_sample + (f + 1) * out_len];
                *d += row.iter().copied().sum::<T>();
            }
        }
        db
    });

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}
