//! 2-D cross-correlation via im2col + GEMM, plus nearest-neighbour upsampling.
//!
//! Convolution and its two adjoints form a closed family: the backward pass of
//! each is expressed with the other two, so gradients of gradients work.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::{numel_of, ops::maybe, par, Element, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static FLIP_CONV_WEIGHT_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Negates the conv2d weight gradient on the current thread. Only used to
/// verify that the gradient checker catches a broken backward pass.
#[doc(hidden)]
pub fn inject_conv_backward_sign_flip(on: bool) {
    FLIP_CONV_WEIGHT_GRAD.with(|f| f.set(on));
}

/// Stride, zero padding and dilation per (height, width) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for Conv2dGeometry {
    fn default() -> Self {
        Conv2dGeometry {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }
}

impl Conv2dGeometry {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dGeometry {
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (dilation, dilation),
        }
    }

    /// Output extents for an input of `(h, w)` and a `(kh, kw)` kernel.
    pub fn output_size(&self, input: (usize, usize), kernel: (usize, usize)) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize, d: usize| -> Result<usize> {
            if s == 0 || d == 0 || k == 0 {
                return Err(Error::invalid("conv2d stride, dilation and kernel must be positive"));
            }
            let span = d * (k - 1) + 1;
            let padded = n + 2 * p;
            if padded < span {
                return Err(Error::invalid(format!(
                    "conv2d output extent is not positive (input {n}, padding {p}, dilated kernel {span})"
                )));
            }
            Ok((padded - span) / s + 1)
        };
        Ok((
            axis(input.0, kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
            axis(input.1, kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: Conv2dGeometry,
}

impl Dims {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom == Conv2dGeometry::default()
    }

    /// Offset in the input plane for output row `o` and kernel tap `k` on one
    /// axis, or `None` when the tap lands in the zero padding.
    #[inline]
    fn source(o: usize, k: usize, s: usize, p: usize, d: usize, n: usize) -> Option<usize> {
        let pos = (o * s + k * d) as isize - p as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    }

    /// Output positions `[lo, hi)` whose tap `k` lands inside an input axis
    /// of length `n` (empty when the tap only ever sees padding).
    #[inline]
    fn valid_range(k: usize, s: usize, p: usize, d: usize, n: usize, outs: usize) -> (usize, usize) {
        let off = (k * d) as isize - p as isize;
        let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
        let last = n as isize - 1 - off;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last as usize / s + 1).min(outs);
        (lo.min(hi), hi)
    }
}

/// Builds the `(cin*kh*kw, oh*ow)` patch matrix of one image.
fn im2col<T: Element>(x: &[T], d: &Dims) -> Vec<T> {
    let g = d.geom;
    let (sx, px, dx) = (g.stride.1, g.padding.1, g.dilation.1);
    let mut col = Vec::with_capacity(d.patch() * d.out_pixels());
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let (lo, hi) = Dims::valid_range(j, sx, px, dx, d.w, d.ow);
                let first = (lo * sx + j * dx) as isize - px as isize;
                for oy in 0..d.oh {
                    match Dims::source(oy, i, g.stride.0, g.padding.0, g.dilation.0, d.h) {
                        None => col.resize(col.len() + d.ow, T::zero()),
                        Some(iy) => {
                            col.resize(col.len() + lo, T::zero());
                            if hi > lo {
                                let start = iy * d.w + first as usize;
                                if sx == 1 {
                                    col.extend_from_slice(&plane[start..start + (hi - lo)]);
                                } else {
                                    col.extend(plane[start..].iter().step_by(sx).take(hi - lo));
                                }
                            }
                            col.resize(col.len() + d.ow - hi, T::zero());
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a patch matrix back onto one image (adjoint of `im2col`).
fn col2im<T: Element>(col: &[T], d: &Dims, x: &mut [T]) {
    let ohw = d.out_pixels();
    let g = d.geom;
    let (sx, px, dx) = (g.stride.1, g.padding.1, g.dilation.1);
    for c in 0..d.cin {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = (c * d.kh + i) * d.kw + j;
                let src = &col[row * ohw..(row + 1) * ohw];
                let (lo, hi) = Dims::valid_range(j, sx, px, dx, d.w, d.ow);
                if hi <= lo {
                    continue;
                }
                let first = ((lo * sx + j * dx) as isize - px as isize) as usize;
                for oy in 0..d.oh {
                    let Some(iy) = Dims::source(oy, i, g.stride.0, g.padding.0, g.dilation.0, d.h) else {
                        continue;
                    };
                    let s_row = &src[oy * d.ow + lo..oy * d.ow + hi];
                    let dst = &mut plane[iy * d.w + first..];
                    if sx == 1 {
                        for (a, b) in dst.iter_mut().zip(s_row) {
                            *a = *a + *b;
                        }
                    } else {
                        for (a, b) in dst.iter_mut().step_by(sx).zip(s_row) {
                            *a = *a + *b;
                        }
                    }
                }
            }
        }
    }
}

fn forward_values<T: Element>(x: &[T], w: &[T], d: &Dims) -> Vec<T> {
    let ohw = d.out_pixels();
    let k = d.patch();
    let mut out = vec![T::zero(); d.batch * d.cout * ohw];
    let in_len = d.cin * d.h * d.w;
    par::for_each_chunk_mut(&mut out, d.cout * ohw, |b, yb| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let owned;
        let col: &[T] = if d.is_pointwise() {
            xb
        } else {
            owned = im2col(xb, d);
            &owned
        };
        T::gemm(d.cout, k, ohw, w, (k as isize, 1), col, (ohw as isize, 1), T::zero(), yb, (ohw as isize, 1));
    });
    out
}

fn input_grad_values<T: Element>(gy: &[T], w: &[T], d: &Dims) -> Vec<T> {
    let ohw = d.out_pixels();
    let k = d.patch();
    let in_len = d.cin * d.h * d.w;
    let mut out = vec![T::zero(); d.batch * in_len];
    par::for_each_chunk_mut(&mut out, in_len, |b, xb| {
        let gyb = &gy[b * d.cout * ohw..(b + 1) * d.cout * ohw];
        if d.is_pointwise() {
            T::gemm(d.cin, d.cout, ohw, w, (1, k as isize), gyb, (ohw as isize, 1), T::zero(), xb, (ohw as isize, 1));
        } else {
            let mut col = vec![T::zero(); k * ohw];
            T::gemm(k, d.cout, ohw, w, (1, k as isize), gyb, (ohw as isize, 1), T::zero(), &mut col, (ohw as isize, 1));
            col2im(&col, d, xb);
        }
    });
    out
}

fn weight_grad_values<T: Element>(x: &[T], gy: &[T], d: &Dims) -> Vec<T> {
    let ohw = d.out_pixels();
    let k = d.patch();
    let in_len = d.cin * d.h * d.w;
    let partials = par::map_indexed(d.batch, |b| {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let gyb = &gy[b * d.cout * ohw..(b + 1) * d.cout * ohw];
        let owned;
        let col: &[T] = if d.is_pointwise() {
            xb
        } else {
            owned = im2col(xb, d);
            &owned
        };
        let mut gw = vec![T::zero(); d.cout * k];
        T::gemm(d.cout, ohw, k, gyb, (ohw as isize, 1), col, (1, ohw as isize), T::zero(), &mut gw, (k as isize, 1));
        gw
    });
    // fixed summation order over the batch
    let mut total = vec![T::zero(); d.cout * k];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t = *t + v;
        }
    }
    total
}

fn dims_from(
    x_shape: &[usize],
    w_shape: &[usize],
    out_hw: Option<(usize, usize)>,
    geom: Conv2dGeometry,
) -> Result<Dims> {
    if x_shape.len() != 4 || w_shape.len() != 4 || x_shape[1] != w_shape[1] {
        return Err(Error::shape("conv2d", x_shape, w_shape));
    }
    let (oh, ow) = geom.output_size((x_shape[2], x_shape[3]), (w_shape[2], w_shape[3]))?;
    if let Some(expected) = out_hw {
        if expected != (oh, ow) {
            return Err(Error::shape("conv2d", &[expected.0, expected.1], &[oh, ow]));
        }
    }
    Ok(Dims {
        batch: x_shape[0],
        cin: x_shape[1],
        h: x_shape[2],
        w: x_shape[3],
        cout: w_shape[0],
        kh: w_shape[2],
        kw: w_shape[3],
        oh,
        ow,
        geom,
    })
}

impl<T: Element> Tensor<T> {
    /// Cross-correlation of a `(B, C, H, W)` input with `(F, C, kh, kw)`
    /// weights plus an optional per-filter bias.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, geom: Conv2dGeometry) -> Result<Tensor<T>> {
        let y = self.conv2d_nobias(weight, geom)?;
        match bias {
            None => Ok(y),
            Some(b) => {
                if b.shape() != [weight.shape()[0]] {
                    return Err(Error::shape("conv2d bias", b.shape(), &weight.shape()[..1]));
                }
                y.add(&b.reshape(&[1, b.numel(), 1, 1])?)
            }
        }
    }

    fn conv2d_nobias(&self, weight: &Tensor<T>, geom: Conv2dGeometry) -> Result<Tensor<T>> {
        let d = dims_from(self.shape(), weight.shape(), None, geom)?;
        let data = forward_values(self.data(), weight.data(), &d);
        let (x, w) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            data,
            vec![d.batch, d.cout, d.oh, d.ow],
            "conv2d",
            &[self, weight],
            move |g, need| {
                let gx = maybe(need[0], || g.conv2d_input_grad(&w, geom, (d.h, d.w)))?;
                let gw = maybe(need[1], || {
                    let gw = x.conv2d_weight_grad(g, geom, (d.kh, d.kw))?;
                    Ok(if FLIP_CONV_WEIGHT_GRAD.with(|f| f.get()) {
                        gw.neg()
                    } else {
                        gw
                    })
                })?;
                Ok(vec![gx, gw])
            },
        ))
    }

    /// Adjoint of conv2d with respect to its input: maps an output gradient
    /// `(B, F, oh, ow)` back to an input-shaped `(B, C, h, w)` gradient.
    pub fn conv2d_input_grad(&self, weight: &Tensor<T>, geom: Conv2dGeometry, input_hw: (usize, usize)) -> Result<Tensor<T>> {
        if self.rank() != 4 || weight.rank() != 4 || self.shape()[1] != weight.shape()[0] {
            return Err(Error::shape("conv2d_input_grad", self.shape(), weight.shape()));
        }
        let x_shape = [self.shape()[0], weight.shape()[1], input_hw.0, input_hw.1];
        let d = dims_from(&x_shape, weight.shape(), Some((self.shape()[2], self.shape()[3])), geom)?;
        let data = input_grad_values(self.data(), weight.data(), &d);
        let (gy, w) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(data, x_shape.to_vec(), "conv2d_input_grad", &[self, weight], move |g, need| {
            Ok(vec![
                maybe(need[0], || g.conv2d_nobias(&w, geom))?,
                maybe(need[1], || g.conv2d_weight_grad(&gy, geom, (d.kh, d.kw)))?,
            ])
        }))
    }

    /// Adjoint of conv2d with respect to its weights, given the input `self`
    /// and an output gradient.
    pub fn conv2d_weight_grad(&self, grad_out: &Tensor<T>, geom: Conv2dGeometry, kernel: (usize, usize)) -> Result<Tensor<T>> {
        if self.rank() != 4 || grad_out.rank() != 4 || self.shape()[0] != grad_out.shape()[0] {
            return Err(Error::shape("conv2d_weight_grad", self.shape(), grad_out.shape()));
        }
        let w_shape = [grad_out.shape()[1], self.shape()[1], kernel.0, kernel.1];
        let d = dims_from(self.shape(), &w_shape, Some((grad_out.shape()[2], grad_out.shape()[3])), geom)?;
        let data = weight_grad_values(self.data(), grad_out.data(), &d);
        let (x, gy) = (self.clone(), grad_out.clone());
        Ok(Tensor::from_op(data, w_shape.to_vec(), "conv2d_weight_grad", &[self, grad_out], move |g, need| {
            Ok(vec![
                maybe(need[0], || gy.conv2d_input_grad(g, geom, (d.h, d.w)))?,
                maybe(need[1], || x.conv2d_nobias(g, geom))?,
            ])
        }))
    }

    /// Nearest-neighbour upsampling of a `(B, C, H, W)` tensor by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 || factor == 0 {
            return Err(Error::invalid(format!(
                "upsample_nearest needs rank 4 and factor >= 1, got {:?} x{factor}",
                self.shape()
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (planes, h, w) = (self.shape()[0] * self.shape()[1], self.shape()[2], self.shape()[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.data();
        let mut data = vec![T::zero(); planes * oh * ow];
        par::for_each_chunk_mut(&mut data, oh * ow, |p, dst| {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for x in 0..ow {
                    dst[y * ow + x] = row[x / factor];
                }
            }
        });
        let shape = vec![self.shape()[0], self.shape()[1], oh, ow];
        Ok(Tensor::from_op(data, shape, "upsample_nearest", &[self], move |g, _| {
            Ok(vec![Some(g.downsample_sum(factor)?)])
        }))
    }

    /// Sums non-overlapping `factor x factor` blocks, the adjoint of
    /// [`Tensor::upsample_nearest`].
    pub fn downsample_sum(&self, factor: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 || factor == 0 || self.shape()[2] % factor != 0 || self.shape()[3] % factor != 0 {
            return Err(Error::invalid(format!(
                "downsample_sum of {:?} by {factor}",
                self.shape()
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (planes, h, w) = (self.shape()[0] * self.shape()[1], self.shape()[2], self.shape()[3]);
        let (oh, ow) = (h / factor, w / factor);
        let src = self.data();
        let mut data = vec![T::zero(); planes * oh * ow];
        par::for_each_chunk_mut(&mut data, oh * ow, |p, dst| {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let o = (y / factor) * ow + x / factor;
                    dst[o] = dst[o] + plane[y * w + x];
                }
            }
        });
        let shape = vec![self.shape()[0], self.shape()[1], oh, ow];
        debug_assert_eq!(numel_of(&shape), data.len());
        Ok(Tensor::from_op(data, shape, "downsample_sum", &[self], move |g, _| {
            Ok(vec![Some(g.upsample_nearest(factor)?)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation with zero padding.
    fn direct(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], g: Conv2dGeometry) -> Vec<f64> {
        let (oh, ow) = g.output_size((xs[2], xs[3]), (ws[2], ws[3])).unwrap();
        let mut out = vec![0.0; xs[0] * ws[0] * oh * ow];
        for b in 0..xs[0] {
            for f in 0..ws[0] {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for c in 0..xs[1] {
                            for i in 0..ws[2] {
                                for j in 0..ws[3] {
                                    let iy = (oy * g.stride.0 + i * g.dilation.0) as isize - g.padding.0 as isize;
                                    let ix = (ox * g.stride.1 + j * g.dilation.1) as isize - g.padding.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= xs[2] as isize || ix >= xs[3] as isize {
                                        continue;
                                    }
                                    let xv = x[((b * xs[1] + c) * xs[2] + iy as usize) * xs[3] + ix as usize];
                                    s += xv * w[((f * ws[1] + c) * ws[2] + i) * ws[3] + j];
                                }
                            }
                        }
                        out[((b * ws[0] + f) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_on_ones() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = x.conv2d(&w, None, Conv2dGeometry::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|v| *v == 4.0));
    }

    #[test]
    fn dilated_taps_hit_corners_and_midpoints() {
        let vals: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let x = Tensor::from_vec(vals.clone(), &[1, 1, 5, 5]).unwrap();
        let y = x.conv2d(&Tensor::ones(&[1, 1, 3, 3]), None, Conv2dGeometry::new(1, 0, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        let expected: f64 = [0, 2, 4, 10, 12, 14, 20, 22, 24].iter().map(|&i| vals[i]).sum();
        assert_eq!(y.data()[0], expected);
    }

    #[test]
    fn pointwise_kernel_scales() {
        let x = Tensor::<f64>::from_f64s(&[1.0, -2.0, 3.5, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = x.conv2d(&Tensor::full(&[1, 1, 1, 1], 2.5), None, Conv2dGeometry::default()).unwrap();
        assert_eq!(y.data(), &[2.5, -5.0, 8.75, 10.0]);
    }

    #[test]
    fn integer_inputs_match_direct_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            ([2, 3, 7, 6], [4, 3, 3, 3], Conv2dGeometry::new(1, 1, 1)),
            ([1, 2, 9, 9], [2, 2, 3, 3], Conv2dGeometry::new(2, 1, 1)),
            ([2, 1, 11, 10], [3, 1, 3, 3], Conv2dGeometry::new(1, 4, 4)),
            ([1, 2, 8, 8], [1, 2, 5, 5], Conv2dGeometry::new(2, 2, 1)),
            ([3, 4, 5, 5], [2, 4, 1, 1], Conv2dGeometry::default()),
        ];
        for (xs, ws, g) in cases {
            let x: Vec<f64> = (0..xs.iter().product()).map(|_| rng.gen_range(-5i32..6) as f64).collect();
            let w: Vec<f64> = (0..ws.iter().product()).map(|_| rng.gen_range(-3i32..4) as f64).collect();
            let got = Tensor::from_vec(x.clone(), &xs)
                .unwrap()
                .conv2d(&Tensor::from_vec(w.clone(), &ws).unwrap(), None, g)
                .unwrap();
            assert_eq!(got.data(), direct(&x, xs, &w, ws, g).as_slice());
        }
    }

    #[test]
    fn same_padding_preserves_size_for_all_dilations() {
        for d in [1, 2, 4, 8, 16] {
            let g = Conv2dGeometry::new(1, d, d);
            assert_eq!(g.output_size((40, 40), (3, 3)).unwrap(), (40, 40));
        }
    }

    #[test]
    fn non_positive_extent_is_an_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(x.conv2d(&w, None, Conv2dGeometry::new(1, 0, 2)).is_err());
    }

    #[test]
    fn upsample_replicates_and_backward_sums() {
        let x = Tensor::<f64>::from_f64s(&[7.0], &[1, 1, 1, 1]).unwrap();
        assert_eq!(x.upsample_nearest(1).unwrap().data(), x.data());
        assert_eq!(x.upsample_nearest(2).unwrap().data(), &[7.0; 4]);
        let src = Tensor::<f64>::parameter(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let up = src.upsample_nearest(2).unwrap();
        let g = crate::tensor::grad(&up.sum_all(), &[src], false).unwrap();
        assert_eq!(g[0].data(), &[4.0; 4]);
    }
}
