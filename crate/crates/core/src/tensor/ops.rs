//! Elementwise arithmetic, broadcasting, reductions and shape manipulation.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{numel_of, par, Element, Tensor};
use crate::error::{Error, Result};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Elu(f64),
    Tanh,
    Sigmoid,
}

pub(crate) fn maybe<T: Element>(
    need: bool,
    f: impl FnOnce() -> Result<Tensor<T>>,
) -> Result<Option<Tensor<T>>> {
    if need {
        f().map(Some)
    } else {
        Ok(None)
    }
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides into a row-major buffer of shape `small`, indexed by the
/// multi-index of `big`. Broadcast (extent 1 or missing) dims get stride 0.
fn aligned_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let offset = big.len() - small.len();
    let mut strides = vec![0; big.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        if small[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= small[i];
    }
    strides
}

/// Visits every multi-index of `shape` in row-major order, passing the
/// flat offset computed from `strides`.
fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    let n = numel_of(shape);
    if n == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0);
        return;
    }
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    loop {
        let base: usize = idx.iter().zip(strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            f(base + j * inner_stride);
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn expand<T: Copy>(src: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let strides = aligned_strides(from, to);
    let mut out = Vec::with_capacity(numel_of(to));
    for_each_offset(to, &strides, |o| out.push(src[o]));
    out
}

fn reduce_into<T: Element>(src: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let strides = aligned_strides(to, from);
    let mut out = vec![T::zero(); numel_of(to)];
    let mut k = 0;
    for_each_offset(from, &strides, |o| {
        out[o] = out[o] + src[k];
        k += 1;
    });
    out
}

fn check_positive<T: Element>(op: &'static str, data: &[T], allow_zero: bool) -> Result<()> {
    let bad = data
        .iter()
        .find(|v| if allow_zero { **v < T::zero() } else { **v <= T::zero() } || v.is_nan());
    match bad {
        Some(v) => Err(Error::Domain {
            op,
            detail: format!("operand {v} outside the domain"),
        }),
        None => Ok(()),
    }
}

impl<T: Element> Tensor<T> {
    fn binary_values(&self, other: &Tensor<T>, op: &'static str, f: fn(T, T) -> T) -> Result<(Vec<T>, Vec<usize>)> {
        if self.shape() == other.shape() {
            return Ok((par::zip(self.data(), other.data(), f), self.shape().to_vec()));
        }
        let shape =
            broadcast_shape(self.shape(), other.shape()).ok_or_else(|| Error::shape(op, self.shape(), other.shape()))?;
        let a = if self.shape() == shape.as_slice() {
            self.to_vec()
        } else {
            expand(self.data(), self.shape(), &shape)
        };
        let b = if other.shape() == shape.as_slice() {
            other.to_vec()
        } else {
            expand(other.data(), other.shape(), &shape)
        };
        Ok((par::zip(&a, &b, f), shape))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = self.binary_values(other, "add", |a, b| a + b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(Tensor::from_op(data, shape, "add", &[self, other], move |g, need| {
            Ok(vec![maybe(need[0], || g.sum_to(&sa))?, maybe(need[1], || g.sum_to(&sb))?])
        }))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = self.binary_values(other, "sub", |a, b| a - b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(Tensor::from_op(data, shape, "sub", &[self, other], move |g, need| {
            Ok(vec![
                maybe(need[0], || g.sum_to(&sa))?,
                maybe(need[1], || g.neg().sum_to(&sb))?,
            ])
        }))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = self.binary_values(other, "mul", |a, b| a * b)?;
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(data, shape, "mul", &[self, other], move |g, need| {
            Ok(vec![
                maybe(need[0], || g.mul(&b)?.sum_to(a.shape()))?,
                maybe(need[1], || g.mul(&a)?.sum_to(b.shape()))?,
            ])
        }))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if other.data().iter().any(|v| *v == T::zero()) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let (data, shape) = self.binary_values(other, "div", |a, b| a / b)?;
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(data, shape, "div", &[self, other], move |g, need| {
            Ok(vec![
                maybe(need[0], || g.div(&b)?.sum_to(a.shape()))?,
                maybe(need[1], || g.mul(&a)?.div(&b.mul(&b)?)?.neg().sum_to(b.shape()))?,
            ])
        }))
    }

    /// Elementwise `self ^ exponent` with a tensor exponent.
    pub fn pow(&self, exponent: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = self.binary_values(exponent, "pow", |a, b| a.powf(b))?;
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Domain {
                op: "pow",
                detail: "negative base with non-integer exponent".into(),
            });
        }
        let (a, b) = (self.clone(), exponent.clone());
        Ok(Tensor::from_op(data, shape, "pow", &[self, exponent], move |g, need| {
            Ok(vec![
                maybe(need[0], || {
                    let d = b.mul(&a.pow(&b.add_scalar(-T::one()))?)?;
                    g.mul(&d)?.sum_to(a.shape())
                })?,
                maybe(need[1], || g.mul(&a.pow(&b)?)?.mul(&a.log()?)?.sum_to(b.shape()))?,
            ])
        }))
    }

    pub fn neg(&self) -> Tensor<T> {
        let data = par::map(self.data(), |v| -v);
        Tensor::from_op(data, self.shape().to_vec(), "neg", &[self], |g, _| Ok(vec![Some(g.neg())]))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = par::map(self.data(), |v| v * c);
        Tensor::from_op(data, self.shape().to_vec(), "scale", &[self], move |g, _| {
            Ok(vec![Some(g.scale(c))])
        })
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = par::map(self.data(), |v| v + c);
        Tensor::from_op(data, self.shape().to_vec(), "add_scalar", &[self], |g, _| Ok(vec![Some(g.clone())]))
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor<T> {
        let data = par::map(self.data(), |v| v.abs());
        let sign = Tensor::constant(
            par::map(self.data(), |v| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }),
            self.shape().to_vec(),
        );
        Tensor::from_op(data, self.shape().to_vec(), "abs", &[self], move |g, _| Ok(vec![Some(g.mul(&sign)?)]))
    }

    pub fn exp(&self) -> Tensor<T> {
        let data = par::map(self.data(), |v| v.exp());
        let x = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), "exp", &[self], move |g, _| Ok(vec![Some(g.mul(&x.exp())?)]))
    }

    /// Natural logarithm. Fails on non-positive entries.
    pub fn log(&self) -> Result<Tensor<T>> {
        check_positive("log", self.data(), false)?;
        let data = par::map(self.data(), |v| v.ln());
        let x = self.clone();
        Ok(Tensor::from_op(data, self.shape().to_vec(), "log", &[self], move |g, _| {
            Ok(vec![Some(g.div(&x)?)])
        }))
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        check_positive("sqrt", self.data(), true)?;
        let data = par::map(self.data(), |v| v.sqrt());
        let x = self.clone();
        Ok(Tensor::from_op(data, self.shape().to_vec(), "sqrt", &[self], move |g, _| {
            Ok(vec![Some(g.div(&x.sqrt()?.scale(T::of(2.0)))?)])
        }))
    }

    /// Elementwise power with a constant exponent.
    pub fn pow_scalar(&self, p: T) -> Result<Tensor<T>> {
        let integral = p == p.round();
        if !integral {
            check_positive("pow", self.data(), true)?;
        }
        if p < T::zero() && self.data().iter().any(|v| *v == T::zero()) {
            return Err(Error::Domain {
                op: "pow",
                detail: "zero base with negative exponent".into(),
            });
        }
        let data = par::map(self.data(), |v| if p == T::of(2.0) { v * v } else { v.powf(p) });
        let x = self.clone();
        Ok(Tensor::from_op(data, self.shape().to_vec(), "pow_scalar", &[self], move |g, _| {
            if p == T::zero() {
                return Ok(vec![Some(Tensor::zeros(x.shape()))]);
            }
            if p == T::one() {
                return Ok(vec![Some(g.clone())]);
            }
            Ok(vec![Some(g.mul(&x.pow_scalar(p - T::one())?.scale(p))?)])
        }))
    }

    pub fn activation(&self, kind: Activation) -> Tensor<T> {
        match kind {
            Activation::Relu => self.leaky_relu(T::zero()),
            Activation::LeakyRelu(s) => self.leaky_relu(T::of(s)),
            Activation::Elu(a) => self.elu(T::of(a)),
            Activation::Tanh => self.tanh(),
            Activation::Sigmoid => self.sigmoid(),
        }
    }

    pub fn relu(&self) -> Tensor<T> {
        self.leaky_relu(T::zero())
    }

    /// `x` for `x > 0`, `slope * x` otherwise (slope 0 gives relu with
    /// subgradient 0 at the kink).
    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        let data = par::map(self.data(), |v| if v > T::zero() { v } else { v * slope });
        let deriv = Tensor::constant(
            par::map(self.data(), |v| if v > T::zero() { T::one() } else { slope }),
            self.shape().to_vec(),
        );
        let name = if slope == T::zero() { "relu" } else { "leaky_relu" };
        Tensor::from_op(data, self.shape().to_vec(), name, &[self], move |g, _| Ok(vec![Some(g.mul(&deriv)?)]))
    }

    pub fn elu(&self, alpha: T) -> Tensor<T> {
        let data = par::map(self.data(), |v| if v > T::zero() { v } else { alpha * v.exp_m1() });
        let x = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), "elu", &[self], move |g, _| {
            let pos = Tensor::constant(
                par::map(x.data(), |v| if v > T::zero() { T::one() } else { T::zero() }),
                x.shape().to_vec(),
            );
            let neg = Tensor::constant(
                par::map(x.data(), |v| if v > T::zero() { T::zero() } else { T::one() }),
                x.shape().to_vec(),
            );
            // for x <= 0: d/dx elu = elu(x) + alpha
            let d = x.elu(alpha).add_scalar(alpha).mul(&neg)?.add(&pos)?;
            Ok(vec![Some(g.mul(&d)?)])
        })
    }

    pub fn tanh(&self) -> Tensor<T> {
        let data = par::map(self.data(), |v| v.tanh());
        let x = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), "tanh", &[self], move |g, _| {
            let y = x.tanh();
            let d = y.mul(&y)?.neg().add_scalar(T::one());
            Ok(vec![Some(g.mul(&d)?)])
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data = par::map(self.data(), |v| T::one() / (T::one() + (-v).exp()));
        let x = self.clone();
        Tensor::from_op(data, self.shape().to_vec(), "sigmoid", &[self], move |g, _| {
            let s = x.sigmoid();
            let d = s.mul(&s.neg().add_scalar(T::one()))?;
            Ok(vec![Some(g.mul(&d)?)])
        })
    }

    /// Same values viewed with a new shape of equal size.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        let orig = self.shape().to_vec();
        Ok(Tensor::from_shared_op(
            self.shared_data(),
            shape.to_vec(),
            "reshape",
            &[self],
            move |g, _| Ok(vec![Some(g.reshape(&orig)?)]),
        ))
    }

    /// Repeats the tensor along broadcast dimensions up to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        match broadcast_shape(self.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", self.shape(), shape)),
        }
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let data = expand(self.data(), self.shape(), shape);
        let orig = self.shape().to_vec();
        Ok(Tensor::from_op(data, shape.to_vec(), "broadcast_to", &[self], move |g, _| {
            Ok(vec![Some(g.sum_to(&orig)?)])
        }))
    }

    /// Sums over the dimensions that `shape` broadcasts, the adjoint of
    /// [`Tensor::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        match broadcast_shape(shape, self.shape()) {
            Some(s) if s == self.shape() => {}
            _ => return Err(Error::shape("sum_to", self.shape(), shape)),
        }
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let data = reduce_into(self.data(), self.shape(), shape);
        let orig = self.shape().to_vec();
        Ok(Tensor::from_op(data, shape.to_vec(), "sum_to", &[self], move |g, _| {
            Ok(vec![Some(g.broadcast_to(&orig)?)])
        }))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        self.sum_to(&[]).expect("any shape reduces to a scalar")
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum_all().scale(T::one() / T::of(n as f64))
    }

    /// Sum over `axes`. An empty axis set returns the tensor unchanged.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        if let Some(&axis) = axes.iter().find(|&&a| a >= self.rank()) {
            return Err(Error::InvalidAxis { axis, rank: self.rank() });
        }
        if axes.is_empty() {
            return Ok(self.clone());
        }
        let keep: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let summed = self.sum_to(&keep)?;
        if keepdim {
            Ok(summed)
        } else {
            let squeezed: Vec<usize> = self
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            summed.reshape(&squeezed)
        }
    }

    /// Mean over `axes`: the sum divided by the number of reduced elements.
    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        let count: usize = axes.iter().filter(|&&a| a < self.rank()).map(|&a| self.shape()[a]).product();
        let s = self.sum_axes(axes, keepdim)?;
        Ok(s.scale(T::one() / T::of(count.max(1) as f64)))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn cat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("cat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(Error::InvalidAxis { axis, rank: first.rank() });
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("cat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for p in parts {
                let block = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
        }
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Tensor::from_op(data, shape, "cat", parts, move |g, need| {
            let mut start = 0;
            let mut out = Vec::with_capacity(extents.len());
            for (i, &len) in extents.iter().enumerate() {
                out.push(maybe(need[i], || g.narrow(axis, start, len))?);
                start += len;
            }
            Ok(out)
        }))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis { axis, rank: self.rank() });
        }
        let full = self.shape()[axis];
        if start + len > full {
            return Err(Error::invalid(format!("narrow {start}+{len} exceeds extent {full}")));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Ok(Tensor::from_op(data, shape, "narrow", &[self], move |g, _| {
            Ok(vec![Some(g.pad_axis(axis, start, full)?)])
        }))
    }

    /// Embeds the tensor at offset `start` of a zero tensor whose `axis`
    /// extent is `total`, the adjoint of [`Tensor::narrow`].
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis { axis, rank: self.rank() });
        }
        let len = self.shape()[axis];
        if start + len > total {
            return Err(Error::invalid(format!("pad {start}+{len} exceeds extent {total}")));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut shape = self.shape().to_vec();
        shape[axis] = total;
        let mut data = vec![T::zero(); numel_of(&shape)];
        for o in 0..outer {
            let dst = o * total * inner + start * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data()[src..src + len * inner]);
        }
        Ok(Tensor::from_op(data, shape, "pad_axis", &[self], move |g, _| {
            Ok(vec![Some(g.narrow(axis, start, len)?)])
        }))
    }

    /// `out[i] = self.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&self, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor<T>> {
        if indices.len() != numel_of(shape) {
            return Err(Error::shape("gather", &[indices.len()], shape));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.numel()) {
            return Err(Error::invalid(format!("gather index {bad} out of bounds {}", self.numel())));
        }
        let src = self.data();
        let data = indices.iter().map(|&i| src[i]).collect();
        let orig = self.shape().to_vec();
        Ok(Tensor::from_op(data, shape.to_vec(), "gather", &[self], move |g, _| {
            Ok(vec![Some(g.scatter_add(Rc::clone(&indices), &orig)?)])
        }))
    }

    /// Adjoint of [`Tensor::gather`]: `out.flat[indices[i]] += self[i]`.
    pub fn scatter_add(&self, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor<T>> {
        if indices.len() != self.numel() {
            return Err(Error::shape("scatter_add", &[indices.len()], self.shape()));
        }
        let n = numel_of(shape);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("scatter index {bad} out of bounds {n}")));
        }
        let mut data = vec![T::zero(); n];
        for (&i, &v) in indices.iter().zip(self.data()) {
            data[i] = data[i] + v;
        }
        let orig = self.shape().to_vec();
        Ok(Tensor::from_op(data, shape.to_vec(), "scatter_add", &[self], move |g, _| {
            Ok(vec![Some(g.gather(Rc::clone(&indices), &orig)?)])
        }))
    }
}
