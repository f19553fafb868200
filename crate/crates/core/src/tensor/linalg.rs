use super::{par, Element, Tensor};
use crate::error::{Error, Result};

/// Rows per parallel block in `matmul`.
const ROW_BLOCK: usize = 64;

fn matmul_values<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    par::for_each_chunk_mut(&mut out, ROW_BLOCK * n.max(1), |bi, chunk| {
        let row0 = bi * ROW_BLOCK;
        let rows = chunk.len() / n.max(1);
        T::gemm(
            rows,
            k,
            n,
            &a[row0 * k..],
            (k as isize, 1),
            b,
            (n as isize, 1),
            T::zero(),
            chunk,
            (n as isize, 1),
        );
    });
    out
}

impl<T: Element> Tensor<T> {
    /// Matrix product of `(M, K)` and `(K, N)` tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let data = if k == 0 {
            vec![T::zero(); m * n]
        } else {
            matmul_values(self.data(), other.data(), m, k, n)
        };
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(data, vec![m, n], "matmul", &[self, other], move |g, need| {
            Ok(vec![
                super::ops::maybe(need[0], || g.matmul(&b.transpose()?))?,
                super::ops::maybe(need[1], || a.transpose()?.matmul(g))?,
            ])
        }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::invalid(format!("transpose needs rank 2, got {:?}", self.shape())));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(Tensor::from_op(data, vec![c, r], "transpose", &[self], |g, _| {
            Ok(vec![Some(g.transpose()?)])
        }))
    }
}
