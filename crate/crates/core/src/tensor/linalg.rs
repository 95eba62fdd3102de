use super::ops::split_axis;
use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Tensor<T> {
    /// `[M, K] · [K, N] → [M, N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.matrix_dims("matmul lhs")?;
        let (k2, n) = other.matrix_dims("matmul rhs")?;
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul inner extents differ: {:?} · {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(), false, other.data(), false, T::zero(), &mut out);
        let (a, b) = (self.clone(), other.clone());
        let backward = move |g: &[T]| {
            let ga = a.requires_grad().then(|| {
                let mut ga = vec![T::zero(); m * k];
                gemm(m, n, k, g, false, b.data(), true, T::zero(), &mut ga);
                ga
            });
            let gb = b.requires_grad().then(|| {
                let mut gb = vec![T::zero(); k * n];
                gemm(k, m, n, a.data(), true, g, false, T::zero(), &mut gb);
                gb
            });
            vec![ga, gb]
        };
        Ok(Tensor::from_op(out, vec![m, n], vec![self.clone(), other.clone()], Box::new(backward)))
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c) = self.matrix_dims("transpose")?;
        let x = self.data();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            out.extend((0..r).map(|i| x[i * c + j]));
        }
        let backward = move |g: &[T]| {
            let mut gx = Vec::with_capacity(r * c);
            for i in 0..r {
                gx.extend((0..c).map(|j| g[j * r + i]));
            }
            vec![Some(gx)]
        };
        Ok(Tensor::from_op(out, vec![c, r], vec![self.clone()], Box::new(backward)))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::invalid(format!("softmax axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mx = (0..n).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..n {
                    let e = (x[at(k)] - mx).exp();
                    y[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    y[at(k)] = y[at(k)] / total;
                }
            }
        }
        let saved = y.clone();
        let backward = move |g: &[T]| {
            let mut gx = vec![T::zero(); saved.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: T = (0..n).map(|k| g[at(k)] * saved[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] = saved[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        };
        Ok(Tensor::from_op(y, self.shape().to_vec(), vec![self.clone()], Box::new(backward)))
    }

    /// Euclidean norm along `axis` (kept with extent 1). The gradient of a
    /// zero-norm slice is taken as 0.
    pub fn norm_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::invalid(format!("norm axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = x[(o * n + k) * inner + i];
                    norms[o * inner + i] += v * v;
                }
            }
        }
        norms.iter_mut().for_each(|v| *v = v.sqrt());
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        let input = self.clone();
        let saved = norms.clone();
        let backward = move |g: &[T]| {
            let x = input.data();
            let mut gx = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let nv = saved[o * inner + i];
                    if nv == T::zero() {
                        continue;
                    }
                    let scale = g[o * inner + i] / nv;
                    for k in 0..n {
                        let at = (o * n + k) * inner + i;
                        gx[at] = x[at] * scale;
                    }
                }
            }
            vec![Some(gx)]
        };
        Ok(Tensor::from_op(norms, shape, vec![self.clone()], Box::new(backward)))
    }
}
