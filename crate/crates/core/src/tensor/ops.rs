//! Elementwise arithmetic, reductions and shape manipulation.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Broadcast result shape under trailing-dimension alignment.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::invalid(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index into a tensor of shape
/// `src` broadcast to `out`.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if src == out {
        return (0..n).collect();
    }
    let rank = out.len();
    let offset = rank - src.len();
    // Strides of `src` aligned to `out`; zero on broadcast axes.
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn reduce_into<T: Element>(g: &[T], map: &[usize], len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for (&gi, &m) in g.iter().zip(map) {
        acc[m] += gi;
    }
    acc
}

/// (outer, n, inner) decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Element> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
        let shape = broadcast_shape(self.shape(), other.shape())?;
        let same = self.shape() == other.shape();
        let (ma, mb) = if same {
            (Vec::new(), Vec::new())
        } else {
            (broadcast_map(self.shape(), &shape), broadcast_map(other.shape(), &shape))
        };
        let (a, b) = (self.data(), other.data());
        let f = |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let data: Vec<T> = if same {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else {
            ma.iter().zip(&mb).map(|(&i, &j)| f(a[i], b[j])).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        let backward = move |g: &[T]| {
            let (a, b) = (pa.data(), pb.data());
            let at = |i: usize, map: &[usize]| if same { i } else { map[i] };
            let ga = pa.requires_grad().then(|| {
                let local: Vec<T> = match op {
                    BinOp::Add | BinOp::Sub => g.to_vec(),
                    BinOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * b[at(i, &mb)]).collect(),
                    BinOp::Div => g.iter().enumerate().map(|(i, &gi)| gi / b[at(i, &mb)]).collect(),
                };
                if same { local } else { reduce_into(&local, &ma, a.len()) }
            });
            let gb = pb.requires_grad().then(|| {
                let local: Vec<T> = match op {
                    BinOp::Add => g.to_vec(),
                    BinOp::Sub => g.iter().map(|&gi| -gi).collect(),
                    BinOp::Mul => g.iter().enumerate().map(|(i, &gi)| gi * a[at(i, &ma)]).collect(),
                    BinOp::Div => g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let y = b[at(i, &mb)];
                            -gi * a[at(i, &ma)] / (y * y)
                        })
                        .collect(),
                };
                if same { local } else { reduce_into(&local, &mb, b.len()) }
            });
            vec![ga, gb]
        };
        Ok(Tensor::from_op(data, shape, vec![self.clone(), other.clone()], Box::new(backward)))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, BinOp::Div)
    }

    /// Elementwise map with derivative `df(x)`.
    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T) -> T + Send + Sync + 'static) -> Tensor<T> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        let backward = move |g: &[T]| {
            let gx = g.iter().zip(input.data()).map(|(&gi, &x)| gi * df(x)).collect();
            vec![Some(gx)]
        };
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], Box::new(backward))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(|x| -x, |_| -T::one())
    }

    /// `|x|`; the subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(sigmoid, |x| {
            let s = sigmoid(x);
            s * (T::one() - s)
        })
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|x| x.tanh(), |x| T::one() - x.tanh() * x.tanh())
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| x.max(T::zero()),
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        self.unary(
            move |x| if x > T::zero() { x } else { slope * x },
            move |x| if x > T::zero() { T::one() } else { slope },
        )
    }

    /// `x` for `x > 0`, `alpha·(eᵡ − 1)` otherwise.
    pub fn elu(&self, alpha: T) -> Tensor<T> {
        self.unary(
            move |x| if x > T::zero() { x } else { alpha * x.exp_m1() },
            move |x| if x > T::zero() { T::one() } else { alpha * x.exp() },
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |x| x.exp())
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(|x| x * x, |x| x + x)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(move |x| x + c, |_| T::one())
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        self.unary(move |x| x * c, move |_| c)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        let n = self.len();
        let backward = move |g: &[T]| vec![Some(vec![g[0]; n])];
        Tensor::from_op(vec![total], Vec::new(), vec![self.clone()], Box::new(backward))
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::lit(self.len() as f64);
        self.sum().mul_scalar(T::one() / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::invalid(format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        let backward = move |g: &[T]| {
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    gx[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        };
        Ok(Tensor::from_op(out, shape, vec![self.clone()], Box::new(backward)))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        super::check_shape(shape, self.len())?;
        let backward = |g: &[T]| vec![Some(g.to_vec())];
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), vec![self.clone()], Box::new(backward)))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::invalid(format!(
                    "concat shape mismatch {:?} vs {:?} on axis {axis}",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        let backward = move |g: &[T]| {
            let mut out: Vec<Option<Vec<T>>> = needs
                .iter()
                .zip(&widths)
                .map(|(&n, &w)| n.then(|| Vec::with_capacity(outer * w)))
                .collect();
            for o in 0..outer {
                let mut off = o * total;
                for (slot, &w) in out.iter_mut().zip(&widths) {
                    if let Some(v) = slot {
                        v.extend_from_slice(&g[off..off + w]);
                    }
                    off += w;
                }
            }
            out
        };
        let parents = parts.iter().map(|p| (*p).clone()).collect();
        Ok(Tensor::from_op(data, shape, parents, Box::new(backward)))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::invalid(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape()
            )));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let backward = move |g: &[T]| {
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        };
        Ok(Tensor::from_op(data, shape, vec![self.clone()], Box::new(backward)))
    }

    /// Columns `idx` of a `[rows, cols]` matrix, as `[rows, idx.len()]`.
    pub fn index_select_cols(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let (rows, cols) = self.matrix_dims("index_select_cols")?;
        if idx.is_empty() {
            return Err(Error::invalid("index_select_cols with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::invalid(format!("column {bad} out of range ({cols})")));
        }
        let x = self.data();
        let c = idx.len();
        let mut data = Vec::with_capacity(rows * c);
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let idx = idx.to_vec();
        let backward = move |g: &[T]| {
            let mut gx = vec![T::zero(); rows * cols];
            for r in 0..rows {
                for (k, &i) in idx.iter().enumerate() {
                    gx[r * cols + i] += g[r * c + k];
                }
            }
            vec![Some(gx)]
        };
        Ok(Tensor::from_op(data, vec![rows, c], vec![self.clone()], Box::new(backward)))
    }

    /// `self` with `src[:, k]` added onto column `idx[k]`. Indices must be
    /// unique and in range.
    pub fn index_add_cols(&self, idx: &[usize], src: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, cols) = self.matrix_dims("index_add_cols")?;
        let (srows, scols) = src.matrix_dims("index_add_cols source")?;
        if srows != rows || scols != idx.len() {
            return Err(Error::invalid(format!(
                "index_add_cols: source {:?} does not match {rows} rows × {} indices",
                src.shape(),
                idx.len()
            )));
        }
        let mut seen = vec![false; cols];
        for &i in idx {
            if i >= cols {
                return Err(Error::invalid(format!("column {i} out of range ({cols})")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("duplicate column index {i}")));
            }
        }
        let mut data = self.to_vec();
        let s = src.data();
        for r in 0..rows {
            for (k, &i) in idx.iter().enumerate() {
                data[r * cols + i] += s[r * scols + k];
            }
        }
        let idx = idx.to_vec();
        let backward = move |g: &[T]| {
            let mut gs = Vec::with_capacity(rows * scols);
            for r in 0..rows {
                gs.extend(idx.iter().map(|&i| g[r * cols + i]));
            }
            vec![Some(g.to_vec()), Some(gs)]
        };
        Ok(Tensor::from_op(data, vec![rows, cols], vec![self.clone(), src.clone()], Box::new(backward)))
    }

    pub(crate) fn matrix_dims(&self, what: &str) -> Result<(usize, usize)> {
        match *self.shape() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(format!("{what} needs a matrix, got {:?}", self.shape()))),
        }
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
