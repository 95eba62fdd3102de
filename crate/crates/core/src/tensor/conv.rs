//! 2-D convolution (im2col + GEMM), nearest upsampling and average pooling.

use serde::{Deserialize, Serialize};

use super::{gemm, Element, Tensor};
use crate::error::{Error, Result};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// "Same" zero padding: spatial size changes only through the stride.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            dilation,
            padding: dilation * (kernel_size - 1) / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 || self.kernel_size == 0 {
            return Err(Error::invalid(format!("bad conv geometry {self:?}")));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(format!("conv needs channels: {self:?}")));
        }
        Ok(())
    }

    /// `⌊(n + 2p − d(k−1) − 1)/s⌋ + 1`, or `None` if the kernel does not fit.
    pub fn output_extent(&self, n: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel_size - 1) + 1;
        let padded = n + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    /// Weights plus biases.
    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size * self.kernel_size + self.out_channels
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    dil: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn source(&self, o: usize, kk: usize, n: usize) -> Option<usize> {
        let pos = (o * self.stride + kk * self.dil) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
    }
}

fn im2col<T: Element>(x: &[T], g: &Geometry, col: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.source(oy, ky, g.h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let srow = &src[iy * g.w..(iy + 1) * g.w];
                            for (ox, d) in line.iter_mut().enumerate() {
                                *d = match g.source(ox, kx, g.w) {
                                    Some(ix) => srow[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(col: &[T], g: &Geometry, x: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let dst = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let Some(iy) = g.source(oy, ky, g.h) else { continue };
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.wo {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            drow[ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Cross-correlation of `[N, C, H, W]` input with `[O, C, k, k]` weights.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
        spec.validate()?;
        let &[n, c, h, w] = self.shape() else {
            return Err(Error::invalid(format!("conv2d input must be NCHW, got {:?}", self.shape())));
        };
        if c != spec.in_channels {
            return Err(Error::invalid(format!(
                "conv2d input has {c} channels, spec expects {}",
                spec.in_channels
            )));
        }
        if weight.shape() != spec.weight_shape() {
            return Err(Error::invalid(format!(
                "conv2d weight {:?} does not match spec {:?}",
                weight.shape(),
                spec.weight_shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [spec.out_channels] {
                return Err(Error::invalid(format!("conv2d bias shape {:?}", b.shape())));
            }
        }
        let (Some(ho), Some(wo)) = (spec.output_extent(h), spec.output_extent(w)) else {
            return Err(Error::invalid(format!("kernel larger than padded input {h}×{w}")));
        };
        let g = Geometry {
            c,
            h,
            w,
            k: spec.kernel_size,
            stride: spec.stride,
            dil: spec.dilation,
            pad: spec.padding,
            ho,
            wo,
        };
        let o = spec.out_channels;
        let ckk = c * g.k * g.k;
        let plane = ho * wo;
        let x = self.data();
        let wt = weight.data();
        let mut out = vec![T::zero(); n * o * plane];
        let keep_cols = weight.requires_grad();
        let mut cols: Vec<Vec<T>> = Vec::new();
        let mut col = vec![T::zero(); ckk * plane];
        for b in 0..n {
            im2col(&x[b * c * h * w..(b + 1) * c * h * w], &g, &mut col);
            let dst = &mut out[b * o * plane..(b + 1) * o * plane];
            if let Some(bias) = bias {
                for (oc, &bv) in bias.data().iter().enumerate() {
                    dst[oc * plane..(oc + 1) * plane].fill(bv);
                }
            }
            gemm(o, ckk, plane, wt, false, &col, false, T::one(), dst);
            if keep_cols {
                cols.push(col.clone());
            }
        }

        let input = self.clone();
        let wparent = weight.clone();
        let has_bias = bias.is_some();
        let backward = move |gout: &[T]| {
            let gx = input.requires_grad().then(|| {
                let mut gx = vec![T::zero(); n * c * h * w];
                let mut gcol = vec![T::zero(); ckk * plane];
                for b in 0..n {
                    let gb = &gout[b * o * plane..(b + 1) * o * plane];
                    gemm(ckk, o, plane, wparent.data(), true, gb, false, T::zero(), &mut gcol);
                    col2im(&gcol, &g, &mut gx[b * c * h * w..(b + 1) * c * h * w]);
                }
                gx
            });
            let gw = wparent.requires_grad().then(|| {
                let mut gw = vec![T::zero(); o * ckk];
                for (b, col) in cols.iter().enumerate() {
                    let gb = &gout[b * o * plane..(b + 1) * o * plane];
                    gemm(o, plane, ckk, gb, false, col, true, T::one(), &mut gw);
                }
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gbias = vec![T::zero(); o];
                for b in 0..n {
                    for (oc, acc) in gbias.iter_mut().enumerate() {
                        let start = (b * o + oc) * plane;
                        *acc += gout[start..start + plane].iter().copied().sum::<T>();
                    }
                }
                grads.push(Some(gbias));
            }
            grads
        };
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(out, vec![n, o, ho, wo], parents, Box::new(backward)))
    }

    /// Replicate every pixel of a `[.., H, W]` tensor into a 2×2 block.
    pub fn upsample_nearest2x(&self) -> Result<Tensor<T>> {
        let (planes, h, w) = self.spatial_dims("upsample_nearest2x")?;
        let x = self.data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); planes * h2 * w2];
        for p in 0..planes {
            for y in 0..h2 {
                let src = &x[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                let dst = &mut out[(p * h2 + y) * w2..(p * h2 + y + 1) * w2];
                for (xx, d) in dst.iter_mut().enumerate() {
                    *d = src[xx / 2];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h2;
        shape[r - 1] = w2;
        let backward = move |g: &[T]| {
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        gx[(p * h + y / 2) * w + xx / 2] += g[(p * h2 + y) * w2 + xx];
                    }
                }
            }
            vec![Some(gx)]
        };
        Ok(Tensor::from_op(out, shape, vec![self.clone()], Box::new(backward)))
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2x(&self) -> Result<Tensor<T>> {
        let (planes, h, w) = self.spatial_dims("avg_pool2x")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::invalid(format!("avg_pool2x on {h}×{w}")));
        }
        let x = self.data();
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = (p * h + 2 * y) * w + 2 * xx;
                    out[(p * ho + y) * wo + xx] = (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]) * quarter;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let backward = move |g: &[T]| {
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for y in 0..ho {
                    for xx in 0..wo {
                        let v = g[(p * ho + y) * wo + xx] * quarter;
                        let base = (p * h + 2 * y) * w + 2 * xx;
                        gx[base] += v;
                        gx[base + 1] += v;
                        gx[base + w] += v;
                        gx[base + w + 1] += v;
                    }
                }
            }
            vec![Some(gx)]
        };
        Ok(Tensor::from_op(out, shape, vec![self.clone()], Box::new(backward)))
    }

    /// (number of planes, H, W) for a tensor of rank ≥ 2.
    pub(crate) fn spatial_dims(&self, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::invalid(format!("{what} needs rank ≥ 2, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok((self.len() / (h * w), h, w))
    }
}
