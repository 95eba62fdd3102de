//! Pixel, perceptual and smoothness losses, and their weighted total.

use serde::{Deserialize, Serialize};

use super::embedder::PerceptualEmbedder;
use crate::error::{Error, Result};
use crate::mask::MaskPlane;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub peel: f64,
    pub valid: f64,
    pub content: f64,
    pub style: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { peel: 100.0, valid: 1.0, content: 0.05, style: 120.0, tv: 0.01 }
    }
}

/// Differentiable loss components (scalar tensors).
#[derive(Debug, Clone)]
pub struct LossTerms<T: Element = f32> {
    pub peel: Tensor<T>,
    pub valid: Tensor<T>,
    pub content: Tensor<T>,
    pub style: Tensor<T>,
    pub tv: Tensor<T>,
}

/// Plain component values with their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub peel: f64,
    pub valid: f64,
    pub content: f64,
    pub style: f64,
    pub tv: f64,
    pub total: f64,
}

pub const COMPONENT_NAMES: [&str; 5] = ["peel", "valid", "content", "style", "tv"];

impl LossBreakdown {
    /// Evaluate `total` from the five components; errors on a non-finite one.
    pub fn new(c: [f64; 5], w: &LossWeights, step: u64) -> Result<Self> {
        let [peel, valid, content, style, tv] = c;
        let mut b = LossBreakdown { peel, valid, content, style, tv, total: 0.0 };
        b.total = loss_total(&b, w, step)?;
        Ok(b)
    }

    pub fn components(&self) -> [f64; 5] {
        [self.peel, self.valid, self.content, self.style, self.tv]
    }
}

/// `w.peel·peel + w.valid·valid + w.content·content + w.style·style + w.tv·tv`,
/// evaluated left to right.
pub fn loss_total(b: &LossBreakdown, w: &LossWeights, step: u64) -> Result<f64> {
    for (name, v) in COMPONENT_NAMES.iter().zip(b.components()) {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { component: (*name).into(), step });
        }
    }
    Ok(w.peel * b.peel + w.valid * b.valid + w.content * b.content + w.style * b.style + w.tv * b.tv)
}

impl<T: Element> LossTerms<T> {
    /// Weighted sum as a differentiable scalar.
    pub fn total(&self, w: &LossWeights) -> Result<Tensor<T>> {
        self.peel
            .mul_scalar(T::lit(w.peel))
            .add(&self.valid.mul_scalar(T::lit(w.valid)))?
            .add(&self.content.mul_scalar(T::lit(w.content)))?
            .add(&self.style.mul_scalar(T::lit(w.style)))?
            .add(&self.tv.mul_scalar(T::lit(w.tv)))
    }

    pub fn breakdown(&self, w: &LossWeights, step: u64) -> Result<LossBreakdown> {
        let v = |t: &Tensor<T>| t.item().map(|x| x.as_f64());
        LossBreakdown::new([v(&self.peel)?, v(&self.valid)?, v(&self.content)?, v(&self.style)?, v(&self.tv)?], w, step)
    }
}

/// Mean of `|x − y|` over the pixels of `mask` (all channels); zero for an
/// empty mask.
pub fn masked_l1<T: Element>(x: &Tensor<T>, y: &Tensor<T>, mask: &MaskPlane) -> Result<Tensor<T>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::invalid(format!("expected [C, H, W], got {:?}", x.shape())));
    };
    if y.shape() != x.shape() || mask.dims() != (h, w) {
        return Err(Error::invalid(format!("masked_l1 shapes {:?}, {:?}, mask {:?}", x.shape(), y.shape(), mask.dims())));
    }
    let n = mask.area();
    if n == 0 {
        return Ok(Tensor::scalar(T::zero()));
    }
    Ok(x.sub(y)?.abs().mul(&mask.to_tensor::<T>())?.sum().mul_scalar(T::lit(1.0 / (c * n) as f64)))
}

/// Per-recursion masked means on the raw decoder outputs, summed over
/// recursions: `(L_peel, L_valid)`.
pub fn loss_pixel<T: Element>(
    raw: &[Tensor<T>],
    peels: &[MaskPlane],
    validity: &MaskPlane,
    y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if raw.len() != peels.len() {
        return Err(Error::invalid(format!("{} outputs for {} peels", raw.len(), peels.len())));
    }
    let mut lp = Tensor::scalar(T::zero());
    let mut lv = Tensor::scalar(T::zero());
    for (x, p) in raw.iter().zip(peels) {
        lp = lp.add(&masked_l1(x, y, p)?)?;
        lv = lv.add(&masked_l1(x, y, validity)?)?;
    }
    Ok((lp, lv))
}

/// `F·Fᵀ / (C·N)` for `F` of shape `[C, N]`.
pub fn gram<T: Element>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let &[c, n] = f.shape() else {
        return Err(Error::invalid(format!("gram expects [C, N], got {:?}", f.shape())));
    };
    Ok(f.matmul(&f.transpose()?)?.mul_scalar(T::lit(1.0 / (c * n) as f64)))
}

/// `(L_content, L_style)` over every composed output and all three scales.
pub fn loss_perceptual<T: Element>(
    composed: &[Tensor<T>],
    y: &Tensor<T>,
    embedder: &PerceptualEmbedder,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut content = Tensor::scalar(T::zero());
    let mut style = Tensor::scalar(T::zero());
    if composed.is_empty() {
        return Ok((content, style));
    }
    let fy: Vec<Tensor<T>> = embedder.features(&y.detach())?;
    let gy: Vec<Tensor<T>> = fy.iter().map(gram).collect::<Result<_>>()?;
    for x in composed {
        for (s, fx) in embedder.features(x)?.iter().enumerate() {
            content = content.add(&fx.sub(&fy[s])?.abs().mean())?;
            style = style.add(&gram(fx)?.sub(&gy[s])?.abs().mean())?;
        }
    }
    Ok((content, style))
}

/// Anisotropic L1 total variation of `[C, H, W]`: mean absolute horizontal
/// difference plus mean absolute vertical difference.
pub fn total_variation<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, h, w] = x.shape() else {
        return Err(Error::invalid(format!("expected [C, H, W], got {:?}", x.shape())));
    };
    let mut tv = Tensor::scalar(T::zero());
    if w > 1 {
        tv = tv.add(&x.narrow(2, 1, w - 1)?.sub(&x.narrow(2, 0, w - 1)?)?.abs().mean())?;
    }
    if h > 1 {
        tv = tv.add(&x.narrow(1, 1, h - 1)?.sub(&x.narrow(1, 0, h - 1)?)?.abs().mean())?;
    }
    Ok(tv)
}

/// Total variation of each composed output, summed.
pub fn loss_tv<T: Element>(composed: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut tv = Tensor::scalar(T::zero());
    for x in composed {
        tv = tv.add(&total_variation(x)?)?;
    }
    Ok(tv)
}
