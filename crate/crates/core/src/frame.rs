use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::{reflect, MaskPlane};
use crate::tensor::{Element, Tensor};

/// Planar RGB image (`[3, H, W]`), nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbFrame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbFrame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::invalid(format!(
                "{} values for a 3×{height}×{width} frame",
                data.len()
            )));
        }
        Ok(RgbFrame { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat(v).take(height * width));
        }
        RgbFrame { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        RgbFrame { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::from_vec(data, &[3, self.height, self.width]).expect("frame extents are positive")
    }

    /// Accepts `[3, H, W]` or `[1, 3, H, W]`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [3, h, w] | [1, 3, h, w] => (h, w),
            _ => return Err(Error::invalid(format!("not an RGB tensor: {:?}", t.shape()))),
        };
        RgbFrame::new(h, w, t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// Error unless every value lies in `[0, 1]`.
    pub fn check_range(&self) -> Result<()> {
        match self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            None => Ok(()),
            Some(i) => Err(Error::invalid(format!("pixel value {} outside [0, 1]", self.data[i]))),
        }
    }

    /// Grow to `height × width` by mirroring the bottom and right edges.
    pub fn pad_reflect(&self, height: usize, width: usize) -> RgbFrame {
        assert!(height >= self.height && width >= self.width);
        if (height, width) == self.dims() {
            return self.clone();
        }
        RgbFrame::from_fn(height, width, |c, y, x| {
            self.get(c, reflect(y, self.height), reflect(x, self.width))
        })
    }

    /// Top-left `height × width` window.
    pub fn crop(&self, height: usize, width: usize) -> RgbFrame {
        assert!(height <= self.height && width <= self.width);
        if (height, width) == self.dims() {
            return self.clone();
        }
        RgbFrame::from_fn(height, width, |c, y, x| self.get(c, y, x))
    }

    /// Copy `src` into every member pixel of `mask`.
    pub fn compose(&mut self, src: &RgbFrame, mask: &MaskPlane) -> Result<()> {
        if src.dims() != self.dims() || mask.dims() != self.dims() {
            return Err(Error::invalid("compose: extents differ"));
        }
        let plane = self.height * self.width;
        for i in mask.member_indices() {
            for c in 0..3 {
                self.data[c * plane + i] = src.data[c * plane + i];
            }
        }
        Ok(())
    }

    /// Round every value to the nearest multiple of 1/255.
    pub fn quantized(&self) -> RgbFrame {
        let data = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        RgbFrame { height: self.height, width: self.width, data }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Smallest multiple of 4 not below `n`.
pub fn pad4(n: usize) -> usize {
    n.div_ceil(4) * 4
}
