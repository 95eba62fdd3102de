//! Binary mask algebra: exact Euclidean distance transform, peel extraction,
//! erosion schedules and downsampling to feature resolution.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Binary per-pixel plane; `true` marks a member pixel.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct MaskPlane {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for MaskPlane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MaskPlane({}×{}, area {})", self.height, self.width, self.area())
    }
}

/// How a block of pixels collapses to one feature cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    /// Member iff any covered pixel is a member.
    Any,
    /// Member iff every covered pixel is a member.
    All,
}

/// Border handling when growing a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// New pixels are non-members.
    Empty,
    /// Mirror without repeating the edge pixel.
    Reflect,
}

impl MaskPlane {
    pub fn empty(height: usize, width: usize) -> Self {
        MaskPlane { height, width, bits: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        MaskPlane { height, width, bits: vec![true; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid(format!(
                "{} bits for a {height}×{width} mask",
                bits.len()
            )));
        }
        Ok(MaskPlane { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        MaskPlane { height, width, bits }
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Number of member pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Row-major flat indices of the members.
    pub fn member_indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }

    fn check_same(&self, other: &MaskPlane) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::invalid(format!(
                "mask extents differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    fn zip(&self, other: &MaskPlane, f: impl Fn(bool, bool) -> bool) -> Result<MaskPlane> {
        self.check_same(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Ok(MaskPlane { height: self.height, width: self.width, bits })
    }

    pub fn union(&self, other: &MaskPlane) -> Result<MaskPlane> {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &MaskPlane) -> Result<MaskPlane> {
        self.zip(other, |a, b| a && b)
    }

    /// Members of `self` that are not members of `other`.
    pub fn difference(&self, other: &MaskPlane) -> Result<MaskPlane> {
        self.zip(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> MaskPlane {
        MaskPlane {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    pub fn intersects(&self, other: &MaskPlane) -> Result<bool> {
        self.check_same(other)?;
        Ok(self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b))
    }

    pub fn is_subset_of(&self, other: &MaskPlane) -> Result<bool> {
        self.check_same(other)?;
        Ok(self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b))
    }

    /// `[1, H, W]` tensor of 0/1 values.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(data, &[1, self.height, self.width]).expect("mask extents are positive")
    }

    /// Grow to `height × width` by extending the bottom and right edges.
    pub fn pad_to(&self, height: usize, width: usize, mode: PadMode) -> MaskPlane {
        assert!(height >= self.height && width >= self.width);
        MaskPlane::from_fn(height, width, |y, x| match mode {
            PadMode::Empty => y < self.height && x < self.width && self.get(y, x),
            PadMode::Reflect => self.get(reflect(y, self.height), reflect(x, self.width)),
        })
    }

    /// Top-left `height × width` window.
    pub fn crop(&self, height: usize, width: usize) -> MaskPlane {
        assert!(height <= self.height && width <= self.width);
        MaskPlane::from_fn(height, width, |y, x| self.get(y, x))
    }
}

/// Mirror index `i` into `0..n` without repeating the edge sample.
pub(crate) fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Peel width in pixels (Euclidean); at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct PeelWidth(u32);

impl PeelWidth {
    pub fn new(p: u32) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("peel width must be at least 1"));
        }
        Ok(PeelWidth(p))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl Default for PeelWidth {
    fn default() -> Self {
        PeelWidth(8)
    }
}

impl TryFrom<u32> for PeelWidth {
    type Error = Error;
    fn try_from(p: u32) -> Result<Self> {
        PeelWidth::new(p)
    }
}

impl From<PeelWidth> for u32 {
    fn from(p: PeelWidth) -> u32 {
        p.0
    }
}

/// Squared Euclidean distance of every pixel to the nearest non-hole pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceField {
    height: usize,
    width: usize,
    sq: Vec<u64>,
}

impl DistanceField {
    pub fn squared(&self, y: usize, x: usize) -> u64 {
        self.sq[y * self.width + x]
    }

    pub fn distance(&self, y: usize, x: usize) -> f64 {
        (self.squared(y, x) as f64).sqrt()
    }

    pub fn squared_values(&self) -> &[u64] {
        &self.sq
    }

    pub fn max_distance(&self) -> f64 {
        (self.sq.iter().copied().max().unwrap_or(0) as f64).sqrt()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// `num / den` with `den > 0`; `None` stands for −∞.
type Boundary = Option<(i128, i128)>;

/// `a/b < c/d` for positive denominators.
fn frac_cmp(a: (i128, i128), c: (i128, i128)) -> Ordering {
    (a.0 * c.1).cmp(&(c.0 * a.1))
}

/// Lower envelope of parabolas `(q − v)² + f(v)` (Felzenszwalb–Huttenlocher),
/// with exact rational breakpoints. `None` entries are +∞.
fn envelope_1d(f: &[Option<i64>], out: &mut [Option<i64>]) {
    let mut v: Vec<usize> = Vec::with_capacity(f.len());
    let mut z: Vec<Boundary> = Vec::with_capacity(f.len());
    for (q, fq) in f.iter().enumerate() {
        let Some(fq) = *fq else { continue };
        loop {
            let Some(&vk) = v.last() else {
                v.push(q);
                z.push(None);
                break;
            };
            let fv = f[vk].expect("envelope holds finite samples");
            let (qi, vi) = (q as i128, vk as i128);
            let s = ((fq as i128 + qi * qi) - (fv as i128 + vi * vi), 2 * (qi - vi));
            let dominated = match z.last().copied().flatten() {
                None => false,
                Some(zk) => frac_cmp(s, zk) != Ordering::Greater,
            };
            if dominated {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(Some(s));
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = None);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() {
            let (num, den) = z[k + 1].expect("interior breakpoints are finite");
            if num < q as i128 * den {
                k += 1;
            } else {
                break;
            }
        }
        let d = q as i64 - v[k] as i64;
        *o = Some(d * d + f[v[k]].expect("finite"));
    }
}

/// Exact Euclidean distance from every hole pixel to the nearest non-hole
/// pixel (0 on non-hole pixels).
pub fn distance_transform(hole: &MaskPlane) -> Result<DistanceField> {
    let (h, w) = hole.dims();
    if !hole.is_empty() && hole.is_full() {
        return Err(Error::DegenerateMask(format!("all {h}×{w} pixels are hole")));
    }
    let mut cols = vec![None; h * w];
    let mut f = vec![None; h];
    let mut g = vec![None; h];
    for x in 0..w {
        for y in 0..h {
            f[y] = (!hole.get(y, x)).then_some(0);
        }
        envelope_1d(&f, &mut g);
        for y in 0..h {
            cols[y * w + x] = g[y];
        }
    }
    let mut sq = vec![0u64; h * w];
    let mut row = vec![None; w];
    for y in 0..h {
        envelope_1d(&cols[y * w..(y + 1) * w], &mut row);
        for x in 0..w {
            sq[y * w + x] = row[x].expect("a non-hole pixel exists") as u64;
        }
    }
    Ok(DistanceField { height: h, width: w, sq })
}

/// Hole pixels within Euclidean distance `p` of the nearest non-hole pixel.
pub fn get_peel(hole: &MaskPlane, p: PeelWidth) -> Result<MaskPlane> {
    if hole.is_empty() {
        return Ok(MaskPlane::empty(hole.height, hole.width));
    }
    let field = distance_transform(hole)?;
    let limit = u64::from(p.get()).pow(2);
    let bits = hole
        .bits
        .iter()
        .zip(&field.sq)
        .map(|(&inside, &d)| inside && d <= limit)
        .collect();
    Ok(MaskPlane { height: hole.height, width: hole.width, bits })
}

/// Peels produced by repeatedly extracting and removing the boundary layer
/// until the hole is empty.
pub fn erode_schedule(hole: &MaskPlane, p: PeelWidth) -> Result<Vec<MaskPlane>> {
    let mut remaining = hole.clone();
    let mut peels = Vec::new();
    while !remaining.is_empty() {
        let peel = get_peel(&remaining, p)?;
        debug_assert!(!peel.is_empty());
        remaining = remaining.difference(&peel)?;
        peels.push(peel);
    }
    Ok(peels)
}

/// Collapse `factor × factor` blocks to single cells. Extents that are not
/// multiples of `factor` are padded with non-members first.
pub fn downsample_mask(mask: &MaskPlane, factor: usize, mode: Reduce) -> MaskPlane {
    assert!(factor >= 1, "downsample factor must be positive");
    let (h, w) = mask.dims();
    let (ho, wo) = (h.div_ceil(factor), w.div_ceil(factor));
    MaskPlane::from_fn(ho, wo, |cy, cx| {
        let mut cells = (0..factor).flat_map(|dy| (0..factor).map(move |dx| (cy * factor + dy, cx * factor + dx)));
        let member = |(y, x): (usize, usize)| y < h && x < w && mask.get(y, x);
        match mode {
            Reduce::Any => cells.any(member),
            Reduce::All => cells.all(member),
        }
    })
}
