//! Training samples from a single still: five random affine views of one
//! scene, each with its own randomly moved hole.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::RgbFrame;
use crate::mask::MaskPlane;

/// Target plus references.
pub const VIEWS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineRanges {
    pub max_rotation_deg: f64,
    /// Fraction of the output size.
    pub max_translation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        AffineRanges { max_rotation_deg: 10.0, max_translation: 0.1, min_scale: 0.9, max_scale: 1.1 }
    }
}

impl AffineRanges {
    pub fn identity() -> Self {
        AffineRanges { max_rotation_deg: 0.0, max_translation: 0.0, min_scale: 1.0, max_scale: 1.0 }
    }

    fn draw(&self, size: usize, rng: &mut impl Rng) -> Affine {
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let theta = sym(rng, self.max_rotation_deg).to_radians();
        let scale = if self.max_scale > self.min_scale { rng.gen_range(self.min_scale..=self.max_scale) } else { self.min_scale };
        let t = self.max_translation * size as f64;
        Affine { theta, scale, ty: sym(rng, t), tx: sym(rng, t) }
    }
}

/// Rotation and isotropic scale about the centre, then translation.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    theta: f64,
    scale: f64,
    ty: f64,
    tx: f64,
}

impl Affine {
    /// Source coordinate sampled by output pixel `(y, x)` of an `out`-sized
    /// crop centred on a `src`-sized image.
    fn source_of(&self, y: usize, x: usize, out: (usize, usize), src: (usize, usize)) -> (f64, f64) {
        let cy_out = (out.0 as f64 - 1.0) / 2.0;
        let cx_out = (out.1 as f64 - 1.0) / 2.0;
        let dy = y as f64 - cy_out - self.ty;
        let dx = x as f64 - cx_out - self.tx;
        let (s, c) = self.theta.sin_cos();
        // Inverse of scale·R(θ).
        let sy = (c * dy - s * dx) / self.scale;
        let sx = (s * dy + c * dx) / self.scale;
        (sy + (src.0 as f64 - 1.0) / 2.0, sx + (src.1 as f64 - 1.0) / 2.0)
    }
}

fn warp_frame(src: &RgbFrame, a: &Affine, size: usize) -> RgbFrame {
    let (h, w) = src.dims();
    let coords: Vec<(f64, f64)> = (0..size * size).map(|i| a.source_of(i / size, i % size, (size, size), (h, w))).collect();
    RgbFrame::from_fn(size, size, |c, y, x| {
        let (sy, sx) = coords[y * size + x];
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let sx = sx.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
        let top = src.get(c, y0, x0) * (1.0 - fx) + src.get(c, y0, x1) * fx;
        let bottom = src.get(c, y1, x0) * (1.0 - fx) + src.get(c, y1, x1) * fx;
        if fy == 0.0 {
            top
        } else {
            top * (1.0 - fy) + bottom * fy
        }
    })
}

/// Nearest-neighbour warp; samples outside the source are non-members.
fn warp_mask(src: &MaskPlane, a: &Affine, size: usize) -> MaskPlane {
    let (h, w) = src.dims();
    MaskPlane::from_fn(size, size, |y, x| {
        let (sy, sx) = a.source_of(y, x, (size, size), (h, w));
        let (ry, rx) = (sy.round(), sx.round());
        ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w && src.get(ry as usize, rx as usize)
    })
}

/// Smooth two-colour gradient with a low-frequency ripple, overlaid with
/// striped or checkered discs and boxes.
pub fn procedural_scene(height: usize, width: usize, rng: &mut impl Rng) -> RgbFrame {
    let c0: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let c1: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = angle.sin_cos();
    let freq: f64 = rng.gen_range(1.0..3.0);
    let span = (height.max(width)) as f64;
    let mut img = RgbFrame::from_fn(height, width, |c, y, x| {
        let t = ((y as f64 * gy + x as f64 * gx) / span * 0.5 + 0.5).clamp(0.0, 1.0) as f32;
        let ripple = 0.08 * ((y as f64 / span * freq * std::f64::consts::TAU).sin() * (x as f64 / span * freq * 3.0).cos()) as f32;
        (c0[c] * (1.0 - t) + c1[c] * t + ripple).clamp(0.0, 1.0)
    });
    for _ in 0..rng.gen_range(3..7) {
        let colour: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let alt: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let (cy, cx) = (rng.gen_range(0.0..height as f64), rng.gen_range(0.0..width as f64));
        let r = rng.gen_range(0.08..0.25) * span;
        let disc = rng.gen_bool(0.5);
        let period = rng.gen_range(2.0..6.0);
        let checker = rng.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc { dy * dy + dx * dx <= r * r } else { dy.abs() <= r * 0.7 && dx.abs() <= r };
                if !inside {
                    continue;
                }
                let band = (x as f64 / period).floor() as i64 + if checker { (y as f64 / period).floor() as i64 } else { 0 };
                let col = if band.rem_euclid(2) == 0 { colour } else { alt };
                for (c, v) in col.iter().enumerate() {
                    img.set(c, y, x, *v);
                }
            }
        }
    }
    img
}

/// Union of one to three ellipses with wobbly outlines.
pub fn procedural_mask(size: usize, rng: &mut impl Rng) -> MaskPlane {
    let mut m = MaskPlane::empty(size, size);
    let s = size as f64;
    for _ in 0..rng.gen_range(1..=3) {
        let (cy, cx) = (rng.gen_range(0.2..0.8) * s, rng.gen_range(0.2..0.8) * s);
        let (ry, rx) = (rng.gen_range(0.06..0.22) * s, rng.gen_range(0.06..0.22) * s);
        let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let lobes = rng.gen_range(2..6) as f64;
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let wobble = rng.gen_range(0.0..0.25);
        let (sn, cs) = rot.sin_cos();
        let blob = MaskPlane::from_fn(size, size, |y, x| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let (u, v) = (cs * dx + sn * dy, -sn * dx + cs * dy);
            let r = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
            r <= 1.0 + wobble * (lobes * v.atan2(u) + phase).sin()
        });
        m = m.union(&blob).expect("same extents");
    }
    m
}

/// Where scenes and masks come from.
#[derive(Debug, Clone, Default)]
pub struct DataSource {
    /// User images, each at least the sample size; procedural scenes when empty.
    pub images: Vec<RgbFrame>,
    /// User masks at the sample size; procedural blobs are always available.
    pub masks: Vec<MaskPlane>,
}

impl DataSource {
    pub fn load(image_dir: Option<&Path>, mask_dir: Option<&Path>, size: usize) -> Result<Self> {
        let mut src = DataSource::default();
        if let Some(dir) = image_dir {
            for path in crate::io::list_images(dir)? {
                let f = crate::io::load_frame(&path)?;
                if f.height() < size || f.width() < size {
                    return Err(Error::invalid(format!("{}: smaller than {size}×{size}", path.display())));
                }
                src.images.push(f);
            }
        }
        if let Some(dir) = mask_dir {
            for path in crate::io::list_images(dir)? {
                let m = crate::io::load_mask(&path)?;
                if m.dims() != (size, size) {
                    return Err(Error::invalid(format!("{}: mask must be {size}×{size}", path.display())));
                }
                src.masks.push(m);
            }
        }
        Ok(src)
    }

    /// A base scene: user image or procedural, at an equal chance when both exist.
    pub fn scene(&self, size: usize, rng: &mut impl Rng) -> RgbFrame {
        let margin = size + size / 4;
        if !self.images.is_empty() && (rng.gen_bool(0.5)) {
            return self.images.choose(rng).expect("non-empty").clone();
        }
        procedural_scene(margin, margin, rng)
    }

    pub fn mask(&self, size: usize, rng: &mut impl Rng) -> MaskPlane {
        if !self.masks.is_empty() && rng.gen_bool(0.5) {
            return self.masks.choose(rng).expect("non-empty").clone();
        }
        procedural_mask(size, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub view_affine: AffineRanges,
    pub mask_affine: AffineRanges,
    pub max_hole_fraction: f64,
    pub mask_retries: usize,
}

impl SynthConfig {
    pub fn new(size: usize) -> Self {
        SynthConfig {
            size,
            view_affine: AffineRanges::default(),
            mask_affine: AffineRanges::default(),
            max_hole_fraction: 0.8,
            mask_retries: 32,
        }
    }
}

/// One target (view 0) and four references of the same scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// Unmasked views; `views[0]` is the target's ground truth.
    pub views: Vec<RgbFrame>,
    pub holes: Vec<MaskPlane>,
    pub validity: Vec<MaskPlane>,
}

impl TrainSample {
    pub fn ground_truth(&self) -> &RgbFrame {
        &self.views[0]
    }

    pub fn size(&self) -> usize {
        self.views[0].height()
    }
}

/// Warp `scene` and a pool mask independently for each of the five views.
pub fn synth_sample(
    scene: &RgbFrame,
    pool: &[MaskPlane],
    cfg: &SynthConfig,
    rng: &mut impl Rng,
) -> Result<TrainSample> {
    let size = cfg.size;
    if scene.height() < size || scene.width() < size {
        return Err(Error::invalid(format!("scene {:?} smaller than {size}×{size}", scene.dims())));
    }
    if pool.is_empty() {
        return Err(Error::invalid("mask pool is empty"));
    }
    let mut views = Vec::with_capacity(VIEWS);
    let mut holes = Vec::with_capacity(VIEWS);
    for v in 0..VIEWS {
        views.push(warp_frame(scene, &cfg.view_affine.draw(size, rng), size));
        let mut hole = None;
        for _ in 0..cfg.mask_retries.max(1) {
            let src = pool.choose(rng).expect("non-empty");
            let m = warp_mask(src, &cfg.mask_affine.draw(size, rng), size);
            let frac = m.area() as f64 / (size * size) as f64;
            if m.area() > 0 && frac <= cfg.max_hole_fraction {
                hole = Some(m);
                break;
            }
        }
        let hole = hole.ok_or_else(|| {
            Error::DegenerateMask(format!("view {v}: no usable mask after {} retries", cfg.mask_retries))
        })?;
        holes.push(hole);
    }
    let validity = holes.iter().map(MaskPlane::complement).collect();
    Ok(TrainSample { views, holes, validity })
}

/// Draw a scene and mask pool from `data`, then synthesize.
pub fn draw_sample(data: &DataSource, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<TrainSample> {
    let scene = data.scene(cfg.size, rng);
    let pool: Vec<MaskPlane> = (0..VIEWS).map(|_| data.mask(cfg.size, rng)).collect();
    synth_sample(&scene, &pool, cfg, rng)
}
