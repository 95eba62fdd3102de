//! Reference encoding and the per-frame peel-by-peel completion loop.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::warn;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attention::{asym_atten_block, dump_scores, ReferenceView};
use crate::error::{Error, Result};
use crate::frame::{pad4, RgbFrame};
use crate::mask::{downsample_mask, erode_schedule, get_peel, PadMode, PeelWidth, Reduce, MaskPlane};
use crate::network::Network;
use crate::tensor::Tensor;

pub const DEFAULT_REF_STRIDE: usize = 5;
/// Slack added to the schedule length when the recursion cap is automatic.
pub const AUTO_CAP_SLACK: usize = 2;

/// Frames with their holes and validity maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub frames: Vec<RgbFrame>,
    pub holes: Vec<MaskPlane>,
    pub validity: Vec<MaskPlane>,
}

impl FrameSet {
    /// Checks equal extents and that hole and validity never overlap.
    /// Pixels in neither (generated but not yet trusted) are allowed.
    pub fn new(frames: Vec<RgbFrame>, holes: Vec<MaskPlane>, validity: Vec<MaskPlane>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("frame set is empty"));
        }
        if holes.len() != frames.len() || validity.len() != frames.len() {
            return Err(Error::invalid(format!(
                "{} frames, {} holes, {} validity maps",
                frames.len(),
                holes.len(),
                validity.len()
            )));
        }
        let dims = frames[0].dims();
        for (i, ((f, h), v)) in frames.iter().zip(&holes).zip(&validity).enumerate() {
            if f.dims() != dims || h.dims() != dims || v.dims() != dims {
                return Err(Error::invalid(format!("frame {i}: extents differ from frame 0 ({dims:?})")));
            }
            if h.intersects(v)? {
                return Err(Error::invalid(format!("frame {i}: hole and validity overlap")));
            }
        }
        Ok(FrameSet { frames, holes, validity })
    }

    /// Validity is the complement of each hole.
    pub fn from_holes(frames: Vec<RgbFrame>, holes: Vec<MaskPlane>) -> Result<Self> {
        let validity = holes.iter().map(MaskPlane::complement).collect();
        Self::new(frames, holes, validity)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RecursionCap {
    /// Erosion schedule length plus [`AUTO_CAP_SLACK`].
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionOptions {
    pub peel_width: PeelWidth,
    pub ref_stride: usize,
    pub recursion_cap: RecursionCap,
    pub one_shot: bool,
    /// Error on degenerate input instead of falling back.
    pub strict: bool,
    /// Worker threads for independent target frames.
    pub threads: usize,
    /// Write per-recursion attention scores under this directory.
    pub score_dump: Option<PathBuf>,
}

impl Default for CompletionOptions {
    fn default() -> Self {
        CompletionOptions {
            peel_width: PeelWidth::default(),
            ref_stride: DEFAULT_REF_STRIDE,
            recursion_cap: RecursionCap::Auto,
            one_shot: false,
            strict: false,
            threads: 1,
            score_dump: None,
        }
    }
}

/// `{0, stride, 2·stride, …} ∩ [0, t)`.
pub fn sampled_indices(t: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::invalid("reference stride must be ≥ 1"));
    }
    Ok((0..t).step_by(stride).collect())
}

/// Sampled references for `target`, which is excluded from its own pool.
pub fn sample_references(t: usize, stride: usize, target: usize) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::invalid("no frames"));
    }
    let refs: Vec<usize> = sampled_indices(t, stride)?.into_iter().filter(|&i| i != target).collect();
    if refs.is_empty() {
        return Err(Error::NoReference(format!("no reference frame for target {target} (T = {t}, stride {stride})")));
    }
    Ok(refs)
}

/// Key/value maps of a reference frame, computed once from its original
/// frame, hole and validity.
#[derive(Debug, Clone)]
pub struct EncodedReference {
    pub frame: usize,
    pub key: Tensor,
    pub value: Tensor,
    /// Feature-scale validity (a cell is valid only if all its pixels are).
    pub validity: MaskPlane,
}

impl EncodedReference {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.frame as u64).to_le_bytes());
        h.update(self.key.digest());
        h.update(self.value.digest());
        h.update(self.validity.bits().iter().map(|&b| b as u8).collect::<Vec<_>>());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn view(&self) -> ReferenceView<'_, f32> {
        ReferenceView { frame: self.frame, key: &self.key, value: &self.value, validity: &self.validity }
    }
}

pub fn encode_reference(
    net: &Network,
    index: usize,
    frame: &RgbFrame,
    hole: &MaskPlane,
    validity: &MaskPlane,
) -> Result<EncodedReference> {
    let (ph, pw) = (pad4(frame.height()), pad4(frame.width()));
    let x = frame.pad_reflect(ph, pw);
    let h = hole.pad_to(ph, pw, PadMode::Reflect);
    let v = validity.pad_to(ph, pw, PadMode::Reflect);
    let e = net.encode(&x.to_tensor(), &h, &v)?;
    Ok(EncodedReference {
        frame: index,
        key: e.key.detach(),
        value: e.value.detach(),
        validity: downsample_mask(&v, 4, Reduce::All),
    })
}

/// Counters for one completed frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FrameTrace {
    pub recursions: usize,
    pub encoder_passes: usize,
    pub decoder_passes: usize,
    pub similarity_evaluations: usize,
    /// Pixel area of each peel, in order.
    pub peel_areas: Vec<usize>,
    /// Recursions that decoded without retrieval.
    pub fallback_recursions: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub frame: RgbFrame,
    pub trace: FrameTrace,
}

/// Fill `hole` of `target` peel by peel. Pixels outside the hole are never
/// written. `index` identifies the target in score dumps.
pub fn complete_image(
    index: usize,
    target: &RgbFrame,
    hole: &MaskPlane,
    validity: &MaskPlane,
    refs: &[&EncodedReference],
    net: &Network,
    opts: &CompletionOptions,
) -> Result<Completion> {
    let start = Instant::now();
    let dims = target.dims();
    if hole.dims() != dims || validity.dims() != dims {
        return Err(Error::invalid(format!("mask extents {:?}/{:?} vs frame {dims:?}", hole.dims(), validity.dims())));
    }
    if hole.intersects(validity)? {
        return Err(Error::invalid("hole and validity overlap"));
    }
    if opts.strict {
        target.check_range()?;
    }
    let mut trace = FrameTrace::default();
    if hole.is_empty() {
        trace.seconds = start.elapsed().as_secs_f64();
        return Ok(Completion { frame: target.clone(), trace });
    }

    let mut one_shot = opts.one_shot;
    if hole.is_full() {
        if opts.strict {
            return Err(Error::DegenerateMask(format!("frame {index}: hole covers the whole {}×{} frame", dims.0, dims.1)));
        }
        warn!("frame {index}: hole covers the whole frame, filling in one shot");
        one_shot = true;
    }
    let cap = match opts.recursion_cap {
        RecursionCap::Fixed(n) => n,
        RecursionCap::Auto if one_shot => 1 + AUTO_CAP_SLACK,
        RecursionCap::Auto => erode_schedule(hole, opts.peel_width)?.len() + AUTO_CAP_SLACK,
    };

    let (ph, pw) = (pad4(dims.0), pad4(dims.1));
    let v_in = validity.pad_to(ph, pw, PadMode::Reflect);
    let views: Vec<ReferenceView<f32>> = refs.iter().map(|r| r.view()).collect();
    let mut x = target.clone();
    let mut h = hole.clone();
    while !h.is_empty() {
        if trace.recursions >= cap {
            return Err(Error::RecursionCapExceeded { cap, remaining: h.area() });
        }
        let peel = if one_shot { h.clone() } else { get_peel(&h, opts.peel_width)? };
        let x_in = x.pad_reflect(ph, pw).to_tensor::<f32>();
        let e = net.encode(&x_in, &h.pad_to(ph, pw, PadMode::Reflect), &v_in)?;
        trace.encoder_passes += 1;
        let peel_feat = downsample_mask(&peel.pad_to(ph, pw, PadMode::Empty), 4, Reduce::Any);
        let z = match asym_atten_block(index, &e.key, &e.value, &peel_feat, &views, 1.0) {
            Ok(out) => {
                if let Some(m) = &out.matching {
                    trace.similarity_evaluations += m.similarity_evaluations;
                    if let Some(dir) = &opts.score_dump {
                        dump_scores(&dir.join(format!("frame_{index:05}")), trace.recursions, m)?;
                    }
                }
                out.z
            }
            Err(Error::NoValidReference) => {
                warn!("frame {index}, recursion {}: no valid reference cell, decoding without retrieval", trace.recursions);
                trace.fallback_recursions += 1;
                e.value
            }
            Err(err) => return Err(err),
        };
        let raw = RgbFrame::from_tensor(&net.decode(&z, &peel_feat)?)?.crop(dims.0, dims.1);
        trace.decoder_passes += 1;
        x.compose(&raw, &peel)?;
        trace.peel_areas.push(peel.area());
        h = h.difference(&peel)?;
        trace.recursions += 1;
    }
    trace.seconds = start.elapsed().as_secs_f64();
    Ok(Completion { frame: x, trace })
}

/// The whole hole as a single peel.
pub fn one_shot_complete(
    index: usize,
    target: &RgbFrame,
    hole: &MaskPlane,
    validity: &MaskPlane,
    refs: &[&EncodedReference],
    net: &Network,
    opts: &CompletionOptions,
) -> Result<Completion> {
    let opts = CompletionOptions { one_shot: true, ..opts.clone() };
    complete_image(index, target, hole, validity, refs, net, &opts)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VideoTrace {
    pub reference_indices: Vec<usize>,
    /// Encoder passes spent on references.
    pub reference_encodes: usize,
    pub frames: Vec<FrameTrace>,
}

#[derive(Debug, Clone)]
pub struct VideoCompletion {
    pub frames: FrameSet,
    pub trace: VideoTrace,
}

/// Encode every sampled reference of `set` once.
pub fn encode_references(set: &FrameSet, net: &Network, stride: usize) -> Result<Vec<EncodedReference>> {
    sampled_indices(set.len(), stride)?
        .into_iter()
        .map(|i| encode_reference(net, i, &set.frames[i], &set.holes[i], &set.validity[i]))
        .collect()
}

/// Complete `targets` of `set` (in the given order) against fixed
/// references. Results are returned in the order of `targets`.
pub fn complete_targets(
    set: &FrameSet,
    refs: &[EncodedReference],
    targets: &[usize],
    net: &Network,
    opts: &CompletionOptions,
) -> Result<Vec<Completion>> {
    if let Some(&bad) = targets.iter().find(|&&t| t >= set.len()) {
        return Err(Error::invalid(format!("target {bad} out of range")));
    }
    let work = |t: usize| -> Result<Completion> {
        let pool: Vec<&EncodedReference> = refs.iter().filter(|r| r.frame != t).collect();
        if pool.is_empty() && opts.strict && !set.holes[t].is_empty() {
            return Err(Error::NoReference(format!("frame {t} has no reference")));
        }
        complete_image(t, &set.frames[t], &set.holes[t], &set.validity[t], &pool, net, opts)
    };
    let threads = opts.threads.clamp(1, targets.len().max(1));
    if threads == 1 {
        return targets.iter().map(|&t| work(t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Completion>>>> = Mutex::new((0..targets.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= targets.len() {
                    break;
                }
                let r = work(targets[k]);
                slots.lock().unwrap()[k] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Encode the sampled references once, then complete every frame.
pub fn complete_video(set: &FrameSet, net: &Network, opts: &CompletionOptions) -> Result<VideoCompletion> {
    if set.len() < 2 && opts.strict {
        return Err(Error::NoReference("video mode needs at least two frames".into()));
    }
    let refs = encode_references(set, net, opts.ref_stride)?;
    let targets: Vec<usize> = (0..set.len()).collect();
    let done = complete_targets(set, &refs, &targets, net, opts)?;
    let trace = VideoTrace {
        reference_indices: refs.iter().map(|r| r.frame).collect(),
        reference_encodes: refs.len(),
        frames: done.iter().map(|c| c.trace.clone()).collect(),
    };
    let frames = done.into_iter().map(|c| c.frame).collect();
    let (h, w) = set.dims();
    let holes = vec![MaskPlane::empty(h, w); set.len()];
    Ok(VideoCompletion { frames: FrameSet { frames, holes, validity: set.validity.clone() }, trace })
}
