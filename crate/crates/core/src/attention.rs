//! Peel-to-reference matching on mask-indexed feature matrices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::MaskPlane;
use crate::tensor::{opnt, Element, Tensor};

/// Added to the norm product so zero keys give similarity 0.
pub const COSINE_EPS: f64 = 1e-8;

/// Feature-scale cell of frame `frame`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureIndex {
    pub frame: usize,
    pub y: usize,
    pub x: usize,
}

/// Columns pulled out of one or more feature maps: `features` is
/// `[C, indices.len()]`.
#[derive(Debug, Clone)]
pub struct IndexedFeatures<T: Element = f32> {
    pub indices: Vec<FeatureIndex>,
    pub features: Tensor<T>,
}

impl<T: Element> IndexedFeatures<T> {
    pub fn count(&self) -> usize {
        self.indices.len()
    }
}

/// One feature map with its frame id and selection mask.
#[derive(Debug, Clone, Copy)]
pub struct Selection<'a, T: Element> {
    pub frame: usize,
    pub map: &'a Tensor<T>,
    pub mask: &'a MaskPlane,
}

/// Member cells of each selection, row-major within a frame, frames in the
/// given order. `Ok(None)` when nothing is selected.
pub fn gather<T: Element>(sources: &[Selection<'_, T>]) -> Result<Option<IndexedFeatures<T>>> {
    let mut indices = Vec::new();
    let mut blocks = Vec::new();
    let mut channels = None;
    for s in sources {
        let &[c, h, w] = s.map.shape() else {
            return Err(Error::invalid(format!("feature map must be [C, h, w], got {:?}", s.map.shape())));
        };
        if s.mask.dims() != (h, w) {
            return Err(Error::invalid(format!(
                "mask {:?} does not match feature map {h}×{w}",
                s.mask.dims()
            )));
        }
        if *channels.get_or_insert(c) != c {
            return Err(Error::invalid("feature maps disagree on channel count"));
        }
        let cells = s.mask.member_indices();
        if cells.is_empty() {
            continue;
        }
        indices.extend(cells.iter().map(|&i| FeatureIndex { frame: s.frame, y: i / w, x: i % w }));
        blocks.push(s.map.reshape(&[c, h * w])?.index_select_cols(&cells)?);
    }
    if blocks.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&Tensor<T>> = blocks.iter().collect();
    let features = if refs.len() == 1 { blocks[0].clone() } else { Tensor::concat(&refs, 1)? };
    Ok(Some(IndexedFeatures { indices, features }))
}

#[derive(Debug, Clone)]
pub struct Attention<T: Element = f32> {
    /// `[value_dim, c]`.
    pub retrieved: Tensor<T>,
    /// `[c, m]`, rows sum to one.
    pub scores: Tensor<T>,
    /// Number of query–key similarities computed (c·m).
    pub similarity_evaluations: usize,
}

/// Cosine-similarity softmax attention. `q` is `[K, c]`, `k` is `[K, m]`,
/// `v` is `[V, m]`.
pub fn attend<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, temperature: f64) -> Result<Attention<T>> {
    let (&[kq, c], &[kk, m], &[_, mv]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(Error::invalid("attend expects rank-2 q, k, v"));
    };
    if m == 0 || mv == 0 {
        return Err(Error::NoValidReference);
    }
    if kq != kk || m != mv {
        return Err(Error::invalid(format!(
            "attend shapes q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    let dots = q.transpose()?.matmul(k)?;
    let norms = q.norm_axis(0)?.transpose()?.matmul(&k.norm_axis(0)?)?;
    let sim = dots.div(&norms.add_scalar(T::lit(COSINE_EPS)))?;
    let scores = sim.mul_scalar(T::lit(1.0 / temperature)).softmax(1)?;
    let retrieved = v.matmul(&scores.transpose()?)?;
    Ok(Attention { retrieved, scores, similarity_evaluations: c * m })
}

/// `r` with `u`'s columns added at the listed cells of frame-local map `r`
/// (`[C, h, w]`). Other cells are untouched.
pub fn scatter_add<T: Element>(r: &Tensor<T>, cells: &[FeatureIndex], u: &Tensor<T>) -> Result<Tensor<T>> {
    let &[c, h, w] = r.shape() else {
        return Err(Error::invalid(format!("value map must be [C, h, w], got {:?}", r.shape())));
    };
    if cells.is_empty() {
        return Ok(r.clone());
    }
    if let Some(bad) = cells.iter().find(|i| i.y >= h || i.x >= w) {
        return Err(Error::invalid(format!("cell {bad:?} outside {h}×{w}")));
    }
    let flat: Vec<usize> = cells.iter().map(|i| i.y * w + i.x).collect();
    r.reshape(&[c, h * w])?.index_add_cols(&flat, u)?.reshape(&[c, h, w])
}

/// Key, value and feature-scale validity of one encoded reference frame.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceView<'a, T: Element> {
    pub frame: usize,
    pub key: &'a Tensor<T>,
    pub value: &'a Tensor<T>,
    pub validity: &'a MaskPlane,
}

#[derive(Debug, Clone)]
pub struct BlockOutput<T: Element = f32> {
    /// Updated target value map.
    pub z: Tensor<T>,
    /// Present when matching ran (non-empty peel).
    pub matching: Option<Matching<T>>,
}

#[derive(Debug, Clone)]
pub struct Matching<T: Element = f32> {
    pub peel: Vec<FeatureIndex>,
    pub reference: Vec<FeatureIndex>,
    pub scores: Tensor<T>,
    pub similarity_evaluations: usize,
}

/// gather → attend → scatter_add for one target frame.
///
/// `q`, `r` are the target key/value maps; `peel` is at feature scale. The
/// caller must already have excluded the target from `refs`.
pub fn asym_atten_block<T: Element>(
    target_frame: usize,
    q: &Tensor<T>,
    r: &Tensor<T>,
    peel: &MaskPlane,
    refs: &[ReferenceView<'_, T>],
    temperature: f64,
) -> Result<BlockOutput<T>> {
    let Some(queries) = gather(&[Selection { frame: target_frame, map: q, mask: peel }])? else {
        // Shape check still applies to r.
        if r.rank() != 3 {
            return Err(Error::invalid(format!("value map must be [C, h, w], got {:?}", r.shape())));
        }
        return Ok(BlockOutput { z: r.clone(), matching: None });
    };
    let keys: Vec<Selection<T>> = refs.iter().map(|v| Selection { frame: v.frame, map: v.key, mask: v.validity }).collect();
    let values: Vec<Selection<T>> = refs.iter().map(|v| Selection { frame: v.frame, map: v.value, mask: v.validity }).collect();
    let Some(k) = gather(&keys)? else {
        return Err(Error::NoValidReference);
    };
    let v = gather(&values)?.expect("same masks as the keys");
    let att = attend(&queries.features, &k.features, &v.features, temperature)?;
    let z = scatter_add(r, &queries.indices, &att.retrieved)?;
    Ok(BlockOutput {
        z,
        matching: Some(Matching {
            peel: queries.indices,
            reference: k.indices,
            scores: att.scores,
            similarity_evaluations: att.similarity_evaluations,
        }),
    })
}

/// Write `scores_RRR.opnt` and an index sidecar `scores_RRR.idx` into `dir`.
///
/// Sidecar lines: `row <i> <frame>,<y>,<x>` for each peel cell, then
/// `col <j> <frame>,<y>,<x>` for each reference cell.
pub fn dump_scores<T: Element>(dir: &Path, recursion: usize, m: &Matching<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    opnt::save(&dir.join(format!("scores_{recursion:03}.opnt")), &m.scores)?;
    let mut text = String::new();
    for (i, c) in m.peel.iter().enumerate() {
        writeln!(text, "row {i} {},{},{}", c.frame, c.y, c.x).unwrap();
    }
    for (j, c) in m.reference.iter().enumerate() {
        writeln!(text, "col {j} {},{},{}", c.frame, c.y, c.x).unwrap();
    }
    fs::write(dir.join(format!("scores_{recursion:03}.idx")), text)?;
    Ok(())
}
