//! Frozen feature pyramid for the content and style losses.
//!
//! Three `conv3×3 → ELU → 2× average pool` stages with seeded random
//! weights. Weights can also be supplied through a checkpoint
//! (`emb.{s}.weight`, `emb.{s}.bias`).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::Checkpoint;
use crate::tensor::{ConvSpec, Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub widths: [usize; 3],
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig { widths: [16, 32, 64], seed: 0x5eed }
    }
}

#[derive(Debug, Clone)]
pub struct PerceptualEmbedder {
    stages: Vec<(ConvSpec, Tensor<f32>, Tensor<f32>)>,
}

impl PerceptualEmbedder {
    pub fn new(cfg: &EmbedderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut stages = Vec::new();
        let mut cin = 3;
        for &cout in &cfg.widths {
            let spec = ConvSpec::same(cin, cout, 3, 1, 1);
            let bound = (6.0 / (cin * 9) as f32).sqrt();
            let n = spec.weight_shape().iter().product();
            let w = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            stages.push((
                spec,
                Tensor::from_vec(w, &spec.weight_shape()).expect("positive extents"),
                Tensor::zeros(&[cout]).expect("positive extents"),
            ));
            cin = cout;
        }
        PerceptualEmbedder { stages }
    }

    /// Load externally supplied weights.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 3;
        for s in 0..3 {
            let get = |name: String| {
                ckpt.params.get(&name).cloned().ok_or_else(|| Error::Config(format!("embedder checkpoint lacks {name}")))
            };
            let w = get(format!("emb.{s}.weight"))?;
            let b = get(format!("emb.{s}.bias"))?;
            let &[cout, c, 3, 3] = w.shape() else {
                return Err(Error::Config(format!("emb.{s}.weight must be [O, C, 3, 3], got {:?}", w.shape())));
            };
            if c != cin || b.shape() != [cout] {
                return Err(Error::Config(format!("emb.{s}: inconsistent shapes {:?} / {:?}", w.shape(), b.shape())));
            }
            stages.push((ConvSpec::same(cin, cout, 3, 1, 1), w.detach(), b.detach()));
            cin = cout;
        }
        Ok(PerceptualEmbedder { stages })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = BTreeMap::new();
        for (s, (_, w, b)) in self.stages.iter().enumerate() {
            params.insert(format!("emb.{s}.weight"), w.clone());
            params.insert(format!("emb.{s}.bias"), b.clone());
        }
        Checkpoint { params, fingerprint: "embedder".into(), step: 0 }
    }

    /// Stage outputs φ₁..φ₃ of a `[3, H, W]` image, each `[C_s, N_s]`.
    pub fn features<T: Element>(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let &[3, h, w] = x.shape() else {
            return Err(Error::invalid(format!("embedder input must be [3, H, W], got {:?}", x.shape())));
        };
        let mut f = x.add_scalar(T::lit(-0.5)).reshape(&[1, 3, h, w])?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (spec, wt, b) in &self.stages {
            f = f.conv2d(&wt.cast::<T>(), Some(&b.cast::<T>()), spec)?.elu(T::one()).avg_pool2x()?;
            let s = f.shape();
            out.push(f.reshape(&[s[1], s[2] * s[3]])?);
        }
        Ok(out)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, w, b) in &self.stages {
            h.update(w.digest());
            h.update(b.digest());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
