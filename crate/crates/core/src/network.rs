//! Gated-convolution encoder with key/value heads and the mirrored decoder.
//!
//! Layer table (C = `base_channels`):
//!
//! | name        | in → out            | stride | dilation |
//! |-------------|---------------------|--------|----------|
//! | `enc.0`     | 5 → C               | 1      | 1        |
//! | `enc.1`     | C → 2C              | 2      | 1        |
//! | `enc.2`     | 2C → 2C             | 1      | 1        |
//! | `enc.3`     | 2C → 4C             | 2      | 1        |
//! | `enc.4..`   | 4C → 4C             | 1      | 2, 4, 8  |
//! | `enc.key`   | 4C → key_dim        | 1      | 1        |
//! | `enc.value` | 4C → value_dim      | 1      | 1        |
//! | `dec.0`     | value_dim + 1 → 4C  | 1      | 1        |
//! | `dec.1`     | 4C → 4C             | 1      | 1        |
//! | `dec.2`     | ↑2, 4C → 2C         | 1      | 1        |
//! | `dec.3`     | 2C → 2C             | 1      | 1        |
//! | `dec.4`     | ↑2, 2C → C          | 1      | 1        |
//! | `dec.out`   | C → 3, sigmoid      | 1      | 1        |
//!
//! Every layer except `dec.out` is a gated convolution. The extra decoder
//! input channel is the peel mask at feature resolution.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::MaskPlane;
use crate::tensor::{opnt, ConvSpec, Element, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Initial gate bias: sigmoid(1) ≈ 0.73, gates start mostly open.
pub const GATE_BIAS_INIT: f32 = 1.0;
/// Grey written into hole pixels of the encoder input.
pub const NEUTRAL_GREY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    LeakyRelu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Element>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Elu => x.elu(T::one()),
            Activation::LeakyRelu => x.leaky_relu(T::lit(LEAKY_SLOPE)),
            Activation::Relu => x.relu(),
            Activation::Identity => x.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// One dilated block per entry, at 4C channels.
    pub dilations: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl NetworkConfig {
    pub fn paper() -> Self {
        NetworkConfig {
            base_channels: 64,
            key_dim: 64,
            value_dim: 128,
            dilations: vec![2, 4, 8],
            activation: Activation::Elu,
            init_seed: 0,
        }
    }

    pub fn desk() -> Self {
        NetworkConfig { base_channels: 16, key_dim: 8, value_dim: 16, ..Self::paper() }
    }

    /// Smallest network, used for finite-difference checks.
    pub fn tiny() -> Self {
        NetworkConfig { base_channels: 4, key_dim: 4, value_dim: 4, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.key_dim == 0 || self.value_dim == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::Config("dilations must be positive".into()));
        }
        Ok(())
    }

    /// Short stable hash of the configuration.
    pub fn fingerprint(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn encoder_layers(&self) -> Vec<LayerSpec> {
        let c = self.base_channels;
        let act = self.activation;
        let mut layers = vec![
            LayerSpec::gated("enc.0", ConvSpec::same(5, c, 3, 1, 1), act, false),
            LayerSpec::gated("enc.1", ConvSpec::same(c, 2 * c, 3, 2, 1), act, false),
            LayerSpec::gated("enc.2", ConvSpec::same(2 * c, 2 * c, 3, 1, 1), act, false),
            LayerSpec::gated("enc.3", ConvSpec::same(2 * c, 4 * c, 3, 2, 1), act, false),
        ];
        for (i, &d) in self.dilations.iter().enumerate() {
            layers.push(LayerSpec::gated(&format!("enc.{}", 4 + i), ConvSpec::same(4 * c, 4 * c, 3, 1, d), act, false));
        }
        layers
    }

    pub fn key_head(&self) -> LayerSpec {
        LayerSpec::gated("enc.key", ConvSpec::same(4 * self.base_channels, self.key_dim, 3, 1, 1), Activation::Identity, false)
    }

    pub fn value_head(&self) -> LayerSpec {
        LayerSpec::gated("enc.value", ConvSpec::same(4 * self.base_channels, self.value_dim, 3, 1, 1), Activation::Identity, false)
    }

    pub fn decoder_layers(&self) -> Vec<LayerSpec> {
        let c = self.base_channels;
        let act = self.activation;
        vec![
            LayerSpec::gated("dec.0", ConvSpec::same(self.value_dim + 1, 4 * c, 3, 1, 1), act, false),
            LayerSpec::gated("dec.1", ConvSpec::same(4 * c, 4 * c, 3, 1, 1), act, false),
            LayerSpec::gated("dec.2", ConvSpec::same(4 * c, 2 * c, 3, 1, 1), act, true),
            LayerSpec::gated("dec.3", ConvSpec::same(2 * c, 2 * c, 3, 1, 1), act, false),
            LayerSpec::gated("dec.4", ConvSpec::same(2 * c, c, 3, 1, 1), act, true),
        ]
    }

    pub fn output_layer(&self) -> LayerSpec {
        LayerSpec {
            name: "dec.out".into(),
            conv: ConvSpec::same(self.base_channels, 3, 3, 1, 1),
            activation: Activation::Identity,
            upsample_before: false,
            gated: false,
        }
    }

    pub fn all_layers(&self) -> Vec<LayerSpec> {
        let mut all = self.encoder_layers();
        all.push(self.key_head());
        all.push(self.value_head());
        all.extend(self.decoder_layers());
        all.push(self.output_layer());
        all
    }

    /// (name, shape, initial-value rule) for every parameter, in a fixed order.
    fn parameter_table(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut table = Vec::new();
        for layer in self.all_layers() {
            let fan_in = layer.conv.in_channels * layer.conv.kernel_size * layer.conv.kernel_size;
            let w = layer.conv.weight_shape().to_vec();
            let b = vec![layer.conv.out_channels];
            if layer.gated {
                table.push((format!("{}.feat.weight", layer.name), w.clone(), Init::Uniform(fan_in)));
                table.push((format!("{}.feat.bias", layer.name), b.clone(), Init::Const(0.0)));
                table.push((format!("{}.gate.weight", layer.name), w, Init::Uniform(fan_in)));
                table.push((format!("{}.gate.bias", layer.name), b, Init::Const(GATE_BIAS_INIT)));
            } else {
                table.push((format!("{}.weight", layer.name), w, Init::Uniform(fan_in)));
                table.push((format!("{}.bias", layer.name), b, Init::Const(0.0)));
            }
        }
        table
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_table().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

fn check_shape(name: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Config(format!("{name}: shape {got:?}, expected {want:?}")));
    }
    Ok(())
}

enum Init {
    /// U(−√(6/fan_in), √(6/fan_in)).
    Uniform(usize),
    Const(f32),
}

/// One row of the layer table.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub conv: ConvSpec,
    pub activation: Activation,
    /// Nearest-neighbour 2× upsampling applied to the layer input.
    pub upsample_before: bool,
    pub gated: bool,
}

impl LayerSpec {
    fn gated(name: &str, conv: ConvSpec, activation: Activation, upsample_before: bool) -> Self {
        LayerSpec { name: name.into(), conv, activation, upsample_before, gated: true }
    }
}

/// Feature and gate convolutions of identical geometry.
#[derive(Debug, Clone)]
pub struct GatedConvLayer<T: Element = f32> {
    pub spec: LayerSpec,
    pub feat_weight: Tensor<T>,
    pub feat_bias: Tensor<T>,
    pub gate_weight: Tensor<T>,
    pub gate_bias: Tensor<T>,
}

/// `activation(conv_feat(x)) ⊙ sigmoid(conv_gate(x))`.
///
/// Both branches run as one convolution over the concatenated weights.
pub fn gated_conv<T: Element>(x: &Tensor<T>, layer: &GatedConvLayer<T>) -> Result<Tensor<T>> {
    let conv = layer.spec.conv;
    for w in [&layer.feat_weight, &layer.gate_weight] {
        if w.shape() != conv.weight_shape() {
            return Err(Error::invalid(format!("{}: weight shape {:?}", layer.spec.name, w.shape())));
        }
    }
    let o = conv.out_channels;
    let weight = Tensor::concat(&[&layer.feat_weight, &layer.gate_weight], 0)?;
    let bias = Tensor::concat(&[&layer.feat_bias, &layer.gate_bias], 0)?;
    let both = ConvSpec { out_channels: 2 * o, ..conv };
    let y = x.conv2d(&weight, Some(&bias), &both)?;
    let feat = layer.spec.activation.apply(&y.narrow(1, 0, o)?);
    let gate = y.narrow(1, o, o)?.sigmoid();
    feat.mul(&gate)
}

/// Encoder input: RGB with hole pixels set to neutral grey, then the hole
/// plane, then the validity plane. Returns `[5, H, W]`.
pub fn assemble_input<T: Element>(
    frame: &Tensor<T>,
    hole: &MaskPlane,
    validity: &MaskPlane,
    strict: bool,
) -> Result<Tensor<T>> {
    let &[3, h, w] = frame.shape() else {
        return Err(Error::invalid(format!("frame must be [3, H, W], got {:?}", frame.shape())));
    };
    if hole.dims() != (h, w) || validity.dims() != (h, w) {
        return Err(Error::invalid(format!(
            "mask extents {:?}/{:?} do not match frame {h}×{w}",
            hole.dims(),
            validity.dims()
        )));
    }
    if strict {
        if let Some(v) = frame.data().iter().find(|v| !(T::zero()..=T::one()).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
    }
    let hm = hole.to_tensor::<T>();
    let keep = hole.complement().to_tensor::<T>();
    let rgb = frame.mul(&keep)?.add(&hm.mul_scalar(T::lit(NEUTRAL_GREY)))?;
    Tensor::concat(&[&rgb, &hm, &validity.to_tensor::<T>()], 0)
}

/// Key and value maps of one frame, `[key_dim, H/4, W/4]` and
/// `[value_dim, H/4, W/4]`.
#[derive(Debug, Clone)]
pub struct Embedding<T: Element = f32> {
    pub key: Tensor<T>,
    pub value: Tensor<T>,
}

/// Named parameter store.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor<f32>>,
    pub fingerprint: String,
    pub step: u64,
}

impl Checkpoint {
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            h.update(t.digest().as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "config.toml";

impl Checkpoint {
    /// Write `manifest.txt`, `params.bin` and `config.toml` into `dir`.
    ///
    /// Manifest lines: `name<TAB>extents(x-separated)<TAB>byte offset<TAB>byte length`,
    /// preceded by `# step N` and `# fingerprint F`.
    pub fn save(&self, dir: &Path, config: &NetworkConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = format!("# step {}\n# fingerprint {}\n", self.step, self.fingerprint);
        let mut blob = Vec::new();
        for (name, t) in &self.params {
            let bytes = opnt::to_bytes(t);
            let extents: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{name}\t{}\t{}\t{}\n", extents.join("x"), blob.len(), bytes.len()));
            blob.extend_from_slice(&bytes);
        }
        fs::write(dir.join(PARAMS_FILE), blob)?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        let text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join(CONFIG_FILE), text)?;
        Ok(())
    }

    /// Read a checkpoint directory and the config stored with it.
    pub fn load(dir: &Path) -> Result<(Checkpoint, NetworkConfig)> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest = fs::read_to_string(&manifest_path)?;
        let blob = fs::read(dir.join(PARAMS_FILE))?;
        let config_path = dir.join(CONFIG_FILE);
        let config: NetworkConfig = toml::from_str(&fs::read_to_string(&config_path)?)
            .map_err(|e| Error::format(&config_path, e.to_string()))?;
        let bad = |msg: String| Error::format(&manifest_path, msg);
        let (mut step, mut fingerprint) = (None, None);
        let mut params = BTreeMap::new();
        for (lineno, line) in manifest.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("# step ") {
                step = Some(rest.trim().parse::<u64>().map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?);
                continue;
            }
            if let Some(rest) = line.strip_prefix("# fingerprint ") {
                fingerprint = Some(rest.trim().to_string());
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, extents, offset, len] = fields[..] else {
                return Err(bad(format!("line {}: expected 4 tab-separated fields", lineno + 1)));
            };
            let parse = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", lineno + 1)));
            let (offset, len) = (parse(offset)?, parse(len)?);
            let shape = extents.split('x').map(parse).collect::<Result<Vec<_>>>()?;
            let end = offset.checked_add(len).filter(|&e| e <= blob.len());
            let Some(end) = end else {
                return Err(bad(format!("{name}: byte range {offset}+{len} beyond params file")));
            };
            let t = opnt::read_tensor(&mut &blob[offset..end], &dir.join(PARAMS_FILE))?;
            if t.shape() != shape.as_slice() {
                return Err(bad(format!("{name}: manifest shape {shape:?} but payload {:?}", t.shape())));
            }
            if params.insert(name.to_string(), t).is_some() {
                return Err(bad(format!("duplicate parameter {name}")));
            }
        }
        let ckpt = Checkpoint {
            params,
            fingerprint: fingerprint.ok_or_else(|| bad("missing fingerprint line".into()))?,
            step: step.ok_or_else(|| bad("missing step line".into()))?,
        };
        Ok((ckpt, config))
    }
}

/// Fan-in scaled uniform weights, zero feature biases, gate biases at +1.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (name, shape, init) in config.parameter_table() {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Uniform(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Const(v) => vec![v; n],
        };
        params.insert(name, Tensor::from_vec(data, &shape)?);
    }
    Ok(Checkpoint { params, fingerprint: config.fingerprint(), step: 0 })
}

/// The onion-peel network: shared encoder and decoder.
pub struct Network<T: Element = f32> {
    config: NetworkConfig,
    trunk: Vec<GatedConvLayer<T>>,
    key_head: GatedConvLayer<T>,
    value_head: GatedConvLayer<T>,
    decoder: Vec<GatedConvLayer<T>>,
    out_spec: LayerSpec,
    out_weight: Tensor<T>,
    out_bias: Tensor<T>,
    encoder_passes: AtomicUsize,
    decoder_passes: AtomicUsize,
}

impl<T: Element> Network<T> {
    /// Build from a checkpoint. Strict loading requires the exact parameter
    /// set and a matching config fingerprint; lenient loading ignores extra
    /// names and the fingerprint. Missing or misshaped parameters always fail.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &NetworkConfig, trainable: bool, strict: bool) -> Result<Self> {
        config.validate()?;
        if strict && ckpt.fingerprint != config.fingerprint() {
            return Err(Error::Config(format!(
                "checkpoint fingerprint {} does not match config {}",
                ckpt.fingerprint,
                config.fingerprint()
            )));
        }
        let table = config.parameter_table();
        if strict && ckpt.params.len() != table.len() {
            let known: std::collections::HashSet<&String> = table.iter().map(|(n, _, _)| n).collect();
            let extra: Vec<&String> = ckpt.params.keys().filter(|k| !known.contains(k)).collect();
            return Err(Error::Config(format!("unexpected parameters {extra:?}")));
        }
        Self::assemble(config, |name, shape| {
            let t = ckpt
                .params
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            check_shape(name, t.shape(), shape)?;
            Ok(t.cast::<T>().with_requires_grad(trainable))
        })
    }

    /// Build from live tensors, keeping their autodiff identity. Used when
    /// the parameters themselves are differentiated (training, grad checks).
    pub fn from_parameters(config: &NetworkConfig, params: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        Self::assemble(config, |name, shape| {
            let t = params.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            check_shape(name, t.shape(), shape)?;
            Ok(t.clone())
        })
    }

    fn assemble(config: &NetworkConfig, fetch: impl Fn(&str, &[usize]) -> Result<Tensor<T>>) -> Result<Self> {
        let gated = |spec: LayerSpec| -> Result<GatedConvLayer<T>> {
            let w = spec.conv.weight_shape();
            let b = [spec.conv.out_channels];
            Ok(GatedConvLayer {
                feat_weight: fetch(&format!("{}.feat.weight", spec.name), &w)?,
                feat_bias: fetch(&format!("{}.feat.bias", spec.name), &b)?,
                gate_weight: fetch(&format!("{}.gate.weight", spec.name), &w)?,
                gate_bias: fetch(&format!("{}.gate.bias", spec.name), &b)?,
                spec,
            })
        };
        let out_spec = config.output_layer();
        Ok(Network {
            trunk: config.encoder_layers().into_iter().map(gated).collect::<Result<_>>()?,
            key_head: gated(config.key_head())?,
            value_head: gated(config.value_head())?,
            decoder: config.decoder_layers().into_iter().map(gated).collect::<Result<_>>()?,
            out_weight: fetch(&format!("{}.weight", out_spec.name), &out_spec.conv.weight_shape())?,
            out_bias: fetch(&format!("{}.bias", out_spec.name), &[out_spec.conv.out_channels])?,
            out_spec,
            config: config.clone(),
            encoder_passes: AtomicUsize::new(0),
            decoder_passes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Every parameter tensor with its checkpoint name.
    pub fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let layers = self
            .trunk
            .iter()
            .chain([&self.key_head, &self.value_head])
            .chain(self.decoder.iter());
        for l in layers {
            out.push((format!("{}.feat.weight", l.spec.name), l.feat_weight.clone()));
            out.push((format!("{}.feat.bias", l.spec.name), l.feat_bias.clone()));
            out.push((format!("{}.gate.weight", l.spec.name), l.gate_weight.clone()));
            out.push((format!("{}.gate.bias", l.spec.name), l.gate_bias.clone()));
        }
        out.push((format!("{}.weight", self.out_spec.name), self.out_weight.clone()));
        out.push((format!("{}.bias", self.out_spec.name), self.out_bias.clone()));
        out
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let params = self.parameters().into_iter().map(|(n, t)| (n, t.cast::<f32>())).collect();
        Checkpoint { params, fingerprint: self.config.fingerprint(), step }
    }

    pub fn encoder_passes(&self) -> usize {
        self.encoder_passes.load(Ordering::Relaxed)
    }

    pub fn decoder_passes(&self) -> usize {
        self.decoder_passes.load(Ordering::Relaxed)
    }

    /// Key/value embedding of a frame whose extents are multiples of 4.
    pub fn encode(&self, frame: &Tensor<T>, hole: &MaskPlane, validity: &MaskPlane) -> Result<Embedding<T>> {
        self.encode_checked(frame, hole, validity, false)
    }

    pub fn encode_checked(&self, frame: &Tensor<T>, hole: &MaskPlane, validity: &MaskPlane, strict: bool) -> Result<Embedding<T>> {
        let input = assemble_input(frame, hole, validity, strict)?;
        let (h, w) = (input.shape()[1], input.shape()[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!("encoder input {h}×{w} is not a multiple of 4")));
        }
        self.encoder_passes.fetch_add(1, Ordering::Relaxed);
        let mut x = input.reshape(&[1, 5, h, w])?;
        for layer in &self.trunk {
            x = gated_conv(&x, layer)?;
        }
        let (fh, fw) = (h / 4, w / 4);
        let key = gated_conv(&x, &self.key_head)?.reshape(&[self.config.key_dim, fh, fw])?;
        let value = gated_conv(&x, &self.value_head)?.reshape(&[self.config.value_dim, fh, fw])?;
        Ok(Embedding { key, value })
    }

    /// Raw RGB reconstruction `[3, 4h, 4w]` in `[0, 1]` from an updated value
    /// map `[value_dim, h, w]` and the feature-scale peel mask.
    pub fn decode(&self, z: &Tensor<T>, peel: &MaskPlane) -> Result<Tensor<T>> {
        let &[c, h, w] = z.shape() else {
            return Err(Error::invalid(format!("value map must be [C, h, w], got {:?}", z.shape())));
        };
        if c != self.config.value_dim || peel.dims() != (h, w) {
            return Err(Error::invalid(format!(
                "decoder input {:?} with peel {:?} does not match value_dim {}",
                z.shape(),
                peel.dims(),
                self.config.value_dim
            )));
        }
        self.decoder_passes.fetch_add(1, Ordering::Relaxed);
        let mut x = Tensor::concat(&[z, &peel.to_tensor::<T>()], 0)?.reshape(&[1, c + 1, h, w])?;
        for layer in &self.decoder {
            if layer.spec.upsample_before {
                x = x.upsample_nearest2x()?;
            }
            x = gated_conv(&x, layer)?;
        }
        let y = x.conv2d(&self.out_weight, Some(&self.out_bias), &self.out_spec.conv)?.sigmoid();
        let (oh, ow) = (y.shape()[2], y.shape()[3]);
        y.reshape(&[3, oh, ow])
    }
}

#[cfg(test)]
mod tests;
