//! Finite-difference checks of every differentiable building block, run in
//! f64 on the tiny network. Shared by the `gradcheck` command and the tests.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{asym_atten_block, ReferenceView};
use crate::error::Result;
use crate::mask::{downsample_mask, MaskPlane, PeelWidth, Reduce};
use crate::network::{gated_conv, init_params, Activation, GatedConvLayer, LayerSpec, Network, NetworkConfig};
use crate::tensor::gradcheck::{grad_check_many, GradCheckOptions};
use crate::tensor::{ConvSpec, Tensor};
use crate::training::loss::{loss_perceptual, loss_pixel, loss_tv};
use crate::training::{compute_losses, draw_sample, forward_train, DataSource, EmbedderConfig, LossWeights, PerceptualEmbedder, SynthConfig};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates sampled per input tensor.
    pub coords: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { eps: DEFAULT_EPS, tolerance: DEFAULT_TOLERANCE, coords: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_relative_error: f64,
    pub coords_checked: usize,
    pub seconds: f64,
    pub passed: bool,
}

pub const SUITES: [&str; 10] = [
    "gated_conv",
    "attention_block",
    "decoder",
    "encoder",
    "loss_peel",
    "loss_valid",
    "loss_content",
    "loss_style",
    "loss_tv",
    "training_step",
];

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape).expect("positive extents")
}

fn tiny_params(seed: u64) -> Result<BTreeMap<String, Tensor<f64>>> {
    let ckpt = init_params(&NetworkConfig::tiny(), seed)?;
    Ok(ckpt.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect())
}

/// `f` evaluated with the named tiny-network parameters replaced by `x[..names.len()]`.
fn with_params<'a>(
    base: &'a BTreeMap<String, Tensor<f64>>,
    names: &'a [&'a str],
    x: &[Tensor<f64>],
) -> Result<Network<f64>> {
    let mut params = base.clone();
    for (n, t) in names.iter().zip(x) {
        params.insert((*n).to_string(), t.clone());
    }
    Network::from_parameters(&NetworkConfig::tiny(), &params)
}

fn hole(size: usize) -> MaskPlane {
    MaskPlane::from_fn(size, size, |y, x| (size / 4..3 * size / 4).contains(&y) && (size / 4 + 1..3 * size / 4).contains(&x))
}

type Objective<'a> = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'a>;

/// Run one named suite.
pub fn run_suite(name: &str, opts: &SuiteOptions) -> Result<SuiteResult> {
    let name: &'static str = SUITES
        .iter()
        .find(|s| **s == name)
        .ok_or_else(|| crate::Error::invalid(format!("unknown gradient suite {name:?}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let start = Instant::now();
    let size = 16;
    let base = tiny_params(opts.seed)?;
    let h = hole(size);
    let v = h.complement();
    let peel_feat = downsample_mask(&h, 4, Reduce::Any);
    let sample = draw_sample(&DataSource::default(), &SynthConfig::new(size), &mut rng)?;
    let embedder = PerceptualEmbedder::new(&EmbedderConfig { widths: [4, 6, 8], seed: opts.seed });
    let y = sample.ground_truth().to_tensor::<f64>();

    let (inputs, f): (Vec<Tensor<f64>>, Objective) = match name {
        "gated_conv" => {
            let spec = ConvSpec::same(3, 4, 3, 1, 2);
            let ws = spec.weight_shape();
            let probe = random(&[1, 4, 7, 7], &mut rng, -1.0, 1.0);
            let inputs = vec![
                random(&[1, 3, 7, 7], &mut rng, -1.0, 1.0),
                random(&ws, &mut rng, -0.5, 0.5),
                random(&[4], &mut rng, -0.2, 0.2),
                random(&ws, &mut rng, -0.5, 0.5),
                random(&[4], &mut rng, -0.2, 0.2),
            ];
            let f = move |x: &[Tensor<f64>]| {
                let layer = GatedConvLayer {
                    spec: LayerSpec { name: "probe".into(), conv: spec, activation: Activation::Elu, upsample_before: false, gated: true },
                    feat_weight: x[1].clone(),
                    feat_bias: x[2].clone(),
                    gate_weight: x[3].clone(),
                    gate_bias: x[4].clone(),
                };
                Ok(gated_conv(&x[0], &layer)?.mul(&probe)?.sum())
            };
            (inputs, Box::new(f))
        }
        "attention_block" => {
            let (ck, cv, s) = (4, 5, 4);
            let peel = MaskPlane::from_fn(s, s, |y, x| y == 1 && x > 0 || (y, x) == (2, 2));
            let v1 = MaskPlane::from_fn(s, s, |y, x| (y + x) % 3 != 0);
            let v2 = MaskPlane::from_fn(s, s, |y, _| y != 2);
            let probe = random(&[cv, s, s], &mut rng, -1.0, 1.0);
            let inputs = vec![
                random(&[ck, s, s], &mut rng, -1.0, 1.0),
                random(&[cv, s, s], &mut rng, -1.0, 1.0),
                random(&[ck, s, s], &mut rng, -1.0, 1.0),
                random(&[cv, s, s], &mut rng, -1.0, 1.0),
                random(&[ck, s, s], &mut rng, -1.0, 1.0),
                random(&[cv, s, s], &mut rng, -1.0, 1.0),
            ];
            let f = move |x: &[Tensor<f64>]| {
                let refs = [
                    ReferenceView { frame: 1, key: &x[2], value: &x[3], validity: &v1 },
                    ReferenceView { frame: 2, key: &x[4], value: &x[5], validity: &v2 },
                ];
                Ok(asym_atten_block(0, &x[0], &x[1], &peel, &refs, 1.0)?.z.mul(&probe)?.sum())
            };
            (inputs, Box::new(f))
        }
        "decoder" => {
            const NAMES: [&str; 4] = ["dec.0.feat.weight", "dec.1.gate.weight", "dec.3.feat.bias", "dec.out.weight"];
            let mut inputs: Vec<_> = NAMES.iter().map(|n| base[*n].clone()).collect();
            inputs.push(random(&[4, size / 4, size / 4], &mut rng, -1.0, 1.0));
            let probe = random(&[3, size, size], &mut rng, -1.0, 1.0);
            let f = move |x: &[Tensor<f64>]| {
                let net = with_params(&base, &NAMES, x)?;
                Ok(net.decode(&x[NAMES.len()], &peel_feat)?.mul(&probe)?.sum())
            };
            (inputs, Box::new(f))
        }
        "encoder" => {
            const NAMES: [&str; 4] = ["enc.0.feat.weight", "enc.2.gate.weight", "enc.key.feat.bias", "enc.value.gate.weight"];
            let mut inputs: Vec<_> = NAMES.iter().map(|n| base[*n].clone()).collect();
            inputs.push(random(&[3, size, size], &mut rng, 0.05, 0.95));
            let kp = random(&[4, size / 4, size / 4], &mut rng, -1.0, 1.0);
            let vp = random(&[4, size / 4, size / 4], &mut rng, -1.0, 1.0);
            let f = move |x: &[Tensor<f64>]| {
                let net = with_params(&base, &NAMES, x)?;
                let e = net.encode(&x[NAMES.len()], &h, &v)?;
                e.key.mul(&kp)?.sum().add(&e.value.mul(&vp)?.sum())
            };
            (inputs, Box::new(f))
        }
        "loss_peel" | "loss_valid" => {
            let peels = [h.clone(), MaskPlane::from_fn(size, size, |yy, xx| yy == size / 2 && xx > 2)];
            let inputs = vec![random(&[3, size, size], &mut rng, 0.0, 1.0), random(&[3, size, size], &mut rng, 0.0, 1.0)];
            let peel_term = name == "loss_peel";
            let f = move |x: &[Tensor<f64>]| {
                let (lp, lv) = loss_pixel(x, &peels, &v, &y)?;
                Ok(if peel_term { lp } else { lv })
            };
            (inputs, Box::new(f))
        }
        "loss_content" | "loss_style" => {
            let inputs = vec![random(&[3, size, size], &mut rng, 0.0, 1.0), random(&[3, size, size], &mut rng, 0.0, 1.0)];
            let content = name == "loss_content";
            let f = move |x: &[Tensor<f64>]| {
                let (c, s) = loss_perceptual(x, &y, &embedder)?;
                Ok(if content { c } else { s })
            };
            (inputs, Box::new(f))
        }
        "loss_tv" => {
            let inputs = vec![random(&[3, size, size], &mut rng, 0.0, 1.0), random(&[3, size, size], &mut rng, 0.0, 1.0)];
            (inputs, Box::new(|x: &[Tensor<f64>]| loss_tv(x)))
        }
        "training_step" => {
            const NAMES: [&str; 5] = ["enc.0.gate.weight", "enc.key.feat.weight", "enc.value.feat.bias", "dec.0.gate.weight", "dec.out.weight"];
            let inputs: Vec<_> = NAMES.iter().map(|n| base[*n].clone()).collect();
            let weights = LossWeights::default();
            let f = move |x: &[Tensor<f64>]| {
                let net = with_params(&base, &NAMES, x)?;
                let fwd = forward_train(&sample, &net, PeelWidth::new(2)?, 2)?;
                compute_losses(&fwd, &sample, &embedder)?.total(&weights)
            };
            (inputs, Box::new(f))
        }
        _ => unreachable!("name validated above"),
    };

    let gc = GradCheckOptions { eps: opts.eps, max_coords_per_input: Some(opts.coords), seed: opts.seed };
    let report = grad_check_many(f, &inputs, gc)?;
    Ok(SuiteResult {
        name,
        max_relative_error: report.max_relative_error,
        coords_checked: report.coords_checked,
        seconds: start.elapsed().as_secs_f64(),
        passed: report.max_relative_error < opts.tolerance,
    })
}

pub fn run_all(opts: &SuiteOptions) -> Result<Vec<SuiteResult>> {
    SUITES.iter().map(|s| run_suite(s, opts)).collect()
}
