use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{grad_check_many, GradCheckOptions};
use crate::tensor::opnt;

fn random<T: Element>(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| T::lit(rng.gen_range(lo..hi))).collect(), shape).unwrap()
}

fn layer(spec: ConvSpec, act: Activation, feat_w: Tensor, gate_w: Tensor, gate_b: f32) -> GatedConvLayer {
    let o = spec.out_channels;
    GatedConvLayer {
        spec: LayerSpec { name: "t".into(), conv: spec, activation: act, upsample_before: false, gated: true },
        feat_weight: feat_w,
        feat_bias: Tensor::zeros(&[o]).unwrap(),
        gate_weight: gate_w,
        gate_bias: Tensor::full(&[o], gate_b).unwrap(),
    }
}

fn desk_net() -> Network {
    let cfg = NetworkConfig::desk();
    Network::from_checkpoint(&init_params(&cfg, 7).unwrap(), &cfg, false, true).unwrap()
}

#[test]
fn closed_gate_suppresses_output() {
    let spec = ConvSpec::same(3, 4, 3, 1, 1);
    let l = layer(spec, Activation::Elu, random(&spec.weight_shape(), 1, -1.0, 1.0), Tensor::zeros(&spec.weight_shape()).unwrap(), -20.0);
    let y = gated_conv(&random(&[1, 3, 8, 8], 2, 0.0, 1.0), &l).unwrap();
    assert!(y.data().iter().all(|v| v.abs() < 1e-7));
}

#[test]
fn open_gate_with_identity_kernel_passes_input() {
    let spec = ConvSpec::same(3, 3, 1, 1, 1);
    let mut w = vec![0.0f32; 9];
    for c in 0..3 {
        w[c * 3 + c] = 1.0;
    }
    let l = layer(spec, Activation::Identity, Tensor::from_vec(w, &[3, 3, 1, 1]).unwrap(), Tensor::zeros(&[3, 3, 1, 1]).unwrap(), 20.0);
    let x = random(&[1, 3, 5, 6], 3, -1.0, 1.0);
    let y = gated_conv(&x, &l).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn zero_parameters_give_zero_output() {
    let spec = ConvSpec::same(2, 5, 3, 2, 1);
    let mut l = layer(spec, Activation::Elu, Tensor::zeros(&spec.weight_shape()).unwrap(), Tensor::zeros(&spec.weight_shape()).unwrap(), 0.0);
    l.gate_bias = Tensor::zeros(&[5]).unwrap();
    let y = gated_conv(&random(&[1, 2, 7, 7], 4, -1.0, 1.0), &l).unwrap();
    assert_eq!(y.shape(), &[1, 5, 4, 4]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gated_conv_rejects_channel_mismatch() {
    let spec = ConvSpec::same(3, 4, 3, 1, 1);
    let l = layer(spec, Activation::Elu, Tensor::zeros(&spec.weight_shape()).unwrap(), Tensor::zeros(&spec.weight_shape()).unwrap(), 1.0);
    assert!(gated_conv(&Tensor::zeros(&[1, 2, 4, 4]).unwrap(), &l).is_err());
}

#[test]
fn assemble_input_without_hole() {
    let frame = random::<f32>(&[3, 4, 5], 5, 0.0, 1.0);
    let x = assemble_input(&frame, &MaskPlane::empty(4, 5), &MaskPlane::full(4, 5), true).unwrap();
    assert_eq!(x.shape(), &[5, 4, 5]);
    assert_eq!(&x.data()[..60], frame.data());
    assert!(x.data()[60..80].iter().all(|&v| v == 0.0));
    assert!(x.data()[80..].iter().all(|&v| v == 1.0));
}

#[test]
fn assemble_input_greys_hole_pixels() {
    let frame = random::<f32>(&[3, 3, 3], 6, 0.0, 1.0);
    let hole = MaskPlane::from_fn(3, 3, |y, x| y == 1 && x == 2);
    let x = assemble_input(&frame, &hole, &hole.complement(), true).unwrap();
    for c in 0..3 {
        for i in 0..9 {
            let v = x.data()[c * 9 + i];
            if i == 5 {
                assert_eq!(v, 0.5);
            } else {
                assert_eq!(v, frame.data()[c * 9 + i]);
            }
        }
    }
    assert_eq!(x.data()[27 + 5], 1.0);
    assert_eq!(x.data()[36 + 5], 0.0);
}

/// Channel order R, G, B, H, V, checked against hand-assembled bytes.
#[test]
fn assemble_input_golden_bytes() {
    let frame = Tensor::from_vec(vec![0.25f32, 0.75, 1.0, 0.0, 0.125, 0.5], &[3, 1, 2]).unwrap();
    let hole = MaskPlane::from_bits(1, 2, vec![false, true]).unwrap();
    let x = assemble_input(&frame, &hole, &hole.complement(), true).unwrap();

    let mut golden = b"OPNT".to_vec();
    for v in [3u32, 5, 1, 2] {
        golden.extend_from_slice(&v.to_le_bytes());
    }
    // R G B (hole pixel → 0.5), then H, then V.
    for v in [0.25f32, 0.5, 1.0, 0.5, 0.125, 0.5, 0.0, 1.0, 1.0, 0.0] {
        golden.extend_from_slice(&v.to_le_bytes());
    }
    assert_eq!(opnt::to_bytes(&x), golden);
}

#[test]
fn assemble_input_range_and_shape_errors() {
    let frame = Tensor::from_vec(vec![1.5f32; 12], &[3, 2, 2]).unwrap();
    let (h, v) = (MaskPlane::empty(2, 2), MaskPlane::full(2, 2));
    assert!(matches!(assemble_input(&frame, &h, &v, true), Err(Error::InvalidArgument(_))));
    assert!(assemble_input(&frame, &h, &v, false).is_ok());
    assert!(assemble_input(&frame, &MaskPlane::empty(2, 3), &v, false).is_err());
    assert!(assemble_input(&Tensor::<f32>::zeros(&[2, 2, 2]).unwrap(), &h, &v, false).is_err());
}

#[test]
fn encode_reaches_quarter_scale() {
    let net = desk_net();
    let frame = random::<f32>(&[3, 256, 256], 8, 0.0, 1.0);
    let hole = MaskPlane::from_fn(256, 256, |y, x| (100..150).contains(&y) && (90..170).contains(&x));
    let e = net.encode(&frame, &hole, &hole.complement()).unwrap();
    assert_eq!(e.key.shape(), &[8, 64, 64]);
    assert_eq!(e.value.shape(), &[16, 64, 64]);
    assert_eq!(net.encoder_passes(), 1);

    let z = e.value.clone();
    let peel = crate::mask::downsample_mask(&hole, 4, crate::mask::Reduce::Any);
    let out = net.decode(&z, &peel).unwrap();
    assert_eq!(out.shape(), &[3, 256, 256]);
}

#[test]
fn encode_is_deterministic() {
    let net = desk_net();
    let frame = random::<f32>(&[3, 32, 24], 9, 0.0, 1.0);
    let hole = MaskPlane::from_fn(32, 24, |y, x| (y + x) % 7 == 0);
    let a = net.encode(&frame, &hole, &hole.complement()).unwrap();
    let b = net.encode(&frame, &hole, &hole.complement()).unwrap();
    assert_eq!(a.key.digest(), b.key.digest());
    assert_eq!(a.value.digest(), b.value.digest());
}

#[test]
fn encode_rejects_unpadded_extent() {
    let net = desk_net();
    let frame = random::<f32>(&[3, 30, 24], 9, 0.0, 1.0);
    assert!(net.encode(&frame, &MaskPlane::empty(30, 24), &MaskPlane::full(30, 24)).is_err());
}

#[test]
fn embedding_widths_follow_config() {
    let cfg = NetworkConfig { key_dim: 5, value_dim: 11, ..NetworkConfig::tiny() };
    let net: Network = Network::from_checkpoint(&init_params(&cfg, 0).unwrap(), &cfg, false, true).unwrap();
    let e = net.encode(&random(&[3, 16, 20], 1, 0.0, 1.0), &MaskPlane::empty(16, 20), &MaskPlane::full(16, 20)).unwrap();
    assert_eq!(e.key.shape(), &[5, 4, 5]);
    assert_eq!(e.value.shape(), &[11, 4, 5]);
}

#[test]
fn decode_output_stays_in_unit_range() {
    for seed in 0..5 {
        let cfg = NetworkConfig::tiny();
        let net: Network = Network::from_checkpoint(&init_params(&cfg, seed).unwrap(), &cfg, false, true).unwrap();
        let z = random::<f32>(&[4, 6, 5], seed + 100, -50.0, 50.0);
        let peel = MaskPlane::from_fn(6, 5, |y, _| y < 3);
        let out = net.decode(&z, &peel).unwrap();
        assert_eq!(out.shape(), &[3, 24, 20]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn decode_rejects_wrong_extents() {
    let net = desk_net();
    assert!(net.decode(&Tensor::zeros(&[16, 4, 4]).unwrap(), &MaskPlane::empty(4, 5)).is_err());
    assert!(net.decode(&Tensor::zeros(&[15, 4, 4]).unwrap(), &MaskPlane::empty(4, 4)).is_err());
}

#[test]
fn reconstruction_gradient_reaches_encoder() {
    let cfg = NetworkConfig::tiny();
    let net: Network = Network::from_checkpoint(&init_params(&cfg, 3).unwrap(), &cfg, true, true).unwrap();
    let hole = MaskPlane::from_fn(16, 16, |y, x| (4..10).contains(&y) && (5..12).contains(&x));
    let e = net.encode(&random(&[3, 16, 16], 4, 0.0, 1.0), &hole, &hole.complement()).unwrap();
    let peel = crate::mask::downsample_mask(&hole, 4, crate::mask::Reduce::Any);
    let out = net.decode(&e.value, &peel).unwrap();
    out.sub(&random(&[3, 16, 16], 5, 0.0, 1.0)).unwrap().square().mean().backward().unwrap();
    for (name, p) in net.parameters() {
        if name.starts_with("enc.") && !name.starts_with("enc.key") {
            let g = p.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.iter().any(|&v| v != 0.0), "{name} gradient is all zero");
        }
    }
}

#[test]
fn init_is_deterministic_under_seed() {
    let cfg = NetworkConfig::desk();
    assert_eq!(init_params(&cfg, 11).unwrap().digest(), init_params(&cfg, 11).unwrap().digest());
    assert_ne!(init_params(&cfg, 11).unwrap().digest(), init_params(&cfg, 12).unwrap().digest());
}

/// Gated layer (i → o, 3×3): feature + gate, each 9·i·o weights and o biases.
#[test]
fn desk_parameter_count_matches_layer_table() {
    let gated = |i: usize, o: usize| 2 * (9 * i * o + o);
    let expected = gated(5, 16)
        + gated(16, 32)
        + gated(32, 32)
        + gated(32, 64)
        + 3 * gated(64, 64)
        + gated(64, 8)
        + gated(64, 16)
        + gated(17, 64)
        + gated(64, 64)
        + gated(64, 32)
        + gated(32, 32)
        + gated(32, 16)
        + (9 * 16 * 3 + 3);
    assert_eq!(expected, 474_179);
    let cfg = NetworkConfig::desk();
    assert_eq!(cfg.parameter_count(), expected);
    assert_eq!(init_params(&cfg, 0).unwrap().parameter_count(), expected);
}

#[test]
fn gate_biases_start_at_one() {
    let ckpt = init_params(&NetworkConfig::desk(), 0).unwrap();
    let mut seen = 0;
    for (name, t) in &ckpt.params {
        if name.ends_with(".gate.bias") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            seen += 1;
        } else if name.ends_with("bias") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        } else {
            let fan_in: usize = t.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f32).sqrt();
            assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
        }
    }
    assert_eq!(seen, 14);
}

#[test]
fn stride_product_and_mirror() {
    for cfg in [NetworkConfig::paper(), NetworkConfig::desk(), NetworkConfig::tiny()] {
        let down: usize = cfg.encoder_layers().iter().map(|l| l.conv.stride).product();
        let up = 1usize << cfg.decoder_layers().iter().filter(|l| l.upsample_before).count();
        assert_eq!((down, up), (4, 4));
    }
}

/// Finite differences through encoder and decoder of the smallest network.
#[test]
fn tiny_network_end_to_end_grad_check() {
    let cfg = NetworkConfig::tiny();
    let ckpt = init_params(&cfg, 21).unwrap();
    let base: BTreeMap<String, Tensor<f64>> = ckpt.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    let checked = ["enc.0.feat.weight", "enc.5.gate.weight", "enc.key.feat.bias", "enc.value.gate.weight", "dec.2.feat.weight", "dec.out.weight"];
    let hole = MaskPlane::from_fn(16, 16, |y, x| (3..11).contains(&y) && (6..13).contains(&x));
    let peel = crate::mask::downsample_mask(&hole, 4, crate::mask::Reduce::Any);
    let target = random::<f64>(&[3, 16, 16], 30, 0.0, 1.0);
    let key_probe = random::<f64>(&[4, 4, 4], 31, -1.0, 1.0);

    let mut inputs: Vec<Tensor<f64>> = checked.iter().map(|n| base[*n].clone()).collect();
    inputs.push(random(&[3, 16, 16], 32, 0.1, 0.9));
    let f = |x: &[Tensor<f64>]| {
        let mut params = base.clone();
        for (n, t) in checked.iter().zip(x) {
            params.insert(n.to_string(), t.clone());
        }
        let net = Network::from_parameters(&cfg, &params)?;
        let e = net.encode(&x[checked.len()], &hole, &hole.complement())?;
        let out = net.decode(&e.value, &peel)?;
        out.sub(&target)?.square().sum().add(&e.key.mul(&key_probe)?.sum())
    };
    // The loss sums hundreds of squared residuals, so f64 roundoff in the
    // difference quotient swamps the smallest gradients below ε ≈ 1e-5.
    for seed in 0..4 {
        let opts = GradCheckOptions { eps: 1e-4, max_coords_per_input: Some(12), seed };
        let report = grad_check_many(&f, &inputs, opts).unwrap();
        assert!(report.max_relative_error < 1e-3, "{report:?}");
    }
}

#[test]
fn checkpoint_roundtrip_strict() {
    let cfg = NetworkConfig::tiny();
    let mut ckpt = init_params(&cfg, 4).unwrap();
    ckpt.step = 123;
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path(), &cfg).unwrap();
    let (back, back_cfg) = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back_cfg, cfg);
    assert_eq!(back.step, 123);
    assert_eq!(back.digest(), ckpt.digest());
    let net: Network = Network::from_checkpoint(&back, &back_cfg, false, true).unwrap();
    assert_eq!(net.to_checkpoint(123).digest(), ckpt.digest());
}

#[test]
fn strict_loading_rejects_mismatches() {
    let cfg = NetworkConfig::tiny();
    let good = init_params(&cfg, 0).unwrap();

    let mut extra = good.clone();
    extra.params.insert("stray".into(), Tensor::zeros(&[1]).unwrap());
    assert!(Network::<f32>::from_checkpoint(&extra, &cfg, false, true).is_err());
    assert!(Network::<f32>::from_checkpoint(&extra, &cfg, false, false).is_ok());

    let mut missing = good.clone();
    missing.params.remove("dec.out.bias");
    assert!(Network::<f32>::from_checkpoint(&missing, &cfg, false, false).is_err());

    let mut misshaped = good.clone();
    misshaped.params.insert("dec.out.bias".into(), Tensor::zeros(&[4]).unwrap());
    assert!(Network::<f32>::from_checkpoint(&misshaped, &cfg, false, false).is_err());

    let other = NetworkConfig { init_seed: 9, ..cfg.clone() };
    assert!(Network::<f32>::from_checkpoint(&good, &other, false, true).is_err());
    assert!(Network::<f32>::from_checkpoint(&good, &other, false, false).is_ok());
}

#[test]
fn corrupt_checkpoint_files_are_format_errors() {
    let cfg = NetworkConfig::tiny();
    let dir = tempfile::tempdir().unwrap();
    init_params(&cfg, 0).unwrap().save(dir.path(), &cfg).unwrap();
    let params = dir.path().join(PARAMS_FILE);
    let bytes = std::fs::read(&params).unwrap();
    std::fs::write(&params, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format { .. })));
}
