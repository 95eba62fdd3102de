use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, grad_check_many, GradCheckOptions};
use super::*;

fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(data.to_vec(), shape).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), shape).unwrap()
}

/// Direct nested-loop convolution used as the oracle for `conv2d`.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: &ConvSpec) -> (Vec<f64>, usize, usize) {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let k = spec.kernel_size;
    let ho = (h + 2 * spec.padding - spec.dilation * (k - 1) - 1) / spec.stride + 1;
    let wo = (wd + 2 * spec.padding - spec.dilation * (k - 1) - 1) / spec.stride + 1;
    let o = spec.out_channels;
    let mut out = vec![0.0; n * o * ho * wo];
    for bi in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[oc];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

#[test]
fn conv_all_ones_kernel_sums_neighbourhood() {
    let x = t64(&[1., 2., 3., 4., 5., 6., 7., 8., 9.], &[1, 1, 3, 3]);
    let w = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
    let spec = ConvSpec::same(1, 1, 3, 1, 1);
    let y = x.conv2d(&w, None, &spec).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.data()[4], 45.0);
    assert_eq!(y.data()[0], 12.0);
}

#[test]
fn conv_identity_kernel() {
    let x = t64(&[0.5, -1.0, 2.0, 3.5], &[1, 1, 2, 2]);
    let w = t64(&[1.0], &[1, 1, 1, 1]);
    let b = t64(&[0.0], &[1]);
    let y = x.conv2d(&w, Some(&b), &ConvSpec::same(1, 1, 1, 1, 1)).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_output_extent_formula() {
    let spec = ConvSpec { in_channels: 1, out_channels: 1, kernel_size: 3, stride: 2, dilation: 1, padding: 1 };
    let x = Tensor::<f64>::ones(&[1, 1, 4, 4]).unwrap();
    let w = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
    assert_eq!(x.conv2d(&w, None, &spec).unwrap().shape(), &[1, 1, 2, 2]);
    assert_eq!(spec.output_extent(4), Some(2));
}

#[test]
fn conv_rejects_shape_mismatch() {
    let x = Tensor::<f64>::ones(&[1, 2, 4, 4]).unwrap();
    let w = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
    let err = x.conv2d(&w, None, &ConvSpec::same(1, 1, 3, 1, 1)).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    let bad_w = Tensor::<f64>::ones(&[1, 2, 2, 2]).unwrap();
    assert!(x.conv2d(&bad_w, None, &ConvSpec::same(2, 1, 3, 1, 1)).is_err());
}

#[test]
fn conv_matches_nested_loop_oracle_exactly_on_integer_data() {
    // Integer-valued inputs keep every partial sum exact, so summation order
    // cannot matter and the comparison is bit-for-bit.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..40 {
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=4);
        let o = rng.gen_range(1..=3);
        let h = rng.gen_range(3..=9);
        let w = rng.gen_range(3..=9);
        let k = if case % 3 == 0 { 1 } else { 3 };
        let spec = ConvSpec::same(c, o, k, rng.gen_range(1..=2), rng.gen_range(1..=2));
        if spec.output_extent(h).is_none() || spec.output_extent(w).is_none() {
            continue;
        }
        let ints = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-8i32..=8) as f64).collect()
        };
        let x = t64(&ints(&mut rng, n * c * h * w), &[n, c, h, w]);
        let wt = t64(&ints(&mut rng, o * c * k * k), &spec.weight_shape());
        let b = ints(&mut rng, o);
        let y = x.conv2d(&wt, Some(&t64(&b, &[o])), &spec).unwrap();
        let (expect, ho, wo) = conv_oracle(&x, &wt, &b, &spec);
        assert_eq!(y.shape(), &[n, o, ho, wo]);
        assert_eq!(y.data(), &expect[..], "case {case} {spec:?}");
    }
}

#[test]
fn conv_f32_matches_oracle_closely_on_random_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = ConvSpec::same(4, 3, 3, 2, 2);
    let x = random(&mut rng, &[2, 4, 9, 9]);
    let w = random(&mut rng, &spec.weight_shape());
    let b = vec![0.1, -0.2, 0.3];
    let (expect, _, _) = conv_oracle(&x, &w, &b, &spec);
    let y = x
        .cast::<f32>()
        .conv2d(&w.cast(), Some(&t64(&b, &[3]).cast()), &spec)
        .unwrap();
    for (a, e) in y.data().iter().zip(&expect) {
        assert!((*a as f64 - e).abs() < 1e-5);
    }
}

#[test]
fn matmul_examples() {
    let a = t64(&[1., 2.], &[1, 2]);
    let b = t64(&[3., 4.], &[2, 1]);
    assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);

    let eye = t64(&[1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random(&mut rng, &[3, 4]);
    assert_eq!(eye.matmul(&m).unwrap().data(), m.data());

    assert!(a.matmul(&a).is_err());
}

#[test]
fn matmul_transpose_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let lhs = a.matmul(&b).unwrap().transpose().unwrap();
    let rhs = b.transpose().unwrap().matmul(&a.transpose().unwrap()).unwrap();
    assert_eq!(lhs.shape(), rhs.shape());
    for (x, y) in lhs.data().iter().zip(rhs.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn softmax_examples() {
    let s = t64(&[0., 0.], &[2]).softmax(0).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = t64(&[1., 0.], &[2]).softmax(0).unwrap();
    let e = std::f64::consts::E;
    assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((s.data()[0] - 0.73106).abs() < 1e-5);
    assert!((s.data()[1] - 0.26894).abs() < 1e-5);
    assert!(Tensor::scalar(1.0f64).softmax(0).is_err());
}

#[test]
fn softmax_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[5, 7, 3]).mul_scalar(20.0);
    for axis in 0..3 {
        let y = x.softmax(axis).unwrap();
        let sums = y.sum_axis(axis).unwrap();
        assert!(sums.data().iter().all(|s| (s - 1.0).abs() < 1e-6));
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn sigmoid_abs_mean_conventions() {
    let x = t64(&[0.0], &[1]).with_requires_grad(true);
    let y = x.sigmoid();
    assert_eq!(y.data()[0], 0.5);
    y.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap()[0], 0.25);

    let z = t64(&[0.0, 2.0, -3.0], &[3]).with_requires_grad(true);
    z.abs().sum().backward().unwrap();
    assert_eq!(z.grad().unwrap(), vec![0.0, 1.0, -1.0]);

    let ones = Tensor::<f64>::ones(&[17]).unwrap();
    assert_eq!(ones.mean().item().unwrap(), 1.0);
}

#[test]
fn broadcasting_aligns_trailing_dims() {
    let a = t64(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
    let b = t64(&[10., 20., 30.], &[3]);
    assert_eq!(a.add(&b).unwrap().data(), &[11., 22., 33., 14., 25., 36.]);
    let col = t64(&[1., 2.], &[2, 1]);
    assert_eq!(a.mul(&col).unwrap().data(), &[1., 2., 3., 8., 10., 12.]);
    let bad = t64(&[1., 2.], &[2]);
    assert!(matches!(a.add(&bad), Err(Error::InvalidArgument(_))));
}

#[test]
fn broadcast_gradient_reduces_to_operand_shape() {
    let a = t64(&[1., 2., 3., 4., 5., 6.], &[2, 3]).with_requires_grad(true);
    let b = t64(&[1., 2., 3.], &[3]).with_requires_grad(true);
    a.mul(&b).unwrap().sum().backward().unwrap();
    assert_eq!(b.grad().unwrap(), vec![5., 7., 9.]);
    assert_eq!(a.grad().unwrap(), vec![1., 2., 3., 1., 2., 3.]);
}

#[test]
fn upsample_examples() {
    let one = t64(&[1.0], &[1, 1, 1, 1]).upsample_nearest2x().unwrap();
    assert_eq!(one.data(), &[1., 1., 1., 1.]);
    let x = t64(&[1., 2., 3., 4.], &[1, 1, 2, 2]);
    let up = x.upsample_nearest2x().unwrap();
    assert_eq!(up.shape(), &[1, 1, 4, 4]);
    assert_eq!(
        up.data(),
        &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
    );
}

#[test]
fn upsample_downsum_adjointness() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 3, 5]);
    let up = x.upsample_nearest2x().unwrap();
    // 2×2 block sums of the upsampled tensor.
    let down = up.avg_pool2x().unwrap().mul_scalar(4.0);
    for (d, v) in down.data().iter().zip(x.data()) {
        assert!((d - 4.0 * v).abs() < 1e-12);
    }
    let xg = x.with_requires_grad(true);
    xg.upsample_nearest2x().unwrap().sum().backward().unwrap();
    assert!(xg.grad().unwrap().iter().all(|&g| g == 4.0));
}

#[test]
fn backward_closed_forms() {
    let x = t64(&[1.0, -2.0, 3.0], &[3]).with_requires_grad(true);
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);

    let y = t64(&[0.3], &[1]).with_requires_grad(true);
    y.add(&y).unwrap().sum().backward().unwrap();
    assert_eq!(y.grad().unwrap(), vec![2.0]);

    let v = t64(&[1.0, 2.0], &[2]).with_requires_grad(true);
    assert!(matches!(v.mul_scalar(2.0).backward(), Err(Error::InvalidArgument(_))));
}

#[test]
fn grad_absent_for_untracked_or_unused() {
    let a = t64(&[1.0], &[1]).with_requires_grad(true);
    let unused = t64(&[1.0], &[1]).with_requires_grad(true);
    let constant = t64(&[2.0], &[1]);
    a.mul(&constant).unwrap().sum().backward().unwrap();
    assert!(a.grad().is_some());
    assert!(unused.grad().is_none());
    assert!(constant.grad().is_none());
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[1, 2, 6, 6]).with_requires_grad(true);
    let w = random(&mut rng, &[3, 2, 3, 3]).with_requires_grad(true);
    let run = || {
        x.zero_grad();
        w.zero_grad();
        let y = x.conv2d(&w, None, &ConvSpec::same(2, 3, 3, 1, 2)).unwrap();
        y.reshape(&[3, 36]).unwrap().softmax(1).unwrap().square().sum().backward().unwrap();
        (x.grad().unwrap(), w.grad().unwrap())
    };
    let (gx1, gw1) = run();
    let (gx2, gw2) = run();
    assert_eq!(gx1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gx2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(gw1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gw2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[6]);
    let coeffs = random(&mut rng, &[6]);
    let lin = grad_check(|x| Ok(x.mul(&coeffs)?.sum()), &x, 1e-5).unwrap();
    assert!(lin < 1e-10, "linear {lin}");

    let sig = grad_check(|x| Ok(x.sigmoid().sum()), &x, 1e-5).unwrap();
    assert!(sig < 1e-6, "sigmoid {sig}");

    let img = random(&mut rng, &[1, 2, 5, 5]);
    let w = random(&mut rng, &[2, 2, 3, 3]);
    let spec = ConvSpec::same(2, 2, 3, 1, 1);
    let composite = grad_check_many(
        |xs| {
            let y = xs[0].conv2d(&xs[1], None, &spec)?.reshape(&[2, 25])?.softmax(1)?;
            y.mul(&y)?.sum().pipe_ok()
        },
        &[img, w],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(composite.max_relative_error < 1e-4, "{composite:?}");
}

#[test]
fn grad_check_flags_non_finite() {
    let x = t64(&[0.0], &[1]);
    let err = grad_check(|x| Ok(x.div(x)?.sum()), &x, 1e-5).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
}

trait PipeOk: Sized {
    fn pipe_ok(self) -> crate::error::Result<Self> {
        Ok(self)
    }
}
impl<T: Element> PipeOk for Tensor<T> {}

/// Every differentiable op against central differences on 20 seeds.
#[test]
fn every_op_passes_grad_check() {
    type Case = (&'static str, Vec<Vec<usize>>, fn(&[Tensor<f64>]) -> crate::error::Result<Tensor<f64>>);
    let cases: Vec<Case> = vec![
        ("add", vec![vec![3, 4], vec![4]], |x| x[0].add(&x[1])?.square().sum().pipe_ok()),
        ("sub", vec![vec![3, 4], vec![3, 1]], |x| x[0].sub(&x[1])?.square().sum().pipe_ok()),
        ("mul", vec![vec![2, 3, 4], vec![3, 4]], |x| x[0].mul(&x[1])?.sum().pipe_ok()),
        ("div", vec![vec![3, 4], vec![3, 4]], |x| {
            x[0].div(&x[1].square().add_scalar(0.5))?.sum().pipe_ok()
        }),
        ("neg_exp", vec![vec![5]], |x| x[0].neg().exp().sum().pipe_ok()),
        ("sigmoid", vec![vec![6]], |x| x[0].sigmoid().square().sum().pipe_ok()),
        ("tanh", vec![vec![6]], |x| x[0].tanh().square().sum().pipe_ok()),
        ("elu", vec![vec![8]], |x| x[0].elu(1.0).square().sum().pipe_ok()),
        ("leaky_relu", vec![vec![8]], |x| x[0].leaky_relu(0.2).square().sum().pipe_ok()),
        ("abs", vec![vec![8]], |x| x[0].abs().square().sum().pipe_ok()),
        ("scalar_ops", vec![vec![4]], |x| x[0].mul_scalar(3.0).add_scalar(-1.0).square().mean().pipe_ok()),
        ("sum_axis", vec![vec![2, 3, 4]], |x| x[0].sum_axis(1)?.square().sum().pipe_ok()),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |x| x[0].matmul(&x[1])?.square().sum().pipe_ok()),
        ("transpose", vec![vec![3, 4]], |x| x[0].transpose()?.matmul(&x[0])?.sum().pipe_ok()),
        ("softmax", vec![vec![3, 5]], |x| x[0].softmax(1)?.square().sum().pipe_ok()),
        ("softmax_axis0", vec![vec![4, 3]], |x| x[0].softmax(0)?.square().sum().pipe_ok()),
        ("norm_axis", vec![vec![4, 5]], |x| x[0].norm_axis(0)?.square().sum().pipe_ok()),
        ("conv2d", vec![vec![1, 2, 6, 6], vec![3, 2, 3, 3], vec![3]], |x| {
            x[0].conv2d(&x[1], Some(&x[2]), &ConvSpec::same(2, 3, 3, 2, 1))?.square().sum().pipe_ok()
        }),
        ("conv2d_dilated", vec![vec![2, 2, 7, 7], vec![2, 2, 3, 3]], |x| {
            x[0].conv2d(&x[1], None, &ConvSpec::same(2, 2, 3, 1, 2))?.square().sum().pipe_ok()
        }),
        ("upsample", vec![vec![1, 2, 3, 3]], |x| x[0].upsample_nearest2x()?.square().sum().pipe_ok()),
        ("avg_pool", vec![vec![1, 2, 4, 6]], |x| x[0].avg_pool2x()?.square().sum().pipe_ok()),
        ("reshape_concat_narrow", vec![vec![2, 3], vec![2, 2]], |x| {
            let c = Tensor::concat(&[&x[0], &x[1]], 1)?;
            c.narrow(1, 1, 3)?.reshape(&[6])?.square().sum().pipe_ok()
        }),
        ("index_cols", vec![vec![3, 6], vec![3, 2]], |x| {
            let picked = x[0].index_select_cols(&[4, 1, 1])?;
            let added = x[0].index_add_cols(&[5, 0], &x[1])?;
            picked.square().sum().add(&added.square().sum())?.pipe_ok()
        }),
    ];
    for (name, shapes, f) in cases {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let report = grad_check_many(f, &inputs, GradCheckOptions::default()).unwrap();
            assert!(
                report.max_relative_error < 1e-4,
                "{name} seed {seed}: {report:?}"
            );
        }
    }
}

#[test]
fn index_add_rejects_duplicates_and_out_of_range() {
    let base = Tensor::<f64>::zeros(&[2, 4]).unwrap();
    let src = Tensor::<f64>::ones(&[2, 2]).unwrap();
    assert!(base.index_add_cols(&[1, 1], &src).is_err());
    assert!(base.index_add_cols(&[1, 4], &src).is_err());
    assert!(base.index_add_cols(&[1], &src).is_err());
}

#[test]
fn opnt_rejects_bad_magic_and_truncation() {
    let t = t64(&[1.0, 2.0], &[2]);
    let mut bytes = opnt::to_bytes(&t);
    assert_eq!(&bytes[..4], b"OPNT");
    assert_eq!(bytes.len(), opnt::encoded_len(&[2]));
    assert!(opnt::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    bytes[0] = b'X';
    assert!(opnt::from_bytes(&bytes).is_err());
}

proptest! {
    #[test]
    fn opnt_round_trip_is_bit_exact(
        shape in prop::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
    ) {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff)).collect();
        let t = Tensor::from_vec(data, &shape).unwrap();
        let back = opnt::from_bytes(&opnt::to_bytes(&t)).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn softmax_is_shift_invariant(xs in prop::collection::vec(-10.0f64..10.0, 1..12), c in -50.0f64..50.0) {
        let n = xs.len();
        let x = Tensor::from_vec(xs, &[n]).unwrap();
        let a = x.softmax(0).unwrap();
        let b = x.add_scalar(c).softmax(0).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
