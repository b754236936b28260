use agln::error::Error;
use agln::tensor::{grad_check, grad_check_with, ConvSpec, GradCheckOptions, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn tight() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-5,
        tol: 1e-6,
        ..Default::default()
    }
}

#[test]
fn matmul_examples() {
    let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(eye.matmul(&m).unwrap(), m);
    let x = t(&[2, 2], &[1.0, 3.0, 2.0, 6.0]);
    assert_eq!(x.matmul(&t(&[2, 1], &[0.5, 0.5])).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(x.matmul(&t(&[2, 1], &[0.25, 0.75])).unwrap().data(), &[2.5, 5.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    let err = Tensor::<f64>::zeros(&[4, 1]).matmul(&Tensor::zeros(&[2, 2])).unwrap_err().to_string();
    assert!(err.contains("[4, 1]") && err.contains("[2, 2]"), "{err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(t(&[2], &[0.0, 0.0]));
    let s = tape.softmax(z, 0).unwrap();
    assert_eq!(tape.value(s), &[0.5, 0.5]);
    let big = tape.constant(t(&[3], &[1000.0, 1000.0, 1000.0]));
    let s = tape.softmax(big, 0).unwrap();
    close(tape.value(s), &[1.0 / 3.0; 3], 1e-15);
    let x = tape.constant(t(&[2], &[1.0, 2.0]));
    let s = tape.softmax(x, 0).unwrap();
    close(tape.value(s), &[0.268_941_421_369_995_1, 0.731_058_578_630_004_9], 1e-12);
    assert!(matches!(tape.softmax(x, 1), Err(Error::Index(_))));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[0.0, -3.0, 3.0]));
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s)[0], 0.5);
    let r = tape.relu(x);
    assert_eq!(tape.value(r), &[0.0, 0.0, 3.0]);
    let one = tape.constant(t(&[1], &[1.0]));
    let s1 = tape.sigmoid(one);
    assert!((tape.value(s1)[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
    let y = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.add(x, y), Err(Error::Dimension { .. })));
    assert!(matches!(tape.mul(x, y), Err(Error::Dimension { .. })));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&random(&[2, 3], 1, -1.0, 1.0).with_grad());
    let l = tape.sum(x);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    assert_eq!(tape.backward(l).unwrap().get(x).unwrap(), &[2.0, 4.0]);

    // d/dz of −log softmax(z)[0] at z = (2, 0) is softmax(z) − e₀.
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(&t(&[1, 2, 1, 1], &[2.0, 0.0]).with_grad());
    let l = tape.cross_entropy(z, &[0], None).unwrap();
    let p0 = 2f64.exp() / (2f64.exp() + 1.0);
    close(tape.backward(l).unwrap().get(z).unwrap(), &[p0 - 1.0, 1.0 - p0], 1e-15);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::zeros(&[2]).with_grad());
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn backward_into_accumulates() {
    use agln::nn::{ParamKind, ParamStore};
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", t(&[2], &[1.0, 2.0]), ParamKind::Trainable).unwrap();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let l = tape.sum(x);
        tape.backward_into(l, &mut store).unwrap();
    }
    assert_eq!(store.tensor(id).grad().unwrap(), &[2.0, 2.0]);
}

#[test]
fn grad_check_examples() {
    let m = random(&[3, 4], 2, -1.0, 1.0);
    let r = grad_check(
        |tape, x| {
            let w = tape.constant(m.clone());
            tape.matmul(x, w)
        },
        &random(&[2, 3], 3, -1.0, 1.0),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(r.pass && r.max_rel_err < 1e-6, "{r:?}");

    // Exact arithmetic (zero point, power-of-two step) leaves no roundoff.
    let r = grad_check(|_, x| Ok(x), &Tensor::zeros(&[5]), 2f64.powi(-16), 1e-6).unwrap();
    assert_eq!(r.max_rel_err, 0.0);
    assert!(r.pass);
    let r = grad_check(|_, x| Ok(x), &random(&[5], 4, -1.0, 1.0), 1e-5, 1e-6).unwrap();
    assert!(r.pass && r.max_rel_err < 1e-10, "{r:?}");
}

#[test]
fn grad_check_reports_corrupted_gradient() {
    let opts = GradCheckOptions {
        corrupt: true,
        ..tight()
    };
    let r = grad_check_with(|tape, v| Ok(tape.sigmoid(v[0])), &[random(&[4], 5, -1.0, 1.0)], &opts).unwrap();
    assert!(!r.pass);
    assert_eq!(r.worst.as_ref().unwrap().0, "input0");
}

#[test]
fn grad_check_names_non_finite_primitive() {
    let err = grad_check(|tape, x| Ok(tape.scale(x, f64::INFINITY)), &t(&[1], &[1.0]), 1e-5, 1e-6).unwrap_err();
    assert!(matches!(&err, Error::Numerical(m) if m.contains("scale")), "{err}");
    assert!(grad_check(|_, x| Ok(x), &t(&[1], &[1.0]), 0.0, 1e-6).is_err());
}

#[test]
fn conv_examples() {
    let x = random(&[1, 2, 4, 5], 6, -1.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let eye = tape.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
    let zero = tape.constant(Tensor::zeros(&[2]));
    let y = tape.conv2d(xv, eye, Some(zero), ConvSpec::POINTWISE).unwrap();
    assert_eq!(tape.value(y), x.data());

    let single = random(&[1, 1, 5, 4], 7, -1.0, 1.0);
    let sv = tape.constant(single.clone());
    let mut delta = vec![0.0; 9];
    delta[4] = 1.0;
    let dk = tape.constant(t(&[1, 1, 3, 3], &delta));
    let y = tape.conv2d(sv, dk, None, ConvSpec::SAME).unwrap();
    assert_eq!(tape.value(y), single.data());

    let ones = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(ones, k, None, ConvSpec::SAME).unwrap();
    assert_eq!(tape.value(y), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);

    let bad = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(tape.conv2d(bad, k, None, ConvSpec::SAME), Err(Error::Dimension { .. })));
}

/// Direct-loop cross-correlation used as an oracle for the im2col path.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize, depthwise: bool) -> Vec<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for bi in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = b.map_or(0.0, |b| b[o]);
                    let chans: Vec<usize> = if depthwise { vec![o] } else { (0..ci).collect() };
                    for (wc, &c) in chans.iter().enumerate() {
                        for u in 0..k {
                            for v in 0..k {
                                let (yy, xx) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let wc = if depthwise { 0 } else { wc };
                                s += x.at(&[bi, c, yy as usize, xx as usize]) * w.at(&[o, wc, u, v]);
                            }
                        }
                    }
                    out[((bi * co + o) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    let cases = [
        (ConvSpec::SAME, [2, 3, 5, 6], [4, 3, 3, 3]),
        (ConvSpec { stride: 2, ..ConvSpec::SAME }, [2, 3, 7, 6], [2, 3, 3, 3]),
        (ConvSpec::POINTWISE, [1, 3, 4, 4], [5, 3, 1, 1]),
        (ConvSpec { stride: 1, pad: 1, depthwise: true }, [2, 3, 5, 4], [3, 1, 3, 3]),
        (ConvSpec { stride: 2, pad: 1, depthwise: true }, [1, 4, 6, 6], [4, 1, 3, 3]),
    ];
    for (seed, (spec, xs, ws)) in cases.into_iter().enumerate() {
        let x = random(&xs, 10 + seed as u64, -1.0, 1.0);
        let w = random(&ws, 20 + seed as u64, -1.0, 1.0);
        let b = random(&[ws[0]], 30 + seed as u64, -1.0, 1.0);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), spec).unwrap();
        close(tape.value(y), &naive_conv(&x, &w, Some(b.data()), spec.stride, spec.pad, spec.depthwise), 1e-12);
    }
}

#[test]
fn conv_gradients() {
    for (seed, spec, xs, ws) in [
        (0, ConvSpec::SAME, [2, 2, 4, 3], [3, 2, 3, 3]),
        (1, ConvSpec { stride: 2, ..ConvSpec::SAME }, [1, 2, 5, 4], [2, 2, 3, 3]),
        (2, ConvSpec::POINTWISE, [2, 3, 2, 2], [2, 3, 1, 1]),
        (3, ConvSpec { stride: 1, pad: 1, depthwise: true }, [2, 3, 3, 4], [3, 1, 3, 3]),
    ] {
        let inputs = [
            random(&xs, 40 + seed, -1.0, 1.0),
            random(&ws, 50 + seed, -1.0, 1.0),
            random(&[ws[0]], 60 + seed, -1.0, 1.0),
        ];
        let r = grad_check_with(|tape, v| tape.conv2d(v[0], v[1], Some(v[2]), spec), &inputs, &tight()).unwrap();
        assert!(r.pass, "{spec:?}: {r:?}");
    }
}

#[test]
fn batch_norm_examples() {
    let x = random(&[2, 3, 2, 2], 8, -2.0, 2.0);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.batch_norm_eval(xv, g, b, &[0.0; 3], &[1.0; 3], 1e-5).unwrap();
    close(tape.value(y), x.data(), 1e-5);

    let c = tape.constant(Tensor::full(&[2, 1, 2, 2], 3.5));
    let g1 = tape.constant(t(&[1], &[2.0]));
    let b1 = tape.constant(t(&[1], &[0.25]));
    let (y, mean, var) = tape.batch_norm_train(c, g1, b1, 1e-5).unwrap();
    assert_eq!(tape.value(y), &[0.25; 8]);
    assert_eq!((mean[0], var[0]), (3.5, 0.0));

    let pair = tape.constant(t(&[1, 1, 1, 2], &[-1.0, 1.0]));
    let one = tape.constant(t(&[1], &[1.0]));
    let zero = tape.constant(t(&[1], &[0.0]));
    let (y, _, var) = tape.batch_norm_train(pair, one, zero, 1e-5).unwrap();
    assert_eq!(var[0], 1.0);
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    close(tape.value(y), &[-expect, expect], 1e-15);

    assert!(tape.batch_norm_train(xv, one, zero, 1e-5).is_err());
}

#[test]
fn batch_norm_gradients() {
    let inputs = [
        random(&[2, 3, 2, 3], 70, -1.0, 1.0),
        random(&[3], 71, 0.5, 1.5),
        random(&[3], 72, -0.5, 0.5),
    ];
    let r = grad_check_with(
        |tape, v| Ok(tape.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
        &inputs,
        &tight(),
    )
    .unwrap();
    assert!(r.pass, "{r:?}");
    let r = grad_check_with(
        |tape, v| tape.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5),
        &inputs,
        &tight(),
    )
    .unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn resize_examples() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full(&[2, 3, 5], 0.7));
    for (h, w) in [(1, 1), (7, 2), (12, 20)] {
        let y = tape.resize(c, h, w).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.7));
    }
    let x = random(&[2, 3, 4], 9, -1.0, 1.0);
    let xv = tape.constant(x.clone());
    let y = tape.resize(xv, 3, 4).unwrap();
    assert_eq!(tape.value(y), x.data());

    let small = tape.constant(t(&[1, 2, 2], &[0.0, 2.0, 4.0, 6.0]));
    let up = tape.resize(small, 4, 4).unwrap();
    #[rustfmt::skip]
    let expect = [
        0.0, 0.5, 1.5, 2.0,
        1.0, 1.5, 2.5, 3.0,
        3.0, 3.5, 4.5, 5.0,
        4.0, 4.5, 5.5, 6.0,
    ];
    assert_eq!(tape.value(up), &expect);
    assert!(tape.resize(small, 0, 3).is_err());
}

#[test]
fn resize_gradients() {
    for (seed, (ih, iw, oh, ow)) in [(2, 2, 4, 4), (5, 3, 2, 7), (4, 4, 1, 1), (3, 5, 3, 5)].into_iter().enumerate() {
        let x = random(&[1, 2, ih, iw], 80 + seed as u64, -1.0, 1.0);
        let r = grad_check(|tape, x| tape.resize(x, oh, ow), &x, 1e-5, 1e-6).unwrap();
        assert!(r.pass, "{ih}x{iw}->{oh}x{ow}: {r:?}");
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let l = tape.cross_entropy(z, &[0, 1, 1, 0], None).unwrap();
    assert!((tape.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);

    let z = tape.leaf(&random(&[1, 3, 1, 2], 11, -1.0, 1.0).with_grad());
    let l = tape.cross_entropy(z, &[255, 255], Some(255)).unwrap();
    assert_eq!(tape.value(l), &[0.0]);
    assert!(tape.backward(l).unwrap().get(z).unwrap().iter().all(|&g| g == 0.0));

    let z = tape.constant(t(&[1, 2, 1, 1], &[2.0, 0.0]));
    let l = tape.cross_entropy(z, &[0], None).unwrap();
    assert!((tape.value(l)[0] - 0.126_928_011_042_972_5).abs() < 1e-12);

    assert!(matches!(tape.cross_entropy(z, &[2], Some(255)), Err(Error::Data(_))));
    assert!(matches!(tape.cross_entropy(z, &[0, 1], None), Err(Error::Dimension { .. })));
}

#[test]
fn cross_entropy_gradient() {
    let x = random(&[2, 4, 2, 3], 12, -2.0, 2.0);
    let targets = [0, 1, 2, 3, 255, 1, 2, 2, 0, 255, 3, 1];
    let r = grad_check(|tape, z| tape.cross_entropy(z, &targets, Some(255)), &x, 1e-5, 1e-6).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn concat_and_reshape_gradients() {
    let inputs = [random(&[2, 1, 2, 3], 13, -1.0, 1.0), random(&[2, 3, 2, 3], 14, -1.0, 1.0)];
    let r = grad_check_with(
        |tape, v| {
            let c = tape.concat_channels(&[v[0], v[1], v[0]])?;
            tape.reshape(c, &[2, 30])
        },
        &inputs,
        &tight(),
    )
    .unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn scale_by_gradient() {
    let inputs = [t(&[1], &[0.7]), random(&[3, 2], 15, -1.0, 1.0)];
    let r = grad_check_with(|tape, v| tape.scale_by(v[0], v[1]), &inputs, &tight()).unwrap();
    assert!(r.pass && r.checked == 7, "{r:?}");
}

fn unary(op: usize, tape: &mut Tape<f64>, x: Var, len: usize) -> agln::Result<Var> {
    Ok(match op {
        0 => tape.relu(x),
        1 => tape.sigmoid(x),
        2 => tape.scale(x, -1.75),
        3 => tape.softmax(x, 0)?,
        4 => tape.sum(x),
        5 => tape.mean(x),
        6 => tape.mul(x, x)?,
        7 => tape.add(x, x)?,
        _ => {
            let m = tape.reshape(x, &[1, len])?;
            tape.transpose(m)?
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_slices_sum_to_one(
        dims in prop::collection::vec(1usize..5, 1..4),
        axis_pick in 0usize..3,
        seed in any::<u64>(),
    ) {
        let axis = axis_pick % dims.len();
        let x = random(&dims, seed, -50.0, 50.0);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv, axis).unwrap();
        let out = tape.value(y);
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..dims[axis]).map(|k| out[(o * dims[axis] + k) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn matmul_transpose_identity(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let a = random(&[m, k], seed, -1.0, 1.0);
        let b = random(&[k, n], seed ^ 1, -1.0, 1.0);
        let lhs = a.matmul(&b).unwrap().t().unwrap();
        let rhs = b.t().unwrap().matmul(&a.t().unwrap()).unwrap();
        prop_assert_eq!(lhs.shape(), rhs.shape());
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_over_independent_terms(seed in any::<u64>(), len in 1usize..10) {
        let xa = random(&[len], seed, -2.0, 2.0).with_grad();
        let xb = random(&[len], seed ^ 7, -2.0, 2.0).with_grad();
        let grads = |both: (bool, bool)| {
            let mut tape = Tape::<f64>::new();
            let a = tape.leaf(&xa);
            let b = tape.leaf(&xb);
            let sa = tape.sigmoid(a);
            let la = tape.sum(sa);
            let qb = tape.mul(b, b).unwrap();
            let lb = tape.sum(qb);
            let l = match both {
                (true, true) => tape.add(la, lb).unwrap(),
                (true, false) => la,
                _ => lb,
            };
            let g = tape.backward(l).unwrap();
            (g.get(a).map(|v| v.to_vec()), g.get(b).map(|v| v.to_vec()))
        };
        let (ga, gb) = grads((true, true));
        prop_assert_eq!(ga, grads((true, false)).0);
        prop_assert_eq!(gb, grads((false, true)).1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn every_primitive_passes_grad_check(
        dims in prop::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
    ) {
        let len: usize = dims.iter().product();
        prop_assume!(len <= 64);
        let x = random(&dims, seed, -2.0, 2.0);
        for op in 0..9 {
            let r = grad_check(|tape, v| unary(op, tape, v, len), &x, 1e-5, 1e-6).unwrap();
            prop_assert!(r.pass, "op {} on {:?}: {:?}", op, dims, r);
        }
        let y = random(&dims, seed ^ 3, -2.0, 2.0);
        let r = grad_check_with(|tape, v| tape.mul(v[0], v[1]), &[x.clone(), y.clone()], &tight()).unwrap();
        prop_assert!(r.pass);
        let r = grad_check_with(|tape, v| tape.add(v[0], v[1]), &[x.clone(), y], &tight()).unwrap();
        prop_assert!(r.pass);
        let m = dims[0];
        let k = len / m;
        let w = random(&[k, 3], seed ^ 5, -1.0, 1.0);
        let r = grad_check_with(
            |tape, v| {
                let a = tape.reshape(v[0], &[m, k])?;
                tape.matmul(a, v[1])
            },
            &[x, w],
            &tight(),
        ).unwrap();
        prop_assert!(r.pass);
    }

    #[test]
    fn layer_primitives_pass_grad_check_on_random_shapes(
        b in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>(),
    ) {
        let x = random(&[b, c, h, w], seed, -1.0, 1.0);
        let k = random(&[2, c, 3, 3], seed ^ 1, -1.0, 1.0);
        let r = grad_check_with(|tape, v| tape.conv2d(v[0], v[1], None, ConvSpec::SAME), &[x.clone(), k], &tight()).unwrap();
        prop_assert!(r.pass, "conv {:?}", r);
        let r = grad_check(|tape, v| tape.resize(v, h + 1, 2 * w), &x, 1e-5, 1e-6).unwrap();
        prop_assert!(r.pass, "resize {:?}", r);
        if b * h * w > 1 {
            let g = random(&[c], seed ^ 2, 0.5, 1.5);
            let s = random(&[c], seed ^ 4, -0.5, 0.5);
            let r = grad_check_with(|tape, v| Ok(tape.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0), &[x.clone(), g, s], &tight()).unwrap();
            prop_assert!(r.pass, "batch_norm {:?}", r);
        }
        let classes = c + 1;
        let logits = random(&[b, classes, h, w], seed ^ 6, -2.0, 2.0);
        let targets: Vec<u8> = (0..b * h * w).map(|i| (i % classes) as u8).collect();
        let r = grad_check(|tape, z| tape.cross_entropy(z, &targets, None), &logits, 1e-5, 1e-6).unwrap();
        prop_assert!(r.pass, "cross_entropy {:?}", r);
    }

    #[test]
    fn delta_kernel_is_identity(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = random(&[1, c, h, w], seed, -5.0, 5.0);
        let mut k = vec![0.0; c * 9];
        for i in 0..c { k[i * 9 + 4] = 1.0; }
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(t(&[c, 1, 3, 3], &k));
        let y = tape.conv2d(xv, kv, None, ConvSpec { stride: 1, pad: 1, depthwise: true }).unwrap();
        prop_assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn resize_constant_round_trip(v in -10.0f64..10.0, h in 1usize..9, w in 1usize..9, oh in 1usize..9, ow in 1usize..9) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, h, w], v));
        let down = tape.resize(x, oh, ow).unwrap();
        prop_assert!(tape.value(down).iter().all(|&d| d == v));
        let back = tape.resize(down, h, w).unwrap();
        prop_assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn cross_entropy_is_non_negative(seed in any::<u64>(), k in 2usize..5) {
        let z = random(&[1, k, 2, 2], seed, -30.0, 30.0);
        let targets: Vec<u8> = (0..4).map(|i| (i % k) as u8).collect();
        let mut tape = Tape::<f64>::new();
        let zv = tape.constant(z);
        let l = tape.cross_entropy(zv, &targets, None).unwrap();
        prop_assert!(tape.value(l)[0] >= 0.0);
    }
}
