use agln::blocks::{channel_resample, spatial_gate, BlockConfig, Cfb, Lrm, Sab, Sdm};
use agln::nn::{Ctx, ParamId, ParamKind, ParamStore};
use agln::tensor::{grad_check_params, GradCheckOptions, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn set(store: &mut ParamStore<f64>, name: &str, v: &[f64]) {
    store.set_values(name, v).unwrap();
}

/// X_feat = [[1,3],[2,6]] on a 1×2 map: φ is the identity, x holds the
/// features directly.
fn sab_fixture(theta_w: [f64; 2]) -> (ParamStore<f64>, Sab) {
    let mut store = ParamStore::new();
    let sab = Sab::new(&mut store, 1, "sab", &BlockConfig::new(2, 1)).unwrap();
    set(&mut store, "sab.phi.weight", &[1.0, 0.0, 0.0, 1.0]);
    set(&mut store, "sab.phi.bias", &[0.0, 0.0]);
    set(&mut store, "sab.theta.weight", &theta_w);
    (store, sab)
}

fn run_sab(store: &mut ParamStore<f64>, sab: &Sab, x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, store, true);
    let xv = cx.tape.constant(x.clone());
    let out = sab.forward(&mut cx, xv).unwrap();
    (cx.tape.value(out.descriptors).to_vec(), cx.tape.value(out.attention).to_vec())
}

#[test]
fn sab_examples() {
    let x = t(&[1, 2, 1, 2], &[1.0, 3.0, 2.0, 6.0]);
    // Logit gap of ln 3 between the two positions gives weights [1/4, 3/4].
    let (store, sab) = &mut sab_fixture([3f64.ln() / 2.0, 0.0]);
    let (d, am) = run_sab(store, sab, &x);
    close(&am, &[0.25, 0.75], 1e-12);
    close(&d, &[2.5, 5.0], 1e-12);

    let (store, sab) = &mut sab_fixture([-100.0, 0.0]);
    let (d, _) = run_sab(store, sab, &x);
    close(&d, &[1.0, 2.0], 1e-12);

    let (store, sab) = &mut sab_fixture([0.0, 0.0]);
    let (d, am) = run_sab(store, sab, &x);
    assert_eq!(am, vec![0.5, 0.5]);
    assert_eq!(d, vec![2.0, 4.0]);
}

#[test]
fn sab_constant_theta_is_average_pooling() {
    let cfg = BlockConfig::new(3, 4);
    let mut store = ParamStore::new();
    let sab = Sab::new(&mut store, 9, "sab", &cfg).unwrap();
    set(&mut store, "sab.theta.weight", &[0.0; 12]);
    let x = random(&[2, 3, 3, 5], 3, -1.0, 1.0);
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &mut store, true);
    let xv = cx.tape.constant(x);
    let out = sab.forward(&mut cx, xv).unwrap();
    let feat = cx.tape.value(out.features);
    let d = cx.tape.value(out.descriptors);
    for b in 0..2 {
        for c in 0..3 {
            let row = &feat[(b * 3 + c) * 15..(b * 3 + c + 1) * 15];
            let mean = row.iter().sum::<f64>() / 15.0;
            for n in 0..4 {
                assert!((d[(b * 3 + c) * 4 + n] - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gap_mode_equals_constant_theta_bitwise() {
    for seed in 0..10u64 {
        let mut cfg = BlockConfig::new(4, 3);
        let mut attn_store = ParamStore::new();
        let sab = Sab::new(&mut attn_store, seed, "sab", &cfg).unwrap();
        set(&mut attn_store, "sab.theta.weight", &[0.0; 12]);
        cfg.gap_mode = true;
        let mut gap_store = ParamStore::new();
        let gap = Sab::new(&mut gap_store, seed, "sab", &cfg).unwrap();
        assert!(gap.gap_mode() && gap_store.find("sab.theta.weight").is_none());
        let x = random(&[2, 4, 5, 3], seed + 100, -2.0, 2.0);
        let a = run_sab(&mut attn_store, &sab, &x);
        let g = run_sab(&mut gap_store, &gap, &x);
        assert_eq!(a, g);
    }
}

fn sdm_fixture(c: usize, n: usize, seed: u64) -> (ParamStore<f64>, Sdm) {
    let mut store = ParamStore::new();
    let sdm = Sdm::new(&mut store, seed, "sdm", &BlockConfig::new(c, n)).unwrap();
    (store, sdm)
}

fn run_sdm(store: &mut ParamStore<f64>, sdm: &Sdm, d: &Tensor<f64>, a: &Tensor<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, store, true);
    let dv = cx.tape.constant(d.clone());
    let av = cx.tape.constant(a.clone());
    let out = sdm.forward(&mut cx, dv, av).unwrap();
    (
        cx.tape.value(out.attention).to_vec(),
        cx.tape.value(out.distributed).to_vec(),
        cx.tape.value(out.enhanced).to_vec(),
    )
}

#[test]
fn sdm_examples() {
    let (mut store, sdm) = sdm_fixture(2, 2, 4);
    assert_eq!(store.get("sdm.alpha").unwrap().data(), &[0.0]);
    let d = t(&[1, 2, 2], &[2.0, 4.0, 1.0, 3.0]);
    let a = random(&[1, 2, 1, 1], 5, -1.0, 1.0);

    set(&mut store, "sdm.varphi.weight", &[0.0; 4]);
    set(&mut store, "sdm.varphi.bias", &[60.0, -60.0]);
    let (_, m, _) = run_sdm(&mut store, &sdm, &d, &a);
    close(&m, &[2.0, 1.0], 1e-12);

    set(&mut store, "sdm.varphi.bias", &[0.0, 0.0]);
    let (att, m, _) = run_sdm(&mut store, &sdm, &d, &a);
    assert_eq!(att, vec![0.5, 0.5]);
    assert_eq!(m, vec![3.0, 2.0]);
}

#[test]
fn sdm_zero_alpha_ignores_descriptors() {
    let (mut store, sdm) = sdm_fixture(3, 2, 6);
    let a = random(&[2, 3, 4, 4], 7, -1.0, 1.0);
    let (_, m1, e1) = run_sdm(&mut store, &sdm, &random(&[2, 3, 2], 8, -5.0, 5.0), &a);
    let (_, m2, e2) = run_sdm(&mut store, &sdm, &random(&[2, 3, 2], 9, -5.0, 5.0), &a);
    assert_ne!(m1, m2);
    assert_eq!(e1, e2);
}

#[test]
fn sdm_rejects_descriptor_count_mismatch() {
    let (mut store, sdm) = sdm_fixture(3, 2, 6);
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &mut store, true);
    let d = cx.tape.constant(Tensor::zeros(&[1, 3, 5]));
    let a = cx.tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
    assert!(matches!(sdm.forward(&mut cx, d, a), Err(agln::Error::Config(_))));
}

fn with_ctx<R>(f: impl FnOnce(&mut Ctx<'_, f64>) -> R) -> R {
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &mut store, true);
    f(&mut cx)
}

#[test]
fn channel_resample_examples() {
    with_ctx(|cx| {
        let b = random(&[1, 1, 2, 3], 10, -1.0, 1.0);
        let bv = cx.tape.constant(b.clone());
        let ev = cx.tape.constant(random(&[1, 1, 2, 3], 11, -1.0, 1.0));
        let f = channel_resample(cx, bv, ev).unwrap();
        assert_eq!(cx.tape.value(f), b.data());

        let b = random(&[1, 3, 2, 2], 12, -1.0, 1.0);
        let bv = cx.tape.constant(b.clone());
        let ev = cx.tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let f = channel_resample(cx, bv, ev).unwrap();
        for p in 0..4 {
            let mean = (0..3).map(|c| b.data()[c * 4 + p]).sum::<f64>() / 3.0;
            for c in 0..3 {
                assert!((cx.tape.value(f)[c * 4 + p] - mean).abs() < 1e-15);
            }
        }

        let eye = t(&[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let bv = cx.tape.constant(eye.clone());
        let ev = cx.tape.constant(eye);
        let f = channel_resample(cx, bv, ev).unwrap();
        let (hi, lo) = (1.0 / (1.0 + (-1f64).exp()), 1.0 / (1.0 + 1f64.exp()));
        close(cx.tape.value(f), &[hi, lo, lo, hi], 1e-15);
        assert!((hi - 0.73106).abs() < 5e-6 && (lo - 0.26894).abs() < 5e-6);

        let other = cx.tape.constant(Tensor::zeros(&[1, 2, 2, 1]));
        assert!(channel_resample(cx, bv, other).is_err());
    });
}

#[test]
fn spatial_gate_examples() {
    with_ctx(|cx| {
        let f = random(&[1, 2, 2, 2], 13, -3.0, 3.0);
        let fv = cx.tape.constant(f.clone());
        let zero = cx.tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let g = spatial_gate(cx, fv, zero).unwrap();
        let half: Vec<f64> = f.data().iter().map(|v| v / 2.0).collect();
        assert_eq!(cx.tape.value(g), &half[..]);

        let big = cx.tape.constant(Tensor::full(&[1, 2, 2, 2], 100.0));
        let g = spatial_gate(cx, fv, big).unwrap();
        close(cx.tape.value(g), f.data(), 1e-6);

        let two = cx.tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let one = cx.tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let g = spatial_gate(cx, two, one).unwrap();
        assert!((cx.tape.value(g)[0] - 1.46212).abs() < 5e-6);

        assert!(spatial_gate(cx, fv, one).is_err());
    });
}

fn cfb_fixture(cfg: &BlockConfig, seed: u64) -> (ParamStore<f64>, Cfb) {
    let mut store = ParamStore::new();
    let cfb = Cfb::new(&mut store, seed, "cfb", cfg).unwrap();
    (store, cfb)
}

fn run_cfb(store: &mut ParamStore<f64>, cfb: &Cfb, d: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> [Vec<f64>; 4] {
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, store, true);
    let (dv, av, bv) = (cx.tape.constant(d.clone()), cx.tape.constant(a.clone()), cx.tape.constant(b.clone()));
    let o = cfb.forward(&mut cx, dv, av, bv).unwrap();
    [o.distributed, o.enhanced, o.refined, o.output].map(|v| cx.tape.value(v).to_vec())
}

#[test]
fn cfb_zero_beta_suppresses_encoder_branch() {
    let (mut store, cfb) = cfb_fixture(&BlockConfig::new(3, 2), 14);
    set(&mut store, "cfb.lrm.beta", &[0.0]);
    let d = random(&[1, 3, 2], 15, -1.0, 1.0);
    let a = random(&[1, 3, 4, 4], 16, -1.0, 1.0);
    let o1 = run_cfb(&mut store, &cfb, &d, &a, &random(&[1, 3, 4, 4], 17, -1.0, 1.0));
    let o2 = run_cfb(&mut store, &cfb, &d, &a, &random(&[1, 3, 4, 4], 18, -1.0, 1.0));
    assert_ne!(o1[2], o2[2]);
    assert_eq!(o1[3], o2[3]);
}

#[test]
fn cfb_with_refinement_disabled_is_a_skip_connection() {
    let mut cfg = BlockConfig::new(3, 2);
    cfg.enable_cr = false;
    cfg.enable_sg = false;
    let (mut store, cfb) = cfb_fixture(&cfg, 19);
    let b = random(&[2, 3, 2, 2], 20, -1.0, 1.0);
    let out = run_cfb(&mut store, &cfb, &random(&[2, 3, 2], 21, -1.0, 1.0), &random(&[2, 3, 2, 2], 22, -1.0, 1.0), &b);
    assert_eq!(out[2], b.data());
}

#[test]
fn cfb_rejects_resolution_mismatch() {
    let (mut store, cfb) = cfb_fixture(&BlockConfig::new(2, 2), 23);
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &mut store, true);
    let d = cx.tape.constant(Tensor::zeros(&[1, 2, 2]));
    let a = cx.tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let b = cx.tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(matches!(cfb.forward(&mut cx, d, a, b), Err(agln::Error::Dimension { .. })));
}

#[test]
fn lrm_toggles() {
    let mut store = ParamStore::<f64>::new();
    let mut cfg = BlockConfig::new(2, 1);
    cfg.enable_cr = false;
    let lrm = Lrm::new(&mut store, "lrm", &cfg).unwrap();
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &mut store, true);
    let b = cx.tape.constant(random(&[1, 2, 2, 2], 24, -1.0, 1.0));
    let e = cx.tape.constant(random(&[1, 2, 2, 2], 25, -1.0, 1.0));
    let m = cx.tape.constant(random(&[1, 2, 2, 2], 26, -1.0, 1.0));
    let g = lrm.forward(&mut cx, b, e, m).unwrap();
    let direct = spatial_gate(&mut cx, b, m).unwrap();
    assert_eq!(cx.tape.value(g), cx.tape.value(direct));
}

#[test]
fn fixed_scalars_are_pinned_to_one() {
    let mut cfg = BlockConfig::new(2, 2);
    cfg.alpha_learnable = false;
    cfg.beta_learnable = false;
    let (store, cfb) = cfb_fixture(&cfg, 27);
    assert_eq!(store.kind(cfb.sdm.alpha_id()), ParamKind::Fixed);
    assert_eq!(store.tensor(cfb.sdm.alpha_id()).data(), &[1.0]);
    assert_eq!(store.kind(cfb.lrm.beta_id()), ParamKind::Fixed);
    assert_eq!(store.tensor(cfb.lrm.beta_id()).data(), &[1.0]);
}

// ---- straight-line oracle ------------------------------------------------

/// Plain-loop evaluation of the fusion block for one sample with `C`
/// channels on an `h×w` map, written without the tape.
struct Oracle<'a> {
    s: &'a ParamStore<f64>,
    c: usize,
    n: usize,
    h: usize,
    w: usize,
}

impl Oracle<'_> {
    fn p(&self, name: &str) -> Vec<f64> {
        self.s.get(name).unwrap().data().to_vec()
    }

    fn conv1x1(&self, name: &str, x: &[f64], cout: usize) -> Vec<f64> {
        let (w, b) = (self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")));
        let hw = self.h * self.w;
        let mut out = vec![0.0; cout * hw];
        for o in 0..cout {
            for p in 0..hw {
                let mut acc = b[o];
                for i in 0..self.c {
                    acc += w[o * self.c + i] * x[i * hw + p];
                }
                out[o * hw + p] = acc;
            }
        }
        out
    }

    fn conv_bn_relu(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let w = self.p(&format!("{name}.conv.weight"));
        let (gamma, beta) = (self.p(&format!("{name}.bn.gamma")), self.p(&format!("{name}.bn.beta")));
        let (c, h, wd) = (self.c, self.h as isize, self.w as isize);
        let hw = self.h * self.w;
        let mut y = vec![0.0; c * hw];
        for o in 0..c {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for u in -1..=1isize {
                            for v in -1..=1isize {
                                let (yy, xx) = (i + u, j + v);
                                if yy >= 0 && xx >= 0 && yy < h && xx < wd {
                                    let wi = ((o * c + ci) * 3 + (u + 1) as usize) * 3 + (v + 1) as usize;
                                    acc += w[wi] * x[ci * hw + (yy * wd + xx) as usize];
                                }
                            }
                        }
                    }
                    y[o * hw + (i * wd + j) as usize] = acc;
                }
            }
        }
        for o in 0..c {
            let ch = &mut y[o * hw..(o + 1) * hw];
            let mean = ch.iter().sum::<f64>() / hw as f64;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
            for v in ch.iter_mut() {
                *v = (gamma[o] * (*v - mean) / (var + 1e-5).sqrt() + beta[o]).max(0.0);
            }
        }
        y
    }

    fn cfb(&self, d: &[f64], a: &[f64], b: &[f64]) -> [Vec<f64>; 4] {
        let (c, n, hw) = (self.c, self.n, self.h * self.w);
        let logits = self.conv1x1("cfb.sdm.varphi", a, n);
        let mut m = vec![0.0; c * hw];
        for p in 0..hw {
            let z: f64 = (0..n).map(|k| logits[k * hw + p].exp()).sum();
            for ch in 0..c {
                m[ch * hw + p] = (0..n).map(|k| d[ch * n + k] * logits[k * hw + p].exp() / z).sum();
            }
        }
        let alpha = self.p("cfb.sdm.alpha")[0];
        let pre: Vec<f64> = a.iter().zip(&m).map(|(x, y)| x + alpha * y).collect();
        let e = self.conv_bn_relu("cfb.sdm.psi", &pre);
        let mut f = vec![0.0; c * hw];
        for i in 0..c {
            let aff: Vec<f64> = (0..c).map(|j| (0..hw).map(|p| b[i * hw + p] * e[j * hw + p]).sum()).collect();
            let z: f64 = aff.iter().map(|v| v.exp()).sum();
            for p in 0..hw {
                f[i * hw + p] = (0..c).map(|j| aff[j].exp() / z * b[j * hw + p]).sum();
            }
        }
        let g: Vec<f64> = f.iter().zip(&m).map(|(x, y)| x / (1.0 + (-y).exp())).collect();
        let beta = self.p("cfb.lrm.beta")[0];
        let pre: Vec<f64> = e.iter().zip(&g).map(|(x, y)| x + beta * y).collect();
        let o = self.conv_bn_relu("cfb.fuse", &pre);
        [m, e, g, o]
    }
}

#[test]
fn cfb_matches_straight_line_oracle() {
    for seed in 0..5u64 {
        let cfg = BlockConfig::new(2, 2);
        let (mut store, cfb) = cfb_fixture(&cfg, 30 + seed);
        set(&mut store, "cfb.sdm.alpha", &[0.7]);
        set(&mut store, "cfb.lrm.beta", &[0.6]);
        set(&mut store, "cfb.sdm.psi.bn.gamma", &[1.3, 0.8]);
        set(&mut store, "cfb.fuse.bn.beta", &[0.2, -0.1]);
        let d = random(&[1, 2, 2], 40 + seed, -1.0, 1.0);
        let a = random(&[1, 2, 2, 2], 50 + seed, -1.0, 1.0);
        let b = random(&[1, 2, 2, 2], 60 + seed, -1.0, 1.0);
        let got = run_cfb(&mut store, &cfb, &d, &a, &b);
        let oracle = Oracle { s: &store, c: 2, n: 2, h: 2, w: 2 };
        let want = oracle.cfb(d.data(), a.data(), b.data());
        for (g, w) in got.iter().zip(&want) {
            close(g, w, 1e-12);
        }
    }
}

// ---- gradients -----------------------------------------------------------

fn block_grad_opts() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-5,
        tol: 1e-6,
        ..Default::default()
    }
}

struct Fixture {
    store: ParamStore<f64>,
    inputs: Vec<ParamId>,
}

/// Registers the block inputs as trainable entries so they are checked too.
fn fixture(mut store: ParamStore<f64>, inputs: Vec<Tensor<f64>>) -> Fixture {
    let inputs = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(&format!("input{i}"), t, ParamKind::Trainable).unwrap())
        .collect();
    Fixture { store, inputs }
}

fn check<F>(mut fx: Fixture, f: F)
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> agln::Result<Var>,
{
    let r = grad_check_params(
        &mut fx,
        |s| &mut s.store,
        |s, tape| {
            let mut cx = Ctx::new(tape, &mut s.store, true);
            let vars: Vec<Var> = s.inputs.iter().map(|&id| cx.param(id)).collect();
            f(&mut cx, &vars)
        },
        &block_grad_opts(),
    )
    .unwrap();
    assert!(r.pass, "{r:?}");
    assert!(r.checked > 0);
}

const C: usize = 4;
const N: usize = 3;

#[test]
fn sab_gradients() {
    let mut store = ParamStore::new();
    let sab = Sab::new(&mut store, 70, "sab", &BlockConfig::new(C, N)).unwrap();
    check(
        fixture(
            store,
            vec![random(&[1, C, 4, 4], 71, -1.0, 1.0)],
        ),
        |cx, v| Ok(sab.forward(cx, v[0])?.descriptors),
    );
}

#[test]
fn sdm_gradients_include_alpha() {
    let (mut store, sdm) = sdm_fixture(C, N, 72);
    set(&mut store, "sdm.alpha", &[0.4]);
    check(
        fixture(
            store,
            vec![random(&[1, C, 4, 4], 73, -1.0, 1.0)],
        ),
        |cx, v| {
            let d = cx.tape.constant(random(&[1, C, N], 74, -1.0, 1.0).with_grad());
            Ok(sdm.forward(cx, d, v[0])?.enhanced)
        },
    );
}

#[test]
fn channel_resample_and_gate_gradients() {
    let fx = || fixture(ParamStore::new(), vec![random(&[1, C, 4, 4], 75, -1.0, 1.0), random(&[1, C, 4, 4], 76, -1.0, 1.0)]);
    check(fx(), |cx, v| channel_resample(cx, v[0], v[1]));
    check(fx(), |cx, v| spatial_gate(cx, v[0], v[1]));
}

#[test]
fn cfb_gradients_include_alpha_and_beta() {
    for (cr, sg, lite) in [(true, true, false), (true, false, false), (false, true, false), (true, true, true)] {
        let mut cfg = BlockConfig::new(C, N);
        cfg.enable_cr = cr;
        cfg.enable_sg = sg;
        cfg.lite = lite;
        let (mut store, cfb) = cfb_fixture(&cfg, 77);
        set(&mut store, "cfb.sdm.alpha", &[0.5]);
        set(&mut store, "cfb.lrm.beta", &[0.8]);
        check(
            fixture(
                store,
                vec![
                    random(&[1, C, N], 78, -1.0, 1.0),
                    random(&[1, C, 4, 4], 79, -1.0, 1.0),
                    random(&[1, C, 4, 4], 80, -1.0, 1.0),
                ],
            ),
            |cx, v| Ok(cfb.forward(cx, v[0], v[1], v[2])?.output),
        );
    }
}

// ---- properties over random seeds ------------------------------------------

fn hull_check(values: &[f64], rows: usize, len: usize, bounds: impl Fn(usize) -> (f64, f64)) -> Result<(), TestCaseError> {
    for r in 0..rows {
        let (lo, hi) = bounds(r);
        for &v in &values[r * len..(r + 1) * len] {
            prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6, "{} outside [{}, {}]", v, lo, hi);
        }
    }
    Ok(())
}

fn min_max(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attention_normalisation_and_convex_hulls(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, n, h, w) = (rng.gen_range(1..6), rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
        let hw = h * w;
        let cfg = BlockConfig::new(c, n);
        let mut store = ParamStore::<f64>::new();
        let sab = Sab::new(&mut store, seed, "sab", &cfg).unwrap();
        let sdm = Sdm::new(&mut store, seed, "sdm", &cfg).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &mut store, true);
        let x = cx.tape.constant(random(&[1, c, h, w], seed ^ 1, -3.0, 3.0));
        let a = cx.tape.constant(random(&[1, c, h, w], seed ^ 2, -3.0, 3.0));
        let b = cx.tape.constant(random(&[1, c, h, w], seed ^ 3, -3.0, 3.0));
        let sab_out = sab.forward(&mut cx, x).unwrap();
        let sdm_out = sdm.forward(&mut cx, sab_out.descriptors, a).unwrap();
        let f = channel_resample(&mut cx, b, sdm_out.enhanced).unwrap();
        let g = spatial_gate(&mut cx, f, sdm_out.distributed).unwrap();
        let tape = &cx.tape;

        let am = tape.value(sab_out.attention);
        for r in 0..n {
            let s: f64 = am[r * hw..(r + 1) * hw].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
        let av = tape.value(sdm_out.attention);
        for p in 0..hw {
            let s: f64 = (0..n).map(|k| av[k * hw + p]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
        let feat = tape.value(sab_out.features);
        let d = tape.value(sab_out.descriptors);
        hull_check(d, c, n, |ch| min_max(feat[ch * hw..(ch + 1) * hw].iter().copied()))?;
        let m = tape.value(sdm_out.distributed);
        hull_check(m, c, hw, |ch| min_max(d[ch * n..(ch + 1) * n].iter().copied()))?;
        let bv = tape.value(b);
        let fv = tape.value(f);
        for p in 0..hw {
            let (lo, hi) = min_max((0..c).map(|ch| bv[ch * hw + p]));
            for ch in 0..c {
                let v = fv[ch * hw + p];
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
        for (gv, fv) in tape.value(g).iter().zip(fv) {
            prop_assert!(gv.abs() <= fv.abs());
            if *fv != 0.0 {
                prop_assert!(gv.abs() < fv.abs());
            }
        }
    }

    #[test]
    fn zero_alpha_makes_enhancement_independent_of_descriptors(seed in any::<u64>()) {
        let (mut store, sdm) = sdm_fixture(3, 4, seed);
        let a = random(&[1, 3, 3, 3], seed ^ 5, -2.0, 2.0);
        let e1 = run_sdm(&mut store, &sdm, &random(&[1, 3, 4], seed ^ 6, -9.0, 9.0), &a).2;
        let e2 = run_sdm(&mut store, &sdm, &random(&[1, 3, 4], seed ^ 7, -9.0, 9.0), &a).2;
        prop_assert_eq!(e1, e2);
    }
}
