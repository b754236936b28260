use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{channel_resample, spatial_gate, BlockConfig, Cfb, Sab, Sdm};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::nn::{Ctx, ParamId, ParamKind, ParamStore, IGNORE_LABEL};
use crate::tensor::{grad_check_params, grad_check_with, ConvSpec, GradCheckOptions, GradReport, Tape, Tensor, Var};

/// Every case the suite runs, in order.
pub const CASES: [&str; 19] = [
    "matmul",
    "softmax",
    "elementwise",
    "conv_standard",
    "conv_strided",
    "conv_depthwise",
    "batch_norm",
    "resize",
    "cross_entropy",
    "sab",
    "sdm",
    "channel_resample",
    "spatial_gate",
    "cfb",
    "cfb_lite",
    "pipeline_fpn_baseline",
    "pipeline_agln_minus",
    "pipeline_agln_straight",
    "pipeline_agln_dense",
];

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    pub report: GradReport,
}

impl GradCase {
    pub fn line(&self) -> String {
        format!(
            "{} {} max_rel_err={:.3e} tol={:.0e} checked={} skipped={} unresolved={}",
            if self.report.pass { "PASS" } else { "FAIL" },
            self.name,
            self.report.max_rel_err,
            self.tol,
            self.report.checked,
            self.report.skipped,
            self.report.unresolved
        )
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

fn tight(corrupt: bool) -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-5,
        tol: 1e-6,
        corrupt,
        ..GradCheckOptions::default()
    }
}

fn primitive(name: &str, opts: &GradCheckOptions) -> Result<GradReport> {
    let r = |s: &[usize], seed| random(s, seed, -1.0, 1.0);
    match name {
        "matmul" => grad_check_with(|t, v| t.matmul(v[0], v[1]), &[r(&[2, 3, 4], 1), r(&[2, 4, 5], 2)], opts),
        "softmax" => grad_check_with(|t, v| t.softmax(v[0], 1), &[r(&[2, 4, 3], 3)], opts),
        "elementwise" => grad_check_with(
            |t, v| {
                let s = t.sigmoid(v[0]);
                let p = t.mul(s, v[1])?;
                let q = t.add(p, v[0])?;
                let q = t.scale_by(v[2], q)?;
                Ok(t.relu(q))
            },
            &[r(&[3, 4], 4), r(&[3, 4], 5), random(&[1], 6, 0.5, 1.5)],
            opts,
        ),
        "conv_standard" | "conv_strided" | "conv_depthwise" => {
            let (spec, xs, ws) = match name {
                "conv_standard" => (ConvSpec::SAME, [2, 2, 4, 3], [3, 2, 3, 3]),
                "conv_strided" => (ConvSpec { stride: 2, ..ConvSpec::SAME }, [1, 2, 5, 4], [2, 2, 3, 3]),
                _ => (ConvSpec { depthwise: true, ..ConvSpec::SAME }, [2, 3, 3, 4], [3, 1, 3, 3]),
            };
            grad_check_with(
                |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec),
                &[r(&xs, 7), r(&ws, 8), r(&[ws[0]], 9)],
                opts,
            )
        }
        "batch_norm" => grad_check_with(
            |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
            &[r(&[2, 3, 2, 3], 10), random(&[3], 11, 0.5, 1.5), r(&[3], 12)],
            opts,
        ),
        "resize" => grad_check_with(|t, v| t.resize(v[0], 5, 7), &[r(&[1, 2, 3, 4], 13)], opts),
        "cross_entropy" => {
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let mut targets: Vec<u8> = (0..2 * 3 * 2).map(|_| rng.gen_range(0..4)).collect();
            targets[5] = IGNORE_LABEL;
            grad_check_with(|t, v| t.cross_entropy(v[0], &targets, Some(IGNORE_LABEL)), &[r(&[2, 4, 3, 2], 15)], opts)
        }
        _ => unreachable!("not a primitive case: {name}"),
    }
}

struct Fixture {
    store: ParamStore<f64>,
    inputs: Vec<ParamId>,
}

/// Checks a block with its inputs registered as trainable tensors.
fn block<F>(mut store: ParamStore<f64>, inputs: Vec<Tensor<f64>>, opts: &GradCheckOptions, f: F) -> Result<GradReport>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let inputs = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(&format!("input{i}"), t, ParamKind::Trainable))
        .collect::<Result<_>>()?;
    let mut fx = Fixture { store, inputs };
    grad_check_params(
        &mut fx,
        |s| &mut s.store,
        |s, tape| {
            let mut cx = Ctx::new(tape, &mut s.store, true);
            let vars: Vec<Var> = s.inputs.iter().map(|&id| cx.param(id)).collect();
            f(&mut cx, &vars)
        },
        opts,
    )
}

const C: usize = 4;
const N: usize = 3;

fn block_case(name: &str, opts: &GradCheckOptions) -> Result<GradReport> {
    let r = |s: &[usize], seed| random(s, seed, -1.0, 1.0);
    let mut store = ParamStore::new();
    let mut cfg = BlockConfig::new(C, N);
    match name {
        "sab" => {
            let sab = Sab::new(&mut store, 70, "sab", &cfg)?;
            block(store, vec![r(&[1, C, 4, 4], 71)], opts, |cx, v| Ok(sab.forward(cx, v[0])?.descriptors))
        }
        "sdm" => {
            let sdm = Sdm::new(&mut store, 72, "sdm", &cfg)?;
            store.set_values("sdm.alpha", &[0.4])?;
            block(store, vec![r(&[1, C, N], 73), r(&[1, C, 4, 4], 74)], opts, |cx, v| {
                Ok(sdm.forward(cx, v[0], v[1])?.enhanced)
            })
        }
        "channel_resample" | "spatial_gate" => {
            let inputs = vec![r(&[1, C, 4, 4], 75), r(&[1, C, 4, 4], 76)];
            if name == "channel_resample" {
                block(store, inputs, opts, |cx, v| channel_resample(cx, v[0], v[1]))
            } else {
                block(store, inputs, opts, |cx, v| spatial_gate(cx, v[0], v[1]))
            }
        }
        "cfb" | "cfb_lite" => {
            cfg.lite = name == "cfb_lite";
            let cfb = Cfb::new(&mut store, 77, "cfb", &cfg)?;
            store.set_values("cfb.sdm.alpha", &[0.5])?;
            store.set_values("cfb.lrm.beta", &[0.8])?;
            block(
                store,
                vec![r(&[1, C, N], 78), r(&[1, C, 4, 4], 79), r(&[1, C, 4, 4], 80)],
                opts,
                |cx, v| Ok(cfb.forward(cx, v[0], v[1], v[2])?.output),
            )
        }
        _ => unreachable!("not a block case: {name}"),
    }
}

/// Forward-to-loss check of a whole network at `C=8, N=4` on `2×3×32×32`,
/// with the fusion scalars moved away from their initial values.
pub fn pipeline_case(variant: Variant, corrupt: bool) -> Result<GradReport> {
    let cfg = ModelConfig {
        encoder_widths: [4, 4, 8, 8],
        channels: 8,
        descriptors: 4,
        classes: 3,
        variant,
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::new(cfg, 31)?;
    let names: Vec<String> = model.params().iter().map(|(n, _, _)| n.to_string()).collect();
    for n in names {
        if n.ends_with(".alpha") {
            model.params_mut().set_values(&n, &[0.6])?;
        } else if n.ends_with(".beta") && !n.contains(".bn.") {
            model.params_mut().set_values(&n, &[0.8])?;
        }
    }
    let x = random(&[2, 3, 32, 32], 32, -1.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let labels: Vec<u8> = (0..2 * 32 * 32).map(|_| rng.gen_range(0..3)).collect();
    let opts = GradCheckOptions {
        eps: 1e-4,
        tol: 1e-4,
        max_coords_per_input: Some(3),
        seed: 34,
        corrupt,
    };
    grad_check_params(
        &mut model,
        |m| m.params_mut(),
        |m, tape: &mut Tape<f64>| {
            let xv = tape.constant(x.clone());
            let y = m.forward(tape, xv, true)?;
            tape.cross_entropy(y, &labels, Some(IGNORE_LABEL))
        },
        &opts,
    )
}

fn run_case(name: &'static str, corrupt: bool) -> Result<GradCase> {
    if let Some(v) = name.strip_prefix("pipeline_") {
        let variant: Variant = v.parse()?;
        return Ok(GradCase {
            name,
            tol: 1e-4,
            report: pipeline_case(variant, corrupt)?,
        });
    }
    let opts = tight(corrupt);
    let report = match name {
        "sab" | "sdm" | "channel_resample" | "spatial_gate" | "cfb" | "cfb_lite" => block_case(name, &opts)?,
        _ => primitive(name, &opts)?,
    };
    Ok(GradCase { name, tol: opts.tol, report })
}

/// Runs the cases selected by `filter` (all when `None`). `corrupt` names a
/// case whose analytic gradient is deliberately perturbed.
pub fn gradcheck_suite(filter: Option<&[String]>, corrupt: Option<&str>) -> Result<Vec<GradCase>> {
    for name in filter.into_iter().flatten().map(String::as_str).chain(corrupt) {
        if !CASES.contains(&name) {
            return Err(Error::Config(format!(
                "unknown gradient case `{name}` (expected one of {})",
                CASES.join(", ")
            )));
        }
    }
    CASES
        .iter()
        .filter(|c| filter.is_none_or(|f| f.iter().any(|n| n == *c)))
        .map(|&c| run_case(c, corrupt == Some(c)))
        .collect()
}
