use std::collections::BTreeMap;

use super::config::{ModelConfig, Variant};
use crate::blocks::{BlockConfig, Cfb, Sab, Sdm};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, ConvKind, Ctx, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Strided CNN producing stride 4, 8, 16 and 32 feature maps.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: [ConvBnRelu; 2],
    stages: Vec<[ConvBnRelu; 2]>,
}

impl Encoder {
    fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, widths: &[usize; 4]) -> Result<Self> {
        let w0 = widths[0];
        let stem = [
            ConvBnRelu::new(store, seed, "encoder.stem.0", ConvKind::Standard3x3, 3, w0, 2)?,
            ConvBnRelu::new(store, seed, "encoder.stem.1", ConvKind::Standard3x3, w0, w0, 2)?,
        ];
        let stages = (1..4)
            .map(|i| {
                let (cin, cout) = (widths[i - 1], widths[i]);
                Ok([
                    ConvBnRelu::new(store, seed, &format!("encoder.stage{i}.0"), ConvKind::Standard3x3, cin, cout, 1)?,
                    ConvBnRelu::new(store, seed, &format!("encoder.stage{i}.1"), ConvKind::Standard3x3, cout, cout, 2)?,
                ])
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { stem, stages })
    }

    /// Returns `[s4, s8, s16, s32]`.
    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, image: Var) -> Result<[Var; 4]> {
        let s = cx.tape.shape(image).to_vec();
        let [_, 3, h, w] = s[..] else {
            return Err(Error::dim("encode", format!("image batch {s:?} is not B×3×H×W")));
        };
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Contract(format!(
                "input {h}×{w} is not divisible by 32; pad before encoding"
            )));
        }
        let mut x = image;
        for unit in &self.stem {
            x = unit.forward(cx, x).map_err(|e| e.in_stage("encoder.stem"))?;
        }
        let mut outs = [x; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            for unit in stage {
                x = unit.forward(cx, x).map_err(|e| e.in_stage(&format!("encoder.stage{}", i + 1)))?;
            }
            outs[i + 1] = x;
        }
        Ok(outs)
    }
}

#[derive(Clone, Debug)]
enum Decoder {
    Fpn {
        merges: Vec<ConvBnRelu>,
    },
    Minus {
        sab: Sab,
        sdms: Vec<Sdm>,
        merges: Vec<ConvBnRelu>,
    },
    Straight {
        sab: Sab,
        cfbs: Vec<Cfb>,
    },
    Dense {
        sabs: Vec<Sab>,
        /// `cfbs[level][step]`, named `CFB{level+1}_{step+1}`.
        cfbs: Vec<Vec<Cfb>>,
    },
}

/// Decoder outputs at 1/32, 1/16, 1/8 and 1/4 scale.
type Pyramid = [Var; 4];

fn merge_kind(lite: bool) -> ConvKind {
    if lite {
        ConvKind::Separable3x3
    } else {
        ConvKind::Standard3x3
    }
}

fn up_to<T: Real>(cx: &mut Ctx<'_, T>, x: Var, like: Var) -> Result<Var> {
    let s = cx.tape.shape(like).to_vec();
    cx.tape.resize(x, s[2], s[3])
}

impl Decoder {
    fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, cfg: &ModelConfig) -> Result<Self> {
        let bc: BlockConfig = cfg.block_config();
        let c = cfg.channels;
        let merges = |store: &mut ParamStore<T>, prefix: &str| -> Result<Vec<ConvBnRelu>> {
            (1..=3)
                .map(|i| ConvBnRelu::new(store, seed, &format!("{prefix}{i}"), merge_kind(cfg.lite), c, c, 1))
                .collect()
        };
        Ok(match cfg.variant {
            Variant::FpnBaseline => Decoder::Fpn {
                merges: merges(store, "decoder.topdown")?,
            },
            Variant::AglnMinus => Decoder::Minus {
                sab: Sab::new(store, seed, "decoder.sab", &bc)?,
                sdms: (1..=3)
                    .map(|i| Sdm::new(store, seed, &format!("decoder.sdm{i}"), &bc))
                    .collect::<Result<_>>()?,
                merges: merges(store, "decoder.merge")?,
            },
            Variant::AglnStraight => Decoder::Straight {
                sab: Sab::new(store, seed, "decoder.sab", &bc)?,
                cfbs: (1..=3)
                    .map(|i| Cfb::new(store, seed, &format!("decoder.cfb{i}"), &bc))
                    .collect::<Result<_>>()?,
            },
            Variant::AglnDense => Decoder::Dense {
                sabs: (1..=3)
                    .map(|t| Sab::new(store, seed, &format!("decoder.sab_{t}"), &bc))
                    .collect::<Result<_>>()?,
                cfbs: (1..=3)
                    .map(|level| {
                        (1..=4 - level)
                            .map(|step| Cfb::new(store, seed, &format!("decoder.cfb{level}_{step}"), &bc))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?,
            },
        })
    }

    /// `lat` is `[L4, L8, L16, L32]`.
    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, lat: [Var; 4]) -> Result<Pyramid> {
        // Level 1, 2, 3 fuse with L16, L8, L4.
        let lateral = |level: usize| lat[3 - level];
        let top = lat[3];
        match self {
            Decoder::Fpn { merges } => {
                let mut prev = top;
                let mut out = [top; 4];
                for (i, merge) in merges.iter().enumerate() {
                    let level = i + 1;
                    let stage = format!("TOPDOWN_{level}");
                    cx.trace.push(stage.clone());
                    let up = up_to(cx, prev, lateral(level)).map_err(|e| e.in_stage(&stage))?;
                    let sum = cx.tape.add(up, lateral(level)).map_err(|e| e.in_stage(&stage))?;
                    prev = merge.forward(cx, sum).map_err(|e| e.in_stage(&stage))?;
                    cx.tap(format!("output_{level}"), prev);
                    out[level] = prev;
                }
                Ok(out)
            }
            Decoder::Minus { sab, sdms, merges } => {
                cx.trace.push("SAB".into());
                let d = sab.forward(cx, top).map_err(|e| e.in_stage("SAB"))?.descriptors;
                let mut prev = top;
                let mut out = [top; 4];
                for (i, (sdm, merge)) in sdms.iter().zip(merges).enumerate() {
                    let level = i + 1;
                    let stage = format!("SDM_{level}");
                    cx.trace.push(stage.clone());
                    let up = up_to(cx, prev, lateral(level)).map_err(|e| e.in_stage(&stage))?;
                    let s = sdm.forward(cx, d, up).map_err(|e| e.in_stage(&stage))?;
                    let sum = cx.tape.add(s.enhanced, lateral(level)).map_err(|e| e.in_stage(&stage))?;
                    prev = merge.forward(cx, sum).map_err(|e| e.in_stage(&stage))?;
                    cx.tap(format!("descriptor_map_{level}"), s.distributed);
                    cx.tap(format!("enhanced_{level}"), s.enhanced);
                    cx.tap(format!("output_{level}"), prev);
                    out[level] = prev;
                }
                Ok(out)
            }
            Decoder::Straight { sab, cfbs } => {
                cx.trace.push("SAB".into());
                let d = sab.forward(cx, top).map_err(|e| e.in_stage("SAB"))?.descriptors;
                let mut prev = top;
                let mut out = [top; 4];
                for (i, cfb) in cfbs.iter().enumerate() {
                    let level = i + 1;
                    let stage = format!("CFB_{level}");
                    let up = up_to(cx, prev, lateral(level)).map_err(|e| e.in_stage(&stage))?;
                    prev = run_cfb(cx, cfb, &stage, level, None, d, up, lateral(level))?;
                    out[level] = prev;
                }
                Ok(out)
            }
            Decoder::Dense { sabs, cfbs } => {
                // latest[level] holds the newest output of that level.
                let mut latest: Vec<Option<Var>> = vec![None; 4];
                latest[0] = Some(top);
                let mut deepest = top;
                for t in 1..=3 {
                    let stage = format!("SAB_{t}");
                    cx.trace.push(stage.clone());
                    let d = sabs[t - 1].forward(cx, deepest).map_err(|e| e.in_stage(&stage))?.descriptors;
                    for level in 1..=t {
                        let step = t - level + 1;
                        let stage = format!("CFB{level}_{step}");
                        let a = match latest[level] {
                            // Re-refine this level with fresher descriptors.
                            Some(prev) => prev,
                            None => {
                                let coarser = latest[level - 1].expect("coarser level computed first");
                                up_to(cx, coarser, lateral(level)).map_err(|e| e.in_stage(&stage))?
                            }
                        };
                        let o = run_cfb(cx, &cfbs[level - 1][step - 1], &stage, level, Some(step), d, a, lateral(level))?;
                        latest[level] = Some(o);
                    }
                    deepest = latest[t].expect("level t computed at step t");
                }
                Ok([top, latest[1].unwrap(), latest[2].unwrap(), latest[3].unwrap()])
            }
        }
    }
}

/// Taps are named by level; dense decoders also tap each step as
/// `{kind}_{level}_{step}`, and the plain name holds the latest step.
#[allow(clippy::too_many_arguments)]
fn run_cfb<T: Real>(
    cx: &mut Ctx<'_, T>,
    cfb: &Cfb,
    stage: &str,
    level: usize,
    step: Option<usize>,
    d: Var,
    a: Var,
    b: Var,
) -> Result<Var> {
    cx.trace.push(stage.to_string());
    let o = cfb.forward(cx, d, a, b).map_err(|e| e.in_stage(stage))?;
    for (kind, v) in [
        ("descriptor_map", o.distributed),
        ("enhanced", o.enhanced),
        ("refined", o.refined),
        ("output", o.output),
    ] {
        cx.tap(format!("{kind}_{level}"), v);
        if let Some(step) = step {
            cx.tap(format!("{kind}_{level}_{step}"), v);
        }
    }
    Ok(o.output)
}

/// Result of a forward pass with optional introspection.
pub struct Forward {
    pub logits: Var,
    pub trace: Vec<String>,
    pub taps: BTreeMap<String, Var>,
}

/// Encoder, laterals, decoder and segmentation head with their parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Encoder,
    laterals: Vec<ConvBnRelu>,
    decoder: Decoder,
    head: ConvBnRelu,
    classifier: Conv2d,
}

const LATERAL_STRIDES: [usize; 4] = [4, 8, 16, 32];

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let store = &mut params;
        let encoder = Encoder::new(store, seed, &config.encoder_widths)?;
        let c = config.channels;
        let laterals = config
            .encoder_widths
            .iter()
            .zip(LATERAL_STRIDES)
            .map(|(&w, s)| ConvBnRelu::new(store, seed, &format!("lateral{s}"), ConvKind::Standard3x3, w, c, 1))
            .collect::<Result<_>>()?;
        let decoder = Decoder::new(store, seed, &config)?;
        let head = ConvBnRelu::new(store, seed, "head.merge", ConvKind::Standard3x3, 4 * c, c, 1)?;
        let classifier = Conv2d::new(store, seed, "head.classifier", ConvKind::Pointwise, c, config.classes, 1, true)?;
        Ok(Model {
            config,
            params,
            encoder,
            laterals,
            decoder,
            head,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Number of parameter elements, buffers excluded.
    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Runs the encoder alone and returns `[s4, s8, s16, s32]`.
    pub fn encode(&mut self, tape: &mut Tape<T>, image: Var, train: bool) -> Result<[Var; 4]> {
        let mut cx = Ctx::new(tape, &mut self.params, train);
        self.encoder.forward(&mut cx, image)
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, image: Var, train: bool) -> Result<Var> {
        Ok(self.forward_full(tape, image, train, false)?.logits)
    }

    /// Forward pass that also reports the block trace and, when `taps` is
    /// set, the named intermediate feature maps.
    pub fn forward_full(&mut self, tape: &mut Tape<T>, image: Var, train: bool, taps: bool) -> Result<Forward> {
        let mut cx = Ctx::new(tape, &mut self.params, train);
        if taps {
            cx.taps = Some(BTreeMap::new());
        }
        let s = cx.tape.shape(image).to_vec();
        let enc = self.encoder.forward(&mut cx, image)?;
        let mut lat = enc;
        for (i, (l, &x)) in self.laterals.iter().zip(&enc).enumerate() {
            let name = format!("lateral_{}", LATERAL_STRIDES[i]);
            lat[i] = l.forward(&mut cx, x).map_err(|e| e.in_stage(&name))?;
            cx.tap(name, lat[i]);
        }
        let pyramid = self.decoder.forward(&mut cx, lat)?;
        let (qh, qw) = (s[2] / 4, s[3] / 4);
        let heads = pyramid
            .iter()
            .map(|&p| cx.tape.resize(p, qh, qw))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("head"))?;
        let cat = cx.tape.concat_channels(&heads).map_err(|e| e.in_stage("head"))?;
        let merged = self.head.forward(&mut cx, cat).map_err(|e| e.in_stage("head"))?;
        let logits = self.classifier.forward(&mut cx, merged).map_err(|e| e.in_stage("head"))?;
        let logits = cx.tape.resize(logits, s[2], s[3]).map_err(|e| e.in_stage("head"))?;
        Ok(Forward {
            logits,
            trace: std::mem::take(&mut cx.trace),
            taps: cx.taps.take().unwrap_or_default(),
        })
    }

    /// Evaluation-mode logits for a `B×3×H×W` batch.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let logits = self.forward(&mut tape, x, false)?;
        Ok(tape.tensor(logits))
    }

    /// A copy of this model with every tensor converted to `U`.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            laterals: self.laterals.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
            classifier: self.classifier.clone(),
        }
    }
}
