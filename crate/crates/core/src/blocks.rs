//! Decoder blocks: semantic aggregation, semantic distribution, local
//! refinement and context fusion.
//!
//! Every block works on batches (`B×C×H×W`). Descriptors are `B×C×N`.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, ConvKind, Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor, Var};

/// Width, descriptor count and ablation switches shared by all blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    pub descriptors: usize,
    pub gap_mode: bool,
    pub enable_cr: bool,
    pub enable_sg: bool,
    pub alpha_learnable: bool,
    pub beta_learnable: bool,
    pub lite: bool,
}

impl BlockConfig {
    pub fn new(channels: usize, descriptors: usize) -> Self {
        BlockConfig {
            channels,
            descriptors,
            gap_mode: false,
            enable_cr: true,
            enable_sg: true,
            alpha_learnable: true,
            beta_learnable: true,
            lite: false,
        }
    }

    fn fuse_kind(&self) -> ConvKind {
        if self.lite {
            ConvKind::Separable3x3
        } else {
            ConvKind::Standard3x3
        }
    }
}

fn scalar_param<T: Real>(store: &mut ParamStore<T>, name: &str, learnable: bool, init: f64) -> Result<ParamId> {
    let kind = if learnable { ParamKind::Trainable } else { ParamKind::Fixed };
    store.add(name, Tensor::full(&[1], T::of(init)), kind)
}

fn plane_dims<T: Real>(cx: &Ctx<'_, T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match cx.tape.shape(x) {
        &[b, c, h, w] => Ok([b, c, h, w]),
        s => Err(Error::dim(op, format!("{s:?} is not B×C×H×W"))),
    }
}

/// Output of [`Sab::forward`].
#[derive(Clone, Copy, Debug)]
pub struct SabOutput {
    /// `B×C×N` descriptors.
    pub descriptors: Var,
    /// `B×C×HW` projected features.
    pub features: Var,
    /// `B×N×HW` spatial attention, rows sum to one.
    pub attention: Var,
}

/// Semantic aggregation: attention-pooled descriptors `D = X_feat·X_amᵀ`.
#[derive(Clone, Debug)]
pub struct Sab {
    pub channels: usize,
    pub descriptors: usize,
    phi: Conv2d,
    /// Absent in GAP mode, where the attention is uniform.
    theta: Option<Conv2d>,
}

impl Sab {
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let c = cfg.channels;
        let phi = Conv2d::new(store, seed, &format!("{name}.phi"), ConvKind::Pointwise, c, c, 1, true)?;
        let theta = if cfg.gap_mode {
            None
        } else {
            Some(Conv2d::new(
                store,
                seed,
                &format!("{name}.theta"),
                ConvKind::Pointwise,
                c,
                cfg.descriptors,
                1,
                false,
            )?)
        };
        Ok(Sab {
            channels: c,
            descriptors: cfg.descriptors,
            phi,
            theta,
        })
    }

    pub fn gap_mode(&self) -> bool {
        self.theta.is_none()
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<SabOutput> {
        let [b, _, h, w] = plane_dims(cx, x, "semantic_aggregation")?;
        let hw = h * w;
        let feat = self.phi.forward(cx, x)?;
        let features = cx.tape.reshape(feat, &[b, self.channels, hw])?;
        let attention = match &self.theta {
            Some(theta) => {
                let logits = theta.forward(cx, x)?;
                let logits = cx.tape.reshape(logits, &[b, self.descriptors, hw])?;
                cx.tape.softmax(logits, 2)?
            }
            None => {
                let uniform = T::one() / T::of(hw as f64);
                cx.tape.constant(Tensor::full(&[b, self.descriptors, hw], uniform))
            }
        };
        let at = cx.tape.transpose(attention)?;
        let descriptors = cx.tape.matmul(features, at)?;
        Ok(SabOutput {
            descriptors,
            features,
            attention,
        })
    }
}

/// Output of [`Sdm::forward`].
#[derive(Clone, Copy, Debug)]
pub struct SdmOutput {
    /// `B×N×H×W` per-position attention over descriptors.
    pub attention: Var,
    /// Descriptor map `M = D·A_av`, `B×C×H×W`.
    pub distributed: Var,
    /// Enhanced feature `E = Ψ(A + αM)`.
    pub enhanced: Var,
}

/// Semantic distribution of descriptors back onto a feature map.
#[derive(Clone, Debug)]
pub struct Sdm {
    pub channels: usize,
    pub descriptors: usize,
    varphi: Conv2d,
    psi: ConvBnRelu,
    alpha: ParamId,
}

impl Sdm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let (c, n) = (cfg.channels, cfg.descriptors);
        let varphi = Conv2d::new(store, seed, &format!("{name}.varphi"), ConvKind::Pointwise, c, n, 1, true)?;
        let psi = ConvBnRelu::new(store, seed, &format!("{name}.psi"), cfg.fuse_kind(), c, c, 1)?;
        let init = if cfg.alpha_learnable { 0.0 } else { 1.0 };
        let alpha = scalar_param(store, &format!("{name}.alpha"), cfg.alpha_learnable, init)?;
        Ok(Sdm {
            channels: c,
            descriptors: n,
            varphi,
            psi,
            alpha,
        })
    }

    pub fn alpha_id(&self) -> ParamId {
        self.alpha
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, d: Var, a: Var) -> Result<SdmOutput> {
        let [b, c, h, w] = plane_dims(cx, a, "semantic_distribution")?;
        let ds = cx.tape.shape(d).to_vec();
        if ds.len() != 3 || ds[0] != b || ds[1] != c {
            return Err(Error::dim(
                "semantic_distribution",
                format!("descriptors {ds:?} do not match feature {:?}", [b, c, h, w]),
            ));
        }
        if ds[2] != self.descriptors {
            return Err(Error::Config(format!(
                "descriptor count {} does not match the distribution projection width {}",
                ds[2], self.descriptors
            )));
        }
        let logits = self.varphi.forward(cx, a)?;
        let attention = cx.tape.softmax(logits, 1)?;
        let flat = cx.tape.reshape(attention, &[b, self.descriptors, h * w])?;
        let m = cx.tape.matmul(d, flat)?;
        let distributed = cx.tape.reshape(m, &[b, c, h, w])?;
        let alpha = cx.param(self.alpha);
        let am = cx.tape.scale_by(alpha, distributed)?;
        let sum = cx.tape.add(a, am)?;
        let enhanced = self.psi.forward(cx, sum)?;
        Ok(SdmOutput {
            attention,
            distributed,
            enhanced,
        })
    }
}

/// `F = softmax_rows(B·Eᵀ)·B` over channels. Inputs are `B×C×H×W`.
pub fn channel_resample<T: Real>(cx: &mut Ctx<'_, T>, b: Var, e: Var) -> Result<Var> {
    let dims = plane_dims(cx, b, "channel_resample")?;
    if cx.tape.shape(e) != dims {
        return Err(Error::dim(
            "channel_resample",
            format!("encoder {:?} and guidance {:?} differ", dims, cx.tape.shape(e)),
        ));
    }
    let [n, c, h, w] = dims;
    let bf = cx.tape.reshape(b, &[n, c, h * w])?;
    let ef = cx.tape.reshape(e, &[n, c, h * w])?;
    let et = cx.tape.transpose(ef)?;
    let affinity = cx.tape.matmul(bf, et)?;
    let s = cx.tape.softmax(affinity, 2)?;
    let f = cx.tape.matmul(s, bf)?;
    cx.tape.reshape(f, &dims)
}

/// `G = F ⊙ sigmoid(M)`.
pub fn spatial_gate<T: Real>(cx: &mut Ctx<'_, T>, f: Var, m: Var) -> Result<Var> {
    if cx.tape.shape(f) != cx.tape.shape(m) {
        return Err(Error::dim(
            "spatial_gate",
            format!("{:?} and {:?} differ", cx.tape.shape(f), cx.tape.shape(m)),
        ));
    }
    let gate = cx.tape.sigmoid(m);
    cx.tape.mul(f, gate)
}

/// Local refinement of the encoder feature. A disabled stage passes its
/// input through unchanged.
#[derive(Clone, Debug)]
pub struct Lrm {
    pub enable_cr: bool,
    pub enable_sg: bool,
    beta: ParamId,
}

impl Lrm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        Ok(Lrm {
            enable_cr: cfg.enable_cr,
            enable_sg: cfg.enable_sg,
            beta: scalar_param(store, &format!("{name}.beta"), cfg.beta_learnable, 1.0)?,
        })
    }

    pub fn beta_id(&self) -> ParamId {
        self.beta
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, b: Var, e: Var, m: Var) -> Result<Var> {
        let f = if self.enable_cr { channel_resample(cx, b, e)? } else { b };
        if self.enable_sg {
            spatial_gate(cx, f, m)
        } else {
            Ok(f)
        }
    }
}

/// Output of [`Cfb::forward`].
#[derive(Clone, Copy, Debug)]
pub struct CfbOutput {
    pub distributed: Var,
    pub enhanced: Var,
    pub refined: Var,
    pub output: Var,
}

/// Context fusion: `O = Φ(E + β·G)`.
#[derive(Clone, Debug)]
pub struct Cfb {
    pub sdm: Sdm,
    pub lrm: Lrm,
    phi_out: ConvBnRelu,
}

impl Cfb {
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let sdm = Sdm::new(store, seed, &format!("{name}.sdm"), cfg)?;
        let lrm = Lrm::new(store, &format!("{name}.lrm"), cfg)?;
        let c = cfg.channels;
        let phi_out = ConvBnRelu::new(store, seed, &format!("{name}.fuse"), cfg.fuse_kind(), c, c, 1)?;
        Ok(Cfb { sdm, lrm, phi_out })
    }

    /// `a` is the upsampled decoder feature, `b` the lateral encoder feature.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, d: Var, a: Var, b: Var) -> Result<CfbOutput> {
        if cx.tape.shape(a) != cx.tape.shape(b) {
            return Err(Error::dim(
                "context_fusion",
                format!("decoder {:?} and lateral {:?} differ", cx.tape.shape(a), cx.tape.shape(b)),
            ));
        }
        let sdm = self.sdm.forward(cx, d, a)?;
        let refined = self.lrm.forward(cx, b, sdm.enhanced, sdm.distributed)?;
        let beta = cx.param(self.lrm.beta);
        let bg = cx.tape.scale_by(beta, refined)?;
        let sum = cx.tape.add(sdm.enhanced, bg)?;
        let output = self.phi_out.forward(cx, sum)?;
        Ok(CfbOutput {
            distributed: sdm.distributed,
            enhanced: sdm.enhanced,
            refined,
            output,
        })
    }
}
