use std::collections::BTreeMap;

use super::params::{init_uniform, ParamId, ParamKind, ParamStore};
use crate::error::Result;
use crate::tensor::{ConvSpec, Real, Tape, Tensor, Var};

/// Mutable state threaded through one forward pass.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a mut ParamStore<T>,
    pub train: bool,
    /// Names of the decoder blocks in invocation order.
    pub trace: Vec<String>,
    /// Named intermediate feature maps, recorded when enabled.
    pub taps: Option<BTreeMap<String, Var>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a mut ParamStore<T>, train: bool) -> Self {
        Ctx {
            tape,
            params,
            train,
            trace: Vec::new(),
            taps: None,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        if let Some(taps) = self.taps.as_mut() {
            taps.insert(name.into(), v);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Pointwise,
    Standard3x3,
    /// Depthwise 3×3 followed by a pointwise projection.
    Separable3x3,
}

/// A 2-D convolution in one of the three shapes the network uses.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    weight: ParamId,
    depthwise: Option<ParamId>,
    bias: Option<ParamId>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let (weight, depthwise) = match kind {
            ConvKind::Pointwise | ConvKind::Standard3x3 => {
                let k = if kind == ConvKind::Pointwise { 1 } else { 3 };
                let shape = [out_channels, in_channels, k, k];
                let w = init_uniform(seed, &format!("{name}.weight"), &shape, in_channels * k * k);
                (store.add(&format!("{name}.weight"), w, ParamKind::Trainable)?, None)
            }
            ConvKind::Separable3x3 => {
                let dw_name = format!("{name}.depthwise");
                let dw = init_uniform(seed, &dw_name, &[in_channels, 1, 3, 3], 9);
                let dw = store.add(&dw_name, dw, ParamKind::Trainable)?;
                let pw_name = format!("{name}.weight");
                let pw = init_uniform(seed, &pw_name, &[out_channels, in_channels, 1, 1], in_channels);
                (store.add(&pw_name, pw, ParamKind::Trainable)?, Some(dw))
            }
        };
        let bias = if bias {
            let fan_in = match kind {
                ConvKind::Standard3x3 => in_channels * 9,
                _ => in_channels,
            };
            let b = init_uniform(seed, &format!("{name}.bias"), &[out_channels], fan_in);
            Some(store.add(&format!("{name}.bias"), b, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Conv2d {
            kind,
            in_channels,
            out_channels,
            stride,
            weight,
            depthwise,
            bias,
        })
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|id| cx.param(id));
        match self.kind {
            ConvKind::Pointwise => cx.tape.conv2d(x, w, b, ConvSpec { stride: self.stride, ..ConvSpec::POINTWISE }),
            ConvKind::Standard3x3 => cx.tape.conv2d(x, w, b, ConvSpec { stride: self.stride, ..ConvSpec::SAME }),
            ConvKind::Separable3x3 => {
                let dw = cx.param(self.depthwise.expect("separable conv has a depthwise kernel"));
                let spec = ConvSpec {
                    stride: self.stride,
                    pad: 1,
                    depthwise: true,
                };
                let mid = cx.tape.conv2d(x, dw, None, spec)?;
                cx.tape.conv2d(mid, w, b, ConvSpec::POINTWISE)
            }
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalisation with running statistics kept as store buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            channels,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[channels], T::one()), ParamKind::Trainable)?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Trainable)?,
            running_mean: store.add(&format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer)?,
            running_var: store.add(&format!("{name}.running_var"), Tensor::full(&[channels], T::one()), ParamKind::Buffer)?,
        })
    }

    /// Train mode normalises with batch statistics and folds them into the
    /// running estimates; eval mode applies the running estimates.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        if cx.train {
            let (y, mean, var) = cx.tape.batch_norm_train(x, gamma, beta, self.eps)?;
            let s = cx.tape.shape(x);
            let n = s[0] * s[2..].iter().product::<usize>();
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let m = T::of(self.momentum);
            let keep = T::one() - m;
            let rm = cx.params.tensor_mut(self.running_mean).data_mut();
            for (r, &v) in rm.iter_mut().zip(&mean) {
                *r = keep * *r + m * v;
            }
            let rv = cx.params.tensor_mut(self.running_var).data_mut();
            for (r, &v) in rv.iter_mut().zip(&var) {
                *r = keep * *r + m * v * T::of(unbias);
            }
            Ok(y)
        } else {
            let mean = cx.params.tensor(self.running_mean).data().to_vec();
            let var = cx.params.tensor(self.running_var).data().to_vec();
            cx.tape.batch_norm_eval(x, gamma, beta, &mean, &var, self.eps)
        }
    }
}

/// Convolution (no bias) → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, seed, &format!("{name}.conv"), kind, in_channels, out_channels, stride, false)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), out_channels)?;
        Ok(ConvBnRelu { conv, bn })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(cx.tape.relu(y))
    }
}
