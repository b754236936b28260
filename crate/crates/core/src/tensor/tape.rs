use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride, padding and grouping of a 3×3 or 1×1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    /// One filter per input channel (`groups == in_channels`).
    pub depthwise: bool,
}

impl ConvSpec {
    pub const SAME: ConvSpec = ConvSpec {
        stride: 1,
        pad: 1,
        depthwise: false,
    };
    pub const POINTWISE: ConvSpec = ConvSpec {
        stride: 1,
        pad: 0,
        depthwise: false,
    };
}

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    ScaleBy {
        s: Var,
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch: usize,
        channels: usize,
        plane: usize,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch: usize,
        channels: usize,
        plane: usize,
    },
    Resize {
        x: Var,
        planes: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },
    Concat {
        parts: Vec<Var>,
        batch: usize,
        chunk: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u8>,
        ignore: Option<u8>,
        probs: Vec<T>,
        count: usize,
        batch: usize,
        classes: usize,
        plane: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Scale { .. } => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Conv { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ChannelAffine { .. } => "batch_norm_eval",
            Op::Resize { .. } => "bilinear_resize",
            Op::Concat { .. } => "concat",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Ordered record of executed primitives. Nodes are appended in execution
/// order, so index order is a topological order of the graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    relu_signature: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            relu_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.data.clone()).expect("tape node shape is consistent")
    }

    /// Records a leaf. It participates in differentiation when the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf { param: None }, false)
    }

    /// Records a model parameter as a leaf linked back to its store slot.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.tensor(id);
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            t.requires_grad(),
        )
    }

    /// Floating-point operations recorded so far: 2 per multiply-accumulate
    /// for matmul and convolution, 1 per output element for normalisation,
    /// activations, softmax, elementwise ops and resizing. Shape-only ops
    /// and same-size resizes count 0.
    pub fn flop_tally(&self) -> u64 {
        self.nodes
            .iter()
            .map(|node| {
                let out = node.data.len() as u64;
                match &node.op {
                    Op::Leaf { .. } | Op::Transpose { .. } | Op::Reshape { .. } | Op::Concat { .. } => 0,
                    Op::MatMul { batch, m, k, n, .. } => 2 * (batch * m * k * n) as u64,
                    Op::Conv { bias, geom, .. } => {
                        let per_out = if geom.depthwise { geom.k * geom.k } else { geom.cin * geom.k * geom.k };
                        2 * (per_out as u64) * out + if bias.is_some() { out } else { 0 }
                    }
                    Op::Resize {
                        in_h, in_w, out_h, out_w, ..
                    } => {
                        if (in_h, in_w) == (out_h, out_w) {
                            0
                        } else {
                            out
                        }
                    }
                    Op::Sum { x } | Op::Mean { x } => self.node(*x).data.len() as u64,
                    Op::CrossEntropy { probs, .. } => probs.len() as u64,
                    _ => out,
                }
            })
            .sum()
    }

    /// Hash of the sign pattern of every ReLU input recorded so far. Two
    /// evaluations with equal signatures took the same side of every kink.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    /// Name of the first primitive whose output holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.data.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.node(v).op.name()
    }

    // ---- primitives ------------------------------------------------------

    /// `[m×k]·[k×n]`, or batched `[B×m×k]·[B×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb => (*ba, *m, *k, *k2, *n),
            _ => {
                return Err(Error::dim(
                    "matmul",
                    format!("cannot multiply {sa:?} by {sb:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {sa:?} × {sb:?}"),
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    false,
                    &bv[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, batch, m, k, n }, ng))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, rows, cols) = match s[..] {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            _ => return Err(Error::dim("transpose", format!("rank of {s:?} is not 2 or 3"))),
        };
        let out = transpose_blocks(self.value(x), batch, rows, cols);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Transpose { x, batch, rows, cols }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }, ng))
    }

    /// Exp-normalises every slice along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Index(format!(
                "softmax axis {axis} out of range for rank {}",
                s.len()
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let y = kernels::softmax_forward(self.value(x), outer, len, inner);
        let ng = self.ng(x);
        Ok(self.push(s, y, Op::Softmax { x, outer, len, inner }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p * q)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut sig = self.relu_signature;
        let out = self
            .value(x)
            .iter()
            .map(|&v| {
                let on = v > T::zero();
                sig = (sig ^ on as u64).wrapping_mul(0x0100_0000_01b3);
                if on {
                    v
                } else {
                    T::zero()
                }
            })
            .collect();
        self.relu_signature = sig;
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu { x }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = T::one();
        let out = self
            .value(x)
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid { x }, ng)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out = self.value(x).iter().map(|&v| v * f).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor: f }, ng)
    }

    /// Multiplies `x` by the single value held in `s` (scalar·tensor).
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(
                "scale_by",
                format!("scale factor must hold one value, got shape {:?}", self.shape(s)),
            ));
        }
        let f = self.value(s)[0];
        let out = self.value(x).iter().map(|&v| f * v).collect();
        let ng = self.ng(s) || self.ng(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleBy { s, x }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![], vec![total], Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let total = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        let ng = self.ng(x);
        self.push(vec![], vec![total], Op::Mean { x }, ng)
    }

    /// Cross-correlation of a `B×Cin×H×W` batch with a `Cout×Cin×k×k`
    /// kernel (`Cin×1×k×k` when depthwise), zero padded.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [batch, cin, h, wd] = xs[..] else {
            return Err(Error::dim("conv2d", format!("input {xs:?} is not B×C×H×W")));
        };
        let [cout, wcin, k, k2] = ws[..] else {
            return Err(Error::dim("conv2d", format!("weight {ws:?} is not O×I×k×k")));
        };
        if k != k2 {
            return Err(Error::dim("conv2d", format!("non-square kernel {ws:?}")));
        }
        let expect_cin = if spec.depthwise { 1 } else { cin };
        if wcin != expect_cin || (spec.depthwise && cout != cin) {
            return Err(Error::dim(
                "conv2d",
                format!("input has {cin} channels but weight is {ws:?}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} does not match {cout} outputs", self.shape(b)),
                ));
            }
        }
        if h + 2 * spec.pad < k || wd + 2 * spec.pad < k || spec.stride == 0 {
            return Err(Error::dim("conv2d", format!("input {xs:?} too small for kernel {k}")));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride: spec.stride,
            pad: spec.pad,
            ho: (h + 2 * spec.pad - k) / spec.stride + 1,
            wo: (wd + 2 * spec.pad - k) / spec.stride + 1,
            depthwise: spec.depthwise,
        };
        let out = kernels::conv_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let ng = self.ng(x) || self.ng(w) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            vec![batch, cout, geom.ho, geom.wo],
            out,
            Op::Conv { x, w, bias, geom },
            ng,
        ))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::dim("batch_norm", format!("input {s:?} has no channel axis")));
        }
        let (batch, channels) = (s[0], s[1]);
        let plane: usize = s[2..].iter().product();
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(Error::dim(
                "batch_norm",
                format!(
                    "input has {channels} channels, parameters are {:?}/{:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((batch, channels, plane))
    }

    /// Training-mode batch normalisation over `(B, H, W)`. Returns the output
    /// together with the batch mean and biased variance per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (batch, channels, plane) = self.bn_dims(x, gamma, beta)?;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let count = T::of((batch * plane) as f64);
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        for c in 0..channels {
            let mut s = T::zero();
            for b in 0..batch {
                let at = (b * channels + c) * plane;
                s = s + xv[at..at + plane].iter().copied().sum::<T>();
            }
            let mu = s / count;
            let mut q = T::zero();
            for b in 0..batch {
                let at = (b * channels + c) * plane;
                q = q + xv[at..at + plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            mean[c] = mu;
            var[c] = q / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for c in 0..channels {
                let at = (b * channels + c) * plane;
                for i in at..at + plane {
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = gv[c] * xhat[i] + bv[c];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let shape = self.shape(x).to_vec();
        let v = self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
                channels,
                plane,
            },
            ng,
        );
        Ok((v, mean, var))
    }

    /// Evaluation-mode batch normalisation: a per-channel affine map built
    /// from fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (batch, channels, plane) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != channels || var.len() != channels {
            return Err(Error::dim("batch_norm", "running statistics width mismatch"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for c in 0..channels {
                let at = (b * channels + c) * plane;
                for i in at..at + plane {
                    out[i] = gv[c] * ((xv[i] - mean[c]) * inv_std[c]) + bv[c];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                batch,
                channels,
                plane,
            },
            ng,
        ))
    }

    /// Half-pixel bilinear resize of the trailing two axes.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(
                "bilinear_resize",
                format!("cannot resize {s:?} to {out_h}×{out_w}"),
            ));
        }
        let (in_h, in_w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let out = kernels::resize_forward(self.value(x), planes, in_h, in_w, out_h, out_w);
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        let ng = self.ng(x);
        Ok(self.push(
            shape,
            out,
            Op::Resize {
                x,
                planes,
                in_h,
                in_w,
                out_h,
                out_w,
            },
            ng,
        ))
    }

    /// Concatenates `B×Ci×H×W` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::dim("concat", "nothing to concatenate"))?)
            .to_vec();
        if first.len() != 4 {
            return Err(Error::dim("concat", format!("{first:?} is not B×C×H×W")));
        }
        let mut channels = 0;
        let mut chunk = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} does not stack with {first:?}"),
                ));
            }
            channels += s[1];
            chunk.push(s[1] * s[2] * s[3]);
        }
        let batch = first[0];
        let total: usize = chunk.iter().sum();
        let mut out = Vec::with_capacity(batch * total);
        for b in 0..batch {
            for (&p, &len) in parts.iter().zip(&chunk) {
                out.extend_from_slice(&self.value(p)[b * len..(b + 1) * len]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            vec![batch, channels, first[2], first[3]],
            out,
            Op::Concat {
                parts: parts.to_vec(),
                batch,
                chunk,
            },
            ng,
        ))
    }

    /// Mean pixel-wise cross-entropy of `B×K×H×W` logits against `B×H×W`
    /// class ids. Pixels equal to `ignore` are excluded; with nothing left
    /// the loss is 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8], ignore: Option<u8>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [batch, classes, h, w] = s[..] else {
            return Err(Error::dim("cross_entropy", format!("logits {s:?} are not B×K×H×W")));
        };
        let plane = h * w;
        if targets.len() != batch * plane {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for logits {s:?}", targets.len()),
            ));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for b in 0..batch {
            for p in 0..plane {
                let t = targets[b * plane + p];
                if Some(t) == ignore {
                    continue;
                }
                if t as usize >= classes {
                    return Err(Error::Data(format!(
                        "target class {t} at pixel {p} of sample {b} is not below K={classes}"
                    )));
                }
                let at = |k: usize| (b * classes + k) * plane + p;
                let mx = (0..classes).map(|k| lv[at(k)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..classes).map(|k| (lv[at(k)] - mx).exp()).sum();
                for k in 0..classes {
                    probs[at(k)] = (lv[at(k)] - mx).exp() / z;
                }
                total = total + (z.ln() + mx - lv[at(t as usize)]);
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        let ng = self.ng(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
                batch,
                classes,
                plane,
            },
            ng,
        ))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse-mode differentiation of a scalar `loss`. Every node is visited
    /// once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds the gradients of parameter leaves
    /// into their store slots. Repeated calls accumulate.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, &grads.grads[i]) {
                store.tensor_mut(*id).accumulate_grad(g);
            }
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let one = T::one();
        match &node.op {
            Op::Leaf { .. } => {}
            &Op::MatMul { a, b, batch, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        T::gemm(m, n, k, &g[i * m * n..], false, &bv[i * k * n..], true, &mut da[i * m * k..], false);
                    }
                    add_into(&mut grads[a.0], da);
                }
                if self.ng(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        T::gemm(k, m, n, &av[i * m * k..], true, &g[i * m * n..], false, &mut db[i * k * n..], false);
                    }
                    add_into(&mut grads[b.0], db);
                }
            }
            &Op::Transpose { x, batch, rows, cols } => {
                add_into(&mut grads[x.0], transpose_blocks(g, batch, cols, rows));
            }
            &Op::Reshape { x } => add_into(&mut grads[x.0], g.to_vec()),
            &Op::Softmax { x, outer, len, inner } => {
                let y = &node.data;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    let base = o * len * inner;
                    for i in 0..inner {
                        let dot: T = (0..len)
                            .map(|a| g[base + a * inner + i] * y[base + a * inner + i])
                            .sum();
                        for a in 0..len {
                            let at = base + a * inner + i;
                            dx[at] = y[at] * (g[at] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            &Op::Add { a, b } => {
                if self.ng(a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if self.ng(b) {
                    add_into(&mut grads[b.0], g.to_vec());
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.ng(a) {
                    add_into(&mut grads[a.0], g.iter().zip(bv).map(|(&g, &q)| g * q).collect());
                }
                if self.ng(b) {
                    add_into(&mut grads[b.0], g.iter().zip(av).map(|(&g, &p)| g * p).collect());
                }
            }
            &Op::Relu { x } => {
                let xv = self.value(x);
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                add_into(&mut grads[x.0], dx);
            }
            &Op::Sigmoid { x } => {
                let dx = g
                    .iter()
                    .zip(&node.data)
                    .map(|(&g, &s)| g * s * (one - s))
                    .collect();
                add_into(&mut grads[x.0], dx);
            }
            &Op::Scale { x, factor } => {
                add_into(&mut grads[x.0], g.iter().map(|&g| g * factor).collect());
            }
            &Op::ScaleBy { s, x } => {
                let f = self.value(s)[0];
                if self.ng(s) {
                    let ds: T = g.iter().zip(self.value(x)).map(|(&g, &v)| g * v).sum();
                    add_into(&mut grads[s.0], vec![ds; self.value(s).len()]);
                }
                if self.ng(x) {
                    add_into(&mut grads[x.0], g.iter().map(|&g| g * f).collect());
                }
            }
            &Op::Sum { x } => {
                add_into(&mut grads[x.0], vec![g[0]; self.value(x).len()]);
            }
            &Op::Mean { x } => {
                let n = self.value(x).len();
                add_into(&mut grads[x.0], vec![g[0] / T::of(n as f64); n]);
            }
            &Op::Conv { x, w, bias, ref geom } => {
                let want_db = bias.is_some_and(|b| self.ng(b));
                let (dx, dw, db) = kernels::conv_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    geom,
                    self.ng(x),
                    self.ng(w),
                    want_db,
                );
                if let Some(dx) = dx {
                    add_into(&mut grads[x.0], dx);
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[w.0], dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
                channels,
                plane,
            } => {
                let (batch, channels, plane) = (*batch, *channels, *plane);
                let gv = self.value(*gamma);
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let at = (b * channels + c) * plane;
                        for i in at..at + plane {
                            dgamma[c] = dgamma[c] + g[i] * xhat[i];
                            dbeta[c] = dbeta[c] + g[i];
                        }
                    }
                }
                if self.ng(*x) {
                    let count = T::of((batch * plane) as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for c in 0..channels {
                        // dxhat = g·gamma; sums over the channel reuse dbeta/dgamma.
                        let sum_dxhat = dbeta[c] * gv[c];
                        let sum_dxhat_xhat = dgamma[c] * gv[c];
                        let k = inv_std[c] / count;
                        for b in 0..batch {
                            let at = (b * channels + c) * plane;
                            for i in at..at + plane {
                                dx[i] = k * (count * g[i] * gv[c] - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                            }
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                if self.ng(*gamma) {
                    add_into(&mut grads[gamma.0], dgamma);
                }
                if self.ng(*beta) {
                    add_into(&mut grads[beta.0], dbeta);
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch,
                channels,
                plane,
            } => {
                let (batch, channels, plane) = (*batch, *channels, *plane);
                let gv = self.value(*gamma);
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let at = (b * channels + c) * plane;
                        for i in at..at + plane {
                            dx[i] = g[i] * gv[c] * inv_std[c];
                            dgamma[c] = dgamma[c] + g[i] * (xv[i] - mean[c]) * inv_std[c];
                            dbeta[c] = dbeta[c] + g[i];
                        }
                    }
                }
                if self.ng(*x) {
                    add_into(&mut grads[x.0], dx);
                }
                if self.ng(*gamma) {
                    add_into(&mut grads[gamma.0], dgamma);
                }
                if self.ng(*beta) {
                    add_into(&mut grads[beta.0], dbeta);
                }
            }
            &Op::Resize {
                x,
                planes,
                in_h,
                in_w,
                out_h,
                out_w,
            } => {
                let dx = kernels::resize_backward(g, planes, in_h, in_w, out_h, out_w);
                add_into(&mut grads[x.0], dx);
            }
            Op::Concat { parts, batch, chunk } => {
                let total: usize = chunk.iter().sum();
                let mut offset = 0;
                for (&p, &len) in parts.iter().zip(chunk) {
                    if self.ng(p) {
                        let mut dp = Vec::with_capacity(batch * len);
                        for b in 0..*batch {
                            let at = b * total + offset;
                            dp.extend_from_slice(&g[at..at + len]);
                        }
                        add_into(&mut grads[p.0], dp);
                    }
                    offset += len;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
                batch,
                classes,
                plane,
            } => {
                let mut dl = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let scale = g[0] / T::of(*count as f64);
                    for b in 0..*batch {
                        for p in 0..*plane {
                            let t = targets[b * plane + p];
                            if Some(t) == *ignore {
                                continue;
                            }
                            for k in 0..*classes {
                                let at = (b * classes + k) * plane + p;
                                let onehot = if k == t as usize { one } else { T::zero() };
                                dl[at] = (probs[at] - onehot) * scale;
                            }
                        }
                    }
                }
                add_into(&mut grads[logits.0], dl);
            }
        }
    }
}

fn transpose_blocks<T: Real>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = x[base + i * cols + j];
            }
        }
    }
    out
}
