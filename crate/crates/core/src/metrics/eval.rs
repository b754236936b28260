use std::thread;

use super::confusion::ConfusionAccumulator;
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::kernels::resize_forward;
use crate::tensor::{Real, Tensor};

/// The fixed evaluation grid spanning `[0.5, 2.0]`.
pub const MULTI_SCALES: [f64; 7] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];

/// Per-pixel argmax over the class axis of a `K×H×W` map; ties go to the
/// lower class.
pub fn argmax_classes<T: Real>(logits: &[T], classes: usize, plane: usize) -> Vec<u8> {
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..classes {
                if logits[k * plane + p] > logits[best * plane + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

fn flip_planes<T: Copy>(x: &mut [T], w: usize) {
    for row in x.chunks_mut(w) {
        row.reverse();
    }
}

/// Eval-mode logits `K×H×W` for one `3×H×W` image of any size: the image is
/// padded with its channel means up to a multiple of 32 and the logits are
/// cropped back.
pub fn padded_logits<T: Real>(model: &mut Model<T>, image: &[T], h: usize, w: usize) -> Result<Vec<T>> {
    let (ph, pw) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
    let mut input = vec![T::zero(); 3 * ph * pw];
    for c in 0..3 {
        let plane = &image[c * h * w..(c + 1) * h * w];
        let mean = plane.iter().copied().sum::<T>() / T::of((h * w) as f64);
        for y in 0..ph {
            for x in 0..pw {
                input[(c * ph + y) * pw + x] = if y < h && x < w { plane[y * w + x] } else { mean };
            }
        }
    }
    let logits = model.predict(&Tensor::new(&[1, 3, ph, pw], input)?)?;
    let k = model.config().classes;
    if (ph, pw) == (h, w) {
        return Ok(logits.into_data());
    }
    let d = logits.data();
    let mut out = Vec::with_capacity(k * h * w);
    for c in 0..k {
        for y in 0..h {
            out.extend_from_slice(&d[(c * ph + y) * pw..(c * ph + y) * pw + w]);
        }
    }
    Ok(out)
}

/// Averages the logits of every scale (and mirrored copy when `flip`) at the
/// original resolution, then takes the per-pixel argmax.
pub fn multi_scale_eval<T: Real>(model: &mut Model<T>, image: &Tensor<T>, scales: &[f64], flip: bool) -> Result<Vec<u8>> {
    if scales.is_empty() {
        return Err(Error::Config("at least one evaluation scale is required".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::Config(format!("evaluation scale {s} must be positive")));
    }
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::dim("multi_scale_eval", format!("expected 3×H×W, got {:?}", image.shape())));
    };
    let k = model.config().classes;
    let mut sum = vec![T::zero(); k * h * w];
    let mut passes = 0usize;
    for &s in scales {
        let sh = ((h as f64 * s).round() as usize).max(1);
        let sw = ((w as f64 * s).round() as usize).max(1);
        let scaled = resize_forward(image.data(), 3, h, w, sh, sw);
        for mirrored in [false, true] {
            if mirrored && !flip {
                continue;
            }
            let mut input = scaled.clone();
            if mirrored {
                flip_planes(&mut input, sw);
            }
            let mut logits = padded_logits(model, &input, sh, sw)?;
            if mirrored {
                flip_planes(&mut logits, sw);
            }
            let back = resize_forward(&logits, k, sh, sw, h, w);
            for (a, b) in sum.iter_mut().zip(&back) {
                *a = *a + *b;
            }
            passes += 1;
        }
    }
    let inv = T::of(passes as f64);
    for v in &mut sum {
        *v = *v / inv;
    }
    Ok(argmax_classes(&sum, k, h * w))
}

/// Single-scale prediction for one `3×H×W` image.
pub fn predict_mask<T: Real>(model: &mut Model<T>, image: &Tensor<T>) -> Result<Vec<u8>> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::dim("predict_mask", format!("expected 3×H×W, got {:?}", image.shape())));
    };
    let logits = padded_logits(model, image.data(), h, w)?;
    Ok(argmax_classes(&logits, model.config().classes, h * w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Empty means single-scale.
    pub scales: Vec<f64>,
    pub flip: bool,
    /// Worker count; results do not depend on it.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            scales: Vec::new(),
            flip: false,
            threads: 1,
        }
    }
}

fn eval_shard(model: &mut Model<f32>, samples: &[SegSample], opts: &EvalOptions) -> Result<ConfusionAccumulator> {
    let mut acc = ConfusionAccumulator::new(model.config().classes);
    for s in samples {
        let pred = if opts.scales.is_empty() && !opts.flip {
            predict_mask(model, &s.image)?
        } else {
            let scales = if opts.scales.is_empty() { &[1.0][..] } else { &opts.scales };
            multi_scale_eval(model, &s.image, scales, opts.flip)?
        };
        acc.accumulate(&pred, &s.mask)?;
    }
    Ok(acc)
}

/// Confusion matrix of `model` over `samples`, sharded across
/// `opts.threads` scoped workers and merged.
pub fn evaluate(model: &Model<f32>, samples: &[SegSample], opts: &EvalOptions) -> Result<ConfusionAccumulator> {
    let threads = opts.threads.clamp(1, samples.len().max(1));
    let chunk = samples.len().div_ceil(threads).max(1);
    let parts: Vec<Result<ConfusionAccumulator>> = if threads == 1 {
        vec![eval_shard(&mut model.clone(), samples, opts)]
    } else {
        thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| {
                    let mut local = model.clone();
                    scope.spawn(move || eval_shard(&mut local, part, opts))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("evaluation worker panicked".into()))))
                .collect()
        })
    };
    let mut acc = ConfusionAccumulator::new(model.config().classes);
    for p in parts {
        acc.merge(&p?)?;
    }
    Ok(acc)
}
