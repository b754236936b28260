use rand::Rng;

use super::sample::SegSample;
use crate::error::{Error, Result};
use crate::nn::IGNORE_LABEL;
use crate::tensor::kernels::resize_forward;
use crate::tensor::Tensor;

/// Random scale, crop and horizontal flip.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub flip: bool,
    pub scale_range: [f64; 2],
    /// Output `(height, width)`.
    pub crop: (usize, usize),
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0) || hi < lo || !hi.is_finite() {
            return Err(Error::Config(format!(
                "scale_range [{lo}, {hi}] must satisfy 0 < lo <= hi"
            )));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// Bilinear image and nearest-neighbour mask resize.
pub fn rescale(sample: &SegSample, h: usize, w: usize) -> SegSample {
    let (ih, iw) = (sample.height(), sample.width());
    let img = resize_forward(sample.image.data(), 3, ih, iw, h, w);
    let near = |o: usize, inp: usize, out: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = near(y, ih, h);
        for x in 0..w {
            mask.push(sample.mask[sy * iw + near(x, iw, w)]);
        }
    }
    SegSample {
        id: sample.id.clone(),
        image: Tensor::new(&[3, h, w], img).expect("resize keeps the plane count"),
        mask,
    }
}

pub fn hflip(sample: &SegSample) -> SegSample {
    let (h, w) = (sample.height(), sample.width());
    let mut out = sample.clone();
    let src = sample.image.data();
    let dst = out.image.data_mut();
    for row in 0..3 * h {
        for x in 0..w {
            dst[row * w + x] = src[row * w + w - 1 - x];
        }
    }
    for y in 0..h {
        for x in 0..w {
            out.mask[y * w + x] = sample.mask[y * w + w - 1 - x];
        }
    }
    out
}

/// `h×w` window at `(top, left)`; the area beyond the sample is filled with
/// the per-channel mean colour and the ignore label.
pub fn crop(sample: &SegSample, top: usize, left: usize, h: usize, w: usize) -> SegSample {
    let (sh, sw) = (sample.height(), sample.width());
    let src = sample.image.data();
    let mut img = vec![0f32; 3 * h * w];
    let mut mask = vec![IGNORE_LABEL; h * w];
    for c in 0..3 {
        let plane = &src[c * sh * sw..(c + 1) * sh * sw];
        let mean = (plane.iter().map(|&v| f64::from(v)).sum::<f64>() / plane.len() as f64) as f32;
        for y in 0..h {
            for x in 0..w {
                let (yy, xx) = (top + y, left + x);
                img[(c * h + y) * w + x] = if yy < sh && xx < sw { plane[yy * sw + xx] } else { mean };
            }
        }
    }
    for y in 0..h.min(sh.saturating_sub(top)) {
        for x in 0..w.min(sw.saturating_sub(left)) {
            mask[y * w + x] = sample.mask[(top + y) * sw + left + x];
        }
    }
    SegSample {
        id: sample.id.clone(),
        image: Tensor::new(&[3, h, w], img).expect("crop shape"),
        mask,
    }
}

/// Applies `policy`; the result depends only on `sample`, `policy` and the
/// state of `rng`.
pub fn augment(sample: &SegSample, rng: &mut impl Rng, policy: &AugmentPolicy) -> Result<SegSample> {
    policy.validate()?;
    let [lo, hi] = policy.scale_range;
    let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let h = ((sample.height() as f64 * s).round() as usize).max(1);
    let w = ((sample.width() as f64 * s).round() as usize).max(1);
    let scaled = rescale(sample, h, w);
    let (ch, cw) = policy.crop;
    let top = rng.gen_range(0..=h.saturating_sub(ch));
    let left = rng.gen_range(0..=w.saturating_sub(cw));
    let out = crop(&scaled, top, left, ch, cw);
    Ok(if policy.flip && rng.gen_bool(0.5) { hflip(&out) } else { out })
}
