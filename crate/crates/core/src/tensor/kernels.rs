//! Untracked numeric kernels shared by the tape's forward and backward passes.

use super::Real;

/// Geometry of one 2-D convolution over a `B×Cin×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
    pub depthwise: bool,
}

impl ConvGeom {
    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `Cin×H×W` image into a `(Cin·k·k)×(Ho·Wo)` column matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_plane();
    for c in 0..g.cin {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_plane();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] =
                                plane[iy as usize * g.w + ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    if g.depthwise {
        return depthwise_forward(x, w, bias, g);
    }
    let p = g.out_plane();
    let kk = g.cin * g.k * g.k;
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.in_plane()..(b + 1) * g.cin * g.in_plane()];
        let ob = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        let cols_ref: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        T::gemm(g.cout, kk, p, w, false, cols_ref, false, ob, false);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                ob[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`; entries are computed only when requested.
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    if g.depthwise {
        return depthwise_backward(x, w, gout, g, want_dx, want_dw, want_db);
    }
    let p = g.out_plane();
    let kk = g.cin * g.k * g.k;
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let db = want_db.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for b in 0..g.batch {
            for (co, d) in db.iter_mut().enumerate() {
                let start = (b * g.cout + co) * p;
                *d = *d + gout[start..start + p].iter().copied().sum::<T>();
            }
        }
        db
    });
    let mut cols = vec![T::zero(); kk * p];
    let mut dcols = vec![T::zero(); kk * p];
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.in_plane()..(b + 1) * g.cin * g.in_plane()];
        let gb = &gout[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            T::gemm(g.cout, p, kk, gb, false, cols_ref, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.cin * g.in_plane()..(b + 1) * g.cin * g.in_plane()];
            if g.is_pointwise() {
                T::gemm(kk, g.cout, p, w, true, gb, false, dxb, true);
            } else {
                T::gemm(kk, g.cout, p, w, true, gb, false, &mut dcols, false);
                col2im(&dcols, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let p = g.out_plane();
    let mut out = vec![T::zero(); g.batch * g.cin * p];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let plane = &x[(b * g.cin + c) * g.in_plane()..(b * g.cin + c + 1) * g.in_plane()];
            let kern = &w[c * g.k * g.k..(c + 1) * g.k * g.k];
            let dst = &mut out[(b * g.cin + c) * p..(b * g.cin + c + 1) * p];
            let bv = bias.map_or(T::zero(), |bias| bias[c]);
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc = acc
                                    + kern[ky * g.k + kx] * plane[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    dst[oy * g.wo + ox] = acc + bv;
                }
            }
        }
    }
    out
}

fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.out_plane();
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = want_db.then(|| vec![T::zero(); g.cin]);
    for b in 0..g.batch {
        for c in 0..g.cin {
            let base_in = (b * g.cin + c) * g.in_plane();
            let plane = &x[base_in..base_in + g.in_plane()];
            let kern = &w[c * g.k * g.k..(c + 1) * g.k * g.k];
            let go = &gout[(b * g.cin + c) * p..(b * g.cin + c + 1) * p];
            if let Some(db) = db.as_mut() {
                db[c] = db[c] + go.iter().copied().sum::<T>();
            }
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let gv = go[oy * g.wo + ox];
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let at = iy as usize * g.w + ix as usize;
                            if let Some(dw) = dw.as_mut() {
                                let wi = c * g.k * g.k + ky * g.k + kx;
                                dw[wi] = dw[wi] + gv * plane[at];
                            }
                            if let Some(dx) = dx.as_mut() {
                                dx[base_in + at] = dx[base_in + at] + gv * kern[ky * g.k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// One output coordinate of a half-pixel bilinear resize along an axis:
/// source taps `i0`, `i1` and interpolation weight `frac` toward `i1`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub frac: T,
}

/// `src = (dst + 0.5)·(in/out) − 0.5`, clamped to the valid range.
pub(crate) fn resize_taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap {
                i0,
                i1,
                frac: T::of(frac),
            }
        })
        .collect()
}

/// Resizes `planes` stacked `in_h×in_w` maps. Interpolates as
/// `v0 + t·(v1 − v0)` so constant maps are reproduced exactly.
pub(crate) fn resize_forward<T: Real>(
    x: &[T],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    if in_h == out_h && in_w == out_w {
        return x.to_vec();
    }
    let ty = resize_taps::<T>(in_h, out_h);
    let tx = resize_taps::<T>(in_w, out_w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for pl in 0..planes {
        let src = &x[pl * in_h * in_w..(pl + 1) * in_h * in_w];
        let dst = &mut out[pl * out_h * out_w..(pl + 1) * out_h * out_w];
        for (oy, ry) in ty.iter().enumerate() {
            let r0 = &src[ry.i0 * in_w..(ry.i0 + 1) * in_w];
            let r1 = &src[ry.i1 * in_w..(ry.i1 + 1) * in_w];
            for (ox, cx) in tx.iter().enumerate() {
                let top = r0[cx.i0] + cx.frac * (r0[cx.i1] - r0[cx.i0]);
                let bot = r1[cx.i0] + cx.frac * (r1[cx.i1] - r1[cx.i0]);
                dst[oy * out_w + ox] = top + ry.frac * (bot - top);
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Real>(
    gout: &[T],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    if in_h == out_h && in_w == out_w {
        return gout.to_vec();
    }
    let ty = resize_taps::<T>(in_h, out_h);
    let tx = resize_taps::<T>(in_w, out_w);
    let one = T::one();
    let mut dx = vec![T::zero(); planes * in_h * in_w];
    for pl in 0..planes {
        let go = &gout[pl * out_h * out_w..(pl + 1) * out_h * out_w];
        let d = &mut dx[pl * in_h * in_w..(pl + 1) * in_h * in_w];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, cx) in tx.iter().enumerate() {
                let g = go[oy * out_w + ox];
                let gt = g * (one - ry.frac);
                let gb = g * ry.frac;
                d[ry.i0 * in_w + cx.i0] = d[ry.i0 * in_w + cx.i0] + gt * (one - cx.frac);
                d[ry.i0 * in_w + cx.i1] = d[ry.i0 * in_w + cx.i1] + gt * cx.frac;
                d[ry.i1 * in_w + cx.i0] = d[ry.i1 * in_w + cx.i0] + gb * (one - cx.frac);
                d[ry.i1 * in_w + cx.i1] = d[ry.i1 * in_w + cx.i1] + gb * cx.frac;
            }
        }
    }
    dx
}

/// Numerically stabilised softmax over the middle axis of an
/// `outer×len×inner` layout.
pub(crate) fn softmax_forward<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut mx = T::neg_infinity();
            for a in 0..len {
                mx = mx.max(x[base + a * inner + i]);
            }
            let mut sum = T::zero();
            for a in 0..len {
                let e = (x[base + a * inner + i] - mx).exp();
                y[base + a * inner + i] = e;
                sum = sum + e;
            }
            for a in 0..len {
                y[base + a * inner + i] = y[base + a * inner + i] / sum;
            }
        }
    }
    y
}
