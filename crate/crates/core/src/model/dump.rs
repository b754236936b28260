use std::fs;
use std::path::{Path, PathBuf};

use super::net::Model;
use crate::data::Raster;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor};

/// Min-max scales `values` to 0..=255, rounding halves up. A constant
/// channel maps to all zeros.
pub fn normalize_channel(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / span * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Stage names available for `model`, sorted.
pub fn dump_stage_names<T: Real>(model: &mut Model<T>, image: &Tensor<T>) -> Result<Vec<String>> {
    let mut tape = Tape::new();
    let x = tape.constant(single(image)?);
    Ok(model.forward_full(&mut tape, x, false, true)?.taps.into_keys().collect())
}

fn single<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    match image.shape() {
        [3, h, w] => image.clone().reshape(&[1, 3, *h, *w]),
        [1, 3, _, _] => Ok(image.clone()),
        s => Err(Error::dim("dump_features", format!("expected one 3×H×W image, got {s:?}"))),
    }
}

/// Writes every channel of the named intermediate map as `<stage>_cNNN.pgm`
/// under `dir` and returns the written paths.
pub fn dump_features<T: Real>(model: &mut Model<T>, image: &Tensor<T>, stage: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut tape = Tape::new();
    let x = tape.constant(single(image)?);
    let fwd = model.forward_full(&mut tape, x, false, true)?;
    let Some(&v) = fwd.taps.get(stage) else {
        let names: Vec<&str> = fwd.taps.keys().map(String::as_str).collect();
        return Err(Error::Config(format!(
            "unknown stage `{stage}`; valid stages for this model: {}",
            names.join(", ")
        )));
    };
    let t = tape.tensor(v);
    let [_, c, h, w] = t.shape()[..] else {
        return Err(Error::dim("dump_features", format!("stage `{stage}` is not a feature map")));
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plane = h * w;
    let mut paths = Vec::with_capacity(c);
    for ch in 0..c {
        let vals: Vec<f64> = t.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let path = dir.join(format!("{stage}_c{ch:03}.pgm"));
        Raster::gray(w, h, normalize_channel(&vals)).write(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
