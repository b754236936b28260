//! Seeded "shapes world" corpus: anti-aliased discs, rectangles, triangles
//! and stripe bands over a textured background.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pnm::Raster;
use super::sample::{Manifest, ManifestEntry, SegSample, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::fnv1a;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_train: usize,
    pub num_val: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Background texture amplitude in `[0, 1]`.
    pub clutter: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            num_train: 200,
            num_val: 50,
            height: 64,
            width: 64,
            classes: 5,
            clutter: 0.7,
        }
    }
}

pub const CORPUS_FILE: &str = "corpus.cfg";
const CORPUS_KEYS: [&str; 7] = ["seed", "num_train", "num_val", "height", "width", "classes", "clutter"];

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::Config(format!(
                "classes must be between 2 and 255, got {}",
                self.classes
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.clutter) {
            return Err(Error::Config(format!("clutter must lie in [0, 1], got {}", self.clutter)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("seed", self.seed.to_string()),
            ("num_train", self.num_train.to_string()),
            ("num_val", self.num_val.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("classes", self.classes.to_string()),
            ("clutter", self.clutter.to_string()),
        ] {
            writeln!(s, "{k} = {v}").expect("writing to a String");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = KvMap::parse(text)?;
        map.check_keys(&CORPUS_KEYS)?;
        let mut spec = CorpusSpec::default();
        macro_rules! read {
            ($($f:ident),*) => {$(
                if let Some(v) = map.get(stringify!($f))? {
                    spec.$f = v;
                }
            )*};
        }
        read!(seed, num_train, num_val, height, width, classes, clutter);
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(CORPUS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_kv(&text)
    }

    pub fn sample_id(split: Split, index: usize) -> String {
        format!("{}_{index:05}", split.name())
    }

    fn rng_for(&self, id: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(id.as_bytes()))
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle([(f64, f64); 3]),
    /// Points within `half` of the line through `(cx, cy)` with normal `(nx, ny)`.
    Band { cx: f64, cy: f64, nx: f64, ny: f64, half: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Triangle(v) => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (d0, d1, d2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
            Shape::Band { cx, cy, nx, ny, half } => ((x - cx) * nx + (y - cy) * ny).abs() <= half,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Instance {
    class: u8,
    shape: Shape,
    color: [f64; 3],
}

fn random_instance(rng: &mut ChaCha8Rng, classes: usize, h: f64, w: f64) -> Instance {
    let class = rng.gen_range(1..classes) as u8;
    let fg = (classes - 1) as f64;
    let hue = (f64::from(class) - 1.0) / fg + rng.gen_range(-0.25..0.25) / fg;
    let color = hsv_to_rgb(hue, rng.gen_range(0.6..0.9), rng.gen_range(0.7..0.95));
    let m = h.min(w);
    let (cx, cy) = (rng.gen_range(0.1..0.9) * w, rng.gen_range(0.1..0.9) * h);
    let shape = match (class - 1) % 4 {
        0 => Shape::Disc {
            cx,
            cy,
            r: rng.gen_range(0.08..0.22) * m,
        },
        1 => {
            let (hw, hh) = (rng.gen_range(0.08..0.25) * w, rng.gen_range(0.08..0.25) * h);
            Shape::Rect {
                x0: cx - hw,
                y0: cy - hh,
                x1: cx + hw,
                y1: cy + hh,
            }
        }
        2 => {
            let r = rng.gen_range(0.12..0.3) * m;
            let a0 = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut v = [(0.0, 0.0); 3];
            for (k, p) in v.iter_mut().enumerate() {
                let a = a0 + k as f64 * std::f64::consts::TAU / 3.0 + rng.gen_range(-0.4..0.4);
                *p = (cx + r * a.cos(), cy + r * a.sin());
            }
            Shape::Triangle(v)
        }
        _ => {
            let a = rng.gen_range(0.0..std::f64::consts::PI);
            Shape::Band {
                cx,
                cy,
                nx: a.cos(),
                ny: a.sin(),
                half: rng.gen_range(0.03..0.07) * m,
            }
        }
    };
    Instance { class, shape, color }
}

/// Smooth value noise in about `[-1, 1]` on a `cell`-pixel lattice.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let g = |r: usize, c: usize| grid[r * gw + c];
            let top = g(iy, ix) + tx * (g(iy, ix + 1) - g(iy, ix));
            let bot = g(iy + 1, ix) + tx * (g(iy + 1, ix + 1) - g(iy + 1, ix));
            out[y * w + x] = top + ty * (bot - top);
        }
    }
    out
}

/// Renders one image and its mask as 8-bit rasters.
pub fn render(spec: &CorpusSpec, id: &str) -> Result<(Raster, Raster)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = spec.rng_for(id);

    let base = [rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6)];
    let coarse = value_noise(&mut rng, h, w, 8);
    let fine: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tint = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let amp = 0.3 * spec.clutter;
    let background = |p: usize, c: usize| {
        let tex = 0.6 * coarse[p] + 0.4 * fine[p];
        base[c] + amp * tex * (1.0 + 0.3 * tint[c])
    };

    let count = rng.gen_range(1..=5);
    let instances: Vec<Instance> = (0..count)
        .map(|_| random_instance(&mut rng, spec.classes, h as f64, w as f64))
        .collect();

    let mut rgb = vec![0u8; 3 * h * w];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut acc = [0.0; 3];
            // Topmost instance index per subsample, 0 for background.
            let mut hits = [0usize; 4];
            for (s, hit) in hits.iter_mut().enumerate() {
                let sx = x as f64 + 0.25 + 0.5 * (s % 2) as f64;
                let sy = y as f64 + 0.25 + 0.5 * (s / 2) as f64;
                *hit = instances
                    .iter()
                    .rposition(|inst| inst.shape.contains(sx, sy))
                    .map_or(0, |i| i + 1);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += match *hit {
                        0 => background(p, c),
                        i => instances[i - 1].color[c],
                    };
                }
            }
            for c in 0..3 {
                rgb[3 * p + c] = ((acc[c] / 4.0).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            // Majority vote over subsamples; ties go to the upper instance.
            let mut best = (0usize, 0usize);
            for &i in &hits {
                let n = hits.iter().filter(|&&j| j == i).count();
                if (n, i) > best {
                    best = (n, i);
                }
            }
            mask[p] = match best.1 {
                0 => 0,
                i => instances[i - 1].class,
            };
        }
    }
    Ok((Raster::rgb(w, h, rgb), Raster::gray(w, h, mask)))
}

/// Renders a sample without touching the file system.
pub fn render_sample(spec: &CorpusSpec, split: Split, index: usize) -> Result<SegSample> {
    let id = CorpusSpec::sample_id(split, index);
    let (img, mask) = render(spec, &id)?;
    SegSample::from_rasters(id, &img, &mask)
}

/// Writes `images/`, `masks/`, the manifest and the spec under `out_dir`.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = Manifest::default();
    for (split, n) in [(Split::Train, spec.num_train), (Split::Val, spec.num_val)] {
        for i in 0..n {
            let id = CorpusSpec::sample_id(split, i);
            let (img, mask) = render(spec, &id)?;
            let image = PathBuf::from("images").join(format!("{id}.ppm"));
            let mask_path = PathBuf::from("masks").join(format!("{id}.pgm"));
            img.write(&out_dir.join(&image))?;
            mask.write(&out_dir.join(&mask_path))?;
            manifest.entries.push(ManifestEntry {
                id,
                split,
                image,
                mask: mask_path,
            });
        }
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    let path = out_dir.join(CORPUS_FILE);
    fs::write(&path, spec.to_kv()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
