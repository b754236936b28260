use std::fs;
use std::path::{Path, PathBuf};

use super::pnm::Raster;
use crate::error::{Error, Result};
use crate::nn::IGNORE_LABEL;
use crate::tensor::Tensor;

/// An RGB image in `[0, 1]` with its per-pixel class mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `3×H×W`.
    pub image: Tensor<f32>,
    /// Row-major `H×W` class ids; [`IGNORE_LABEL`] marks excluded pixels.
    pub mask: Vec<u8>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn from_rasters(id: impl Into<String>, image: &Raster, mask: &Raster) -> Result<Self> {
        let id = id.into();
        if image.channels != 3 || mask.channels != 1 {
            return Err(Error::Data(format!(
                "{id}: expected an RGB image and a single-channel mask"
            )));
        }
        if (image.width, image.height) != (mask.width, mask.height) {
            return Err(Error::Data(format!(
                "{id}: image is {}×{} but mask is {}×{}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        let (h, w) = (image.height, image.width);
        let mut planar = vec![0f32; 3 * h * w];
        for (p, px) in image.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planar[c * h * w + p] = f32::from(px[c]) / 255.0;
            }
        }
        Ok(SegSample {
            id,
            image: Tensor::new(&[3, h, w], planar)?,
            mask: mask.data.clone(),
        })
    }

    /// Inverse of [`SegSample::from_rasters`] for images on the 1/255 grid.
    pub fn to_rasters(&self) -> (Raster, Raster) {
        let (h, w) = (self.height(), self.width());
        let d = self.image.data();
        let mut rgb = vec![0u8; 3 * h * w];
        for p in 0..h * w {
            for c in 0..3 {
                rgb[3 * p + c] = (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        (Raster::rgb(w, h, rgb), Raster::gray(w, h, self.mask.clone()))
    }

    /// Rejects mask values outside `0..classes` other than the ignore label.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.mask.iter().position(|&m| m != IGNORE_LABEL && usize::from(m) >= classes) {
            Some(i) => Err(Error::Data(format!(
                "{}: mask value {} at pixel {i} is not below the class count {classes}",
                self.id, self.mask[i]
            ))),
            None => Ok(()),
        }
    }
}

pub fn load_sample(image_path: &Path, mask_path: &Path) -> Result<SegSample> {
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SegSample::from_rasters(id, &Raster::read(image_path)?, &Raster::read(mask_path)?)
}

pub fn save_sample(sample: &SegSample, image_path: &Path, mask_path: &Path) -> Result<()> {
    let (img, mask) = sample.to_rasters();
    img.write(image_path)?;
    mask.write(mask_path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train or val)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Tab-separated listing of a corpus: `id`, split, image path, mask path.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl Manifest {
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.id, e.split.name(), e.image.display(), e.mask.display()))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end_matches(['\n', '\r']);
            if !body.is_empty() {
                let fields: Vec<&str> = body.split('\t').collect();
                let [id, split, image, mask] = fields[..] else {
                    return Err(Error::Parse {
                        offset,
                        detail: format!("manifest record has {} fields, expected 4", fields.len()),
                    });
                };
                entries.push(ManifestEntry {
                    id: id.to_string(),
                    split: split.parse()?,
                    image: image.into(),
                    mask: mask.into(),
                });
            }
            offset += line.len();
        }
        Ok(Manifest { entries })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    /// Loads every sample of `split`, checking masks against `classes`.
    pub fn load(&self, dir: &Path, split: Split, classes: usize) -> Result<Vec<SegSample>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let mut s = load_sample(&dir.join(&e.image), &dir.join(&e.mask))?;
                s.id.clone_from(&e.id);
                s.check_classes(classes)?;
                Ok(s)
            })
            .collect()
    }
}
