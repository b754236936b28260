//! Synthetic corpus, image IO and augmentation.

mod augment;
mod corpus;
mod pnm;
mod sample;

pub use augment::{augment, crop, hflip, rescale, AugmentPolicy};
pub use corpus::{generate_corpus, render, render_sample, CorpusSpec, CORPUS_FILE};
pub use pnm::Raster;
pub use sample::{load_sample, save_sample, Manifest, ManifestEntry, SegSample, Split, MANIFEST_FILE};
