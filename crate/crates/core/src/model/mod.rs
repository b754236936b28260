//! Encoder, decoder variants, segmentation head, checkpoints and feature dumps.

mod checkpoint;
mod config;
mod dump;
mod net;

pub use checkpoint::{MAGIC, VERSION};
pub use config::{ModelConfig, Variant};
pub(crate) use config::MODEL_KEYS;
pub use dump::{dump_features, dump_stage_names, normalize_channel};
pub use net::{Forward, Model};
