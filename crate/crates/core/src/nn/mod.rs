//! Parameters, layers and the optimizer.

mod layers;
mod optim;
mod params;

pub use layers::{BatchNorm, Conv2d, ConvBnRelu, ConvKind, Ctx, BN_EPS, BN_MOMENTUM};
pub use optim::{poly_lr, Sgd, SgdConfig};
pub use params::{fnv1a, init_uniform, ParamId, ParamKind, ParamStore};

/// Target label excluded from the loss and from confusion counts.
pub const IGNORE_LABEL: u8 = 255;
