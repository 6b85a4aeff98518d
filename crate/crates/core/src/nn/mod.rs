//! Parameter storage and the handful of layers the networks are built from.

mod layers;
mod params;

pub use layers::{Conv3d, InstanceNorm, LayerNorm, Linear, PadMode};
pub use params::{Init, ParamId, ParamStore, Session};
