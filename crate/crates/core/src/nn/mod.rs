//! The two heterogeneous backbones behind a common two-head interface.

mod layers;
mod network;
mod params;
mod patch;
mod unet;

pub use layers::{Mode, StatUpdate};
pub use network::{
    BackboneKind, BackboneSpec, DualHeadOutput, ForwardPass, Network, ParamGroups,
    DEFAULT_CLS_LABELS, DEFAULT_SEG_CLASSES,
};
pub use params::{Grads, Group, Kind, Param, ParamId, ParamStore};
