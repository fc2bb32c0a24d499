//! Small neural-network toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] whose initialization is driven by a
//! seeded ChaCha stream, so two stores built from the same seed and the same
//! construction order hold bit-identical weights.

mod layers;
mod params;
mod pass;

pub use layers::{avg_pool2x, group_norm, upsample2x, BatchNorm2d, Conv2d, Linear};
pub(crate) use layers::{apply, silu};
pub use params::{Init, ParamStore, Scope};
pub use pass::Pass;
