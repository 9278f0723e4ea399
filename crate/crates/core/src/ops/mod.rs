//! Neural operators with forward and backward rules.

pub mod activation;
pub mod conv;
pub mod norm;
pub mod shuffle;

pub use activation::gelu;
pub use conv::{conv2d, conv_macs, ConvGeometry};
pub use norm::{grn, layer_norm_channelwise};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
