//! U-Net models whose skip-connections are replaced by a multi-scale
//! aggregation module (MSIAM) and per-stage enhancement modules (IEM),
//! together with a symbolic skip-memory analyzer, feature diagnostics and a
//! small training harness.

pub mod arch;
pub mod basic;
pub mod error;
pub mod gradcheck;
pub mod inspect;
pub mod layers;
pub mod memory;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamSet};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Shape, Tensor};
