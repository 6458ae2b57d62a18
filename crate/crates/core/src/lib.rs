//! Dual-guided spatial-channel-temporal (DG-SCT) cross-modal attention.
//!
//! Audio and visual token streams modulate each other along the channel,
//! spatial/frequency and temporal axes inside a frozen toy transformer. Only
//! the injected attention modules and a small classifier head train.

pub mod contrastive;
pub mod dgsct;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod param;
pub mod patch;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
