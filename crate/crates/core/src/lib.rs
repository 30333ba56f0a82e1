//! Self-guided training for autoregressive models over discrete image tokens.
//!
//! A causal decoder is trained with next-token prediction plus three
//! self-supervised terms computed against an EMA teacher: masked-attention
//! feature alignment, an inter-step contrastive loss and an inter-view
//! contrastive loss. The crate also ships the diagnostics used to compare a
//! plain next-token model against one trained with the extra terms.

pub mod error;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
pub mod data;
pub mod model;
pub mod teacher;
pub mod losses;
pub mod gradsuite;
pub mod trainer;
pub mod sampler;
pub mod diagnostics;
