//! Desk-scale language model training lab built around entropy-scaled
//! training losses (MiLe), with focal loss and plain cross-entropy as
//! references.
//!
//! Everything runs in `f64` on a single thread per training graph so that
//! identical configs and seeds reproduce runs bit for bit.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
