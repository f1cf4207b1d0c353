//! Small dense networks with exact reverse-mode gradients.
//!
//! Everything the trainer learns (local Q, V and policy heads, the mixer's
//! weight and offset networks) is an [`Mlp`]. Forward passes run on whole
//! batches (rows are samples) and return a [`Tape`] that
//! [`Mlp::backward`] replays to produce parameter gradients with the same
//! shape as the network itself.

mod adam;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use mlp::{Activation, Dense, LayerRecord, Mlp, Tape};
