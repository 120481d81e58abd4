//! Reference-guided face component editing: corruption and masking utilities,
//! a fixed feature backbone, example-guided attention, the generator and
//! discriminator, the training losses, evaluation metrics and the training
//! pipeline.

pub mod attention;
pub mod error;
pub mod featnet;
pub mod imagecore;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
