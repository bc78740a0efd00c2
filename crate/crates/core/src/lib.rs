//! Class-incremental detection and attribution of GAN-generated images.
//!
//! The crate trains a small convolutional feature extractor from scratch,
//! keeps a budgeted set of exemplar images per class, classifies with the
//! nearest mean of exemplars and labels an image as generated whenever the
//! predicted class belongs to a generator. Two multi-task objectives add a
//! binary real/generated term on top of the rehearsal-plus-distillation loss.

pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod learner;
pub mod losses;
pub mod memory;
pub mod model;

pub use error::{Error, Result};
