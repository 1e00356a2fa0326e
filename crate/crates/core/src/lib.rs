//! Anchor-guided view selection and prompt adaptation on precomputed
//! embeddings.
//!
//! Each test image arrives as a batch of augmented view embeddings. The
//! pipeline picks the views that agree with class description anchors
//! (text side) and with running image prototypes (image side), builds a
//! sharpened ensemble target from three classifier heads, and takes a few
//! optimizer steps on a prompt vector through a differentiable surrogate
//! text encoder.

pub mod bundle;
pub mod datagen;
pub mod embedding;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod image_anchor;
pub mod io;
pub mod optim;
pub mod par;
pub mod scoring;
pub mod text_anchor;

pub use bundle::{FeatureBundle, Sample};
pub use error::{Error, ErrorClass, FormatError, Result};
