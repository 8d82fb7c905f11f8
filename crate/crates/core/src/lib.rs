//! Visual word sense disambiguation engine.
//!
//! The pipeline disambiguates a short context against a sense inventory,
//! builds an augmented prompt, retrieves supporting images by exact cosine
//! search, fuses the evidence and ranks the candidate images.

pub mod autodiff;
pub mod disambiguation;
pub mod embedding;
pub mod evaluation;
pub mod fusion;
pub mod pipeline;
pub mod retrieval;
pub mod store;
pub mod train;
