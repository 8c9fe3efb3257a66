//! Kernel-space multidimensional sparse (KMDS) denoising for dynamic PET.
//!
//! The pipeline represents a noisy dynamic image `y` as `τ(x) = K τ(α)` with a
//! sparse kNN kernel `K` built from composite frames, recovers the coefficient
//! image `α` by least squares, sparse-codes `α` over four per-mode dictionaries
//! with tensor ISTA, and maps the reconstruction back through `K`.

pub mod error;
pub mod experiment;
pub mod io;
pub mod kernel;
pub mod kinetics;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DictionarySet, DynTensor, Matrix2D};
