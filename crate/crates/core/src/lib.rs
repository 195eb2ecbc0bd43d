//! Masked knowledge distillation with bootstrapped teachers.
//!
//! A student Vision Transformer sees a random subset of image patches and
//! learns to predict a frozen teacher's features for the hidden ones. At the
//! end of each stage the teacher is replaced by the trained student and a
//! fresh student starts over. The crate also carries the analysis tools used
//! to compare models: attention distance, singular-value spectra and
//! spectral object localization.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod masking;
pub mod model;
pub mod objective;
pub mod params;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use params::ParameterStore;

// The guide's snippets run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/masking.md")]
    mod masking {}
    #[doc = include_str!("../../../book/src/stages.md")]
    mod stages {}
    #[doc = include_str!("../../../book/src/optimization.md")]
    mod optimization {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
