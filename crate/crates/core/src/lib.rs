//! Style-jittered, meta-learned person re-identification on synthetic
//! multi-domain data, with a small reverse-mode autodiff engine.

pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metaloop;
pub mod model;
pub mod rng;
pub mod sjm;
pub mod snapshot;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
