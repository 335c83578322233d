//! Prototype classification over patch-token encoders: an encoder, a bank of
//! multi-part prototypes matched greedily under an adjacency mask, the staged
//! training loop, and the analysis tools used to inspect trained models.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod matching;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod prototypes;
pub mod trainer;

pub use error::{Error, Result};
