//! EEG air-writing decoding: preprocessing, ICA, compact convolutional
//! encoders and supervised contrastive training with cross-validation.

pub mod error;
pub mod ica;
pub mod contrastive;
pub mod models;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod signal;
pub mod store;

pub use error::{Error, Result};
