//! Speaker recognition from raw waveforms with a learnable band-pass front end.
//!
//! The first layer of the classifier is a bank of windowed-sinc band-pass
//! filters whose only parameters are the two cutoff frequencies of each band.
//! Everything downstream is an ordinary convolutional and dense stack trained
//! with RMSprop on short chunks of audio.

pub mod analysis;
pub mod config;
pub mod dataio;
pub mod error;
pub mod filterbank;
pub mod gradcheck;
pub mod neuralnet;
pub mod pipeline;
pub mod trainer;
pub mod verification;

pub use error::{Error, Result};
