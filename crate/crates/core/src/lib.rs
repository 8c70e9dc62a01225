//! Audio-visual speech recognition on a synthetic corpus: GMM-HMM senone
//! alignment, visual pre-training, cross-modal fusion encoders, joint
//! CTC/attention training and decoding.

pub mod config;
pub mod container;
pub mod corpus;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod gmmhmm;
pub mod pipeline;
pub mod plot;
pub mod training;

pub use error::{Error, Result};
