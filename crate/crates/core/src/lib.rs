//! Image spoofing detection: random-filter architecture search with a
//! max-margin classifier, back-propagation training of a fixed network,
//! and the biometric evaluation protocol.

pub mod archsearch;
pub mod backprop;
pub mod convops;
pub mod datapipe;
pub mod error;
mod gemm;
pub mod imagecore;
pub mod label;
pub mod maxmargin;
pub mod model;
pub mod pipeline;
pub mod pnm;
pub mod protocol;
pub mod seed;

pub use error::{Error, Result};
pub use imagecore::{FeatureVector, MultibandImage};
pub use label::Label;
