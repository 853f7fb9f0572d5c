//! Longitudinal image progression with a correlational autoencoder and
//! latent rectified flow matching.

pub mod autoenc;
pub mod batching;
pub mod corrae;
pub mod dataio;
pub mod diagnostics;
pub mod latentflow;
pub mod tensor;
