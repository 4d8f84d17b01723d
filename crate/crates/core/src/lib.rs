//! Neural audio codec training stack: grouped residual vector quantization
//! with EMA codebooks, GAN codec training, multi-to-single codebook
//! distillation, data filtering and a linear preference loss.

pub mod adversary;
pub mod codec;
pub mod datafilter;
pub mod distill;
pub mod error;
pub mod lpo;
pub mod dsp;
pub mod numerics;
pub mod quantizer;
pub mod synth;

pub use error::{Error, Result};
