//! Grouped residual factorized vector quantization with EMA codebooks.

mod codebook;
mod config;
mod grfvq;
mod metrics;

pub use codebook::Codebook;
pub use config::{Projection, VQConfig};
pub use grfvq::{commitment_loss, QuantizeNodes, QuantizeOutput, QuantizeTrace, Quantizer};
pub use metrics::{mean_perplexity_usage, perplexity, usage};
