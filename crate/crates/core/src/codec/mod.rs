//! Encoder → quantizer → decoder codec assembled from a [`CodecSpec`].

mod decoder;
mod encoder;
mod model;
mod spec;

pub use decoder::{upsampler_geometry, Decoder};
pub use encoder::Encoder;
pub use model::{build_codec, build_codec_with, parameter_layout, CodecModel, ForwardNodes, Part};
pub use spec::{bandwidth_bps, token_rate, CodecSpec, DecoderSpec, EncoderSpec, InitSource};
