use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::quantizer::{Projection, VQConfig};

/// Where a component's parameters come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    #[default]
    Scratch,
    /// Copy this component's tensors bitwise from a checkpoint file.
    From(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
    /// Stochastic-depth rate of the residual blocks (training only).
    pub drop_rate: f64,
    pub kernel: usize,
    /// Hidden width of each block's pointwise MLP, as a multiple of its dim.
    pub expansion: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            depths: vec![3, 3, 9, 3],
            dims: vec![256, 512, 768, 1024],
            drop_rate: 0.2,
            kernel: 7,
            expansion: 4,
        }
    }
}

impl EncoderSpec {
    pub fn desk() -> Self {
        Self {
            depths: vec![1, 1],
            dims: vec![32, 32],
            drop_rate: 0.0,
            kernel: 7,
            expansion: 2,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.dims.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.len() != self.dims.len() {
            return Err(Error::Config(format!(
                "encoder: depths ({}) and dims ({}) must be nonempty and of equal length",
                self.depths.len(),
                self.dims.len()
            )));
        }
        if self.dims.contains(&0) || self.kernel % 2 == 0 || self.expansion == 0 {
            return Err(Error::Config("encoder: dims and expansion must be >= 1 and kernel odd".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!("encoder: drop_rate must lie in [0, 1), got {}", self.drop_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSpec {
    pub initial_channels: usize,
    pub rates: Vec<usize>,
    pub resblock_kernels: Vec<usize>,
    pub resblock_dilations: Vec<Vec<usize>>,
    pub pre_kernel: usize,
    pub post_kernel: usize,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self {
            initial_channels: 512,
            rates: vec![8, 4, 2, 2, 2],
            resblock_kernels: vec![3, 7, 11],
            resblock_dilations: vec![vec![1, 3, 5]; 3],
            pre_kernel: 13,
            post_kernel: 13,
        }
    }
}

impl DecoderSpec {
    pub fn desk() -> Self {
        Self {
            initial_channels: 32,
            rates: vec![4, 4, 4],
            resblock_kernels: vec![3, 7],
            resblock_dilations: vec![vec![1, 3]; 2],
            pre_kernel: 7,
            post_kernel: 7,
        }
    }

    pub fn hop(&self) -> usize {
        self.rates.iter().product()
    }

    /// Channels after upsampler `i` (halved each time, floor 1).
    pub fn channels_after(&self, i: usize) -> usize {
        (self.initial_channels >> (i + 1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("decoder: {m}")));
        if self.rates.is_empty() || self.rates.contains(&0) {
            return bad("rates must be nonempty and all >= 1");
        }
        if self.resblock_kernels.is_empty() || self.resblock_kernels.len() != self.resblock_dilations.len() {
            return bad("resblock kernel and dilation lists must be nonempty and of equal length");
        }
        if self.resblock_dilations.iter().any(|d| d.is_empty() || d.contains(&0)) {
            return bad("every resblock needs at least one dilation >= 1");
        }
        if self.resblock_kernels.iter().chain([&self.pre_kernel, &self.post_kernel]).any(|k| k % 2 == 0) {
            return bad("kernels must be odd");
        }
        if self.initial_channels == 0 {
            return bad("initial_channels must be >= 1");
        }
        Ok(())
    }
}

/// Full codec description: quantizer shape, architecture, front end and
/// the initialisation source of each component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    pub n_residual: usize,
    pub n_group: usize,
    pub n_codes: usize,
    pub code_dim: usize,
    #[serde(default)]
    pub encoder_init: InitSource,
    #[serde(default)]
    pub decoder_init: InitSource,
    #[serde(default)]
    pub vq_init: InitSource,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub decoder: DecoderSpec,
    #[serde(default)]
    pub mel: MelConfig,
    #[serde(default = "default_projection")]
    pub projection: Projection,
    #[serde(default = "default_commitment")]
    pub commitment_weight: f64,
    #[serde(default = "default_decay")]
    pub ema_decay: f64,
    #[serde(default = "default_dead")]
    pub dead_code_threshold: Option<u32>,
    #[serde(default)]
    pub seed: u64,
}

fn default_projection() -> Projection {
    Projection::Factorized
}
fn default_commitment() -> f64 {
    0.25
}
fn default_decay() -> f64 {
    0.8
}
fn default_dead() -> Option<u32> {
    Some(20)
}

impl CodecSpec {
    /// Full-size architecture with the given quantizer shape.
    pub fn full(n_residual: usize, n_group: usize, n_codes: usize, code_dim: usize) -> Self {
        Self {
            n_residual,
            n_group,
            n_codes,
            code_dim,
            encoder_init: InitSource::Scratch,
            decoder_init: InitSource::Scratch,
            vq_init: InitSource::Scratch,
            encoder: EncoderSpec::default(),
            decoder: DecoderSpec::default(),
            mel: MelConfig::default(),
            projection: default_projection(),
            commitment_weight: default_commitment(),
            ema_decay: default_decay(),
            dead_code_threshold: default_dead(),
            seed: 0,
        }
    }

    /// Multi-codebook teacher: 8 residual rounds, 4 groups, 1024 codes of dim 512.
    pub fn teacher() -> Self {
        Self::full(8, 4, 1024, 512)
    }

    /// Single-codebook student: 32768 codes of dim 3584.
    pub fn student(teacher_checkpoint: impl Into<PathBuf>) -> Self {
        let p = teacher_checkpoint.into();
        Self {
            encoder_init: InitSource::From(p.clone()),
            decoder_init: InitSource::From(p),
            ..Self::full(1, 1, 32768, 3584)
        }
    }

    /// Small architecture on the desk mel profile.
    pub fn desk(n_residual: usize, n_group: usize, n_codes: usize, code_dim: usize) -> Self {
        Self {
            encoder: EncoderSpec::desk(),
            decoder: DecoderSpec::desk(),
            mel: MelConfig::desk(),
            ..Self::full(n_residual, n_group, n_codes, code_dim)
        }
    }

    pub fn desk_teacher() -> Self {
        Self::desk(2, 2, 16, 8)
    }

    pub fn desk_student() -> Self {
        Self::desk(1, 1, 64, 16)
    }

    pub fn vq_config(&self) -> VQConfig {
        VQConfig {
            n_residual: self.n_residual,
            n_group: self.n_group,
            n_codes: self.n_codes,
            code_dim: self.code_dim,
            latent_dim: self.encoder.out_dim(),
            ema_decay: self.ema_decay,
            projection: self.projection,
            commitment_weight: self.commitment_weight,
            dead_code_threshold: self.dead_code_threshold,
            epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_residual == 0 || self.n_group == 0 || self.n_codes == 0 || self.code_dim == 0 {
            return Err(Error::Config("codec: n_residual, n_group, n_codes and code_dim must be >= 1".into()));
        }
        self.mel.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.vq_config().validate()?;
        if self.decoder.hop() != self.mel.hop {
            return Err(Error::Config(format!(
                "codec: product of decoder rates {:?} = {} must equal mel hop {}",
                self.decoder.rates,
                self.decoder.hop(),
                self.mel.hop
            )));
        }
        Ok(())
    }

    /// Mel frames (token positions) per second.
    pub fn tokens_per_second(&self) -> f64 {
        token_rate(self.mel.sample_rate, self.mel.hop)
    }

    pub fn bandwidth_bps(&self) -> f64 {
        bandwidth_bps(self.mel.sample_rate, self.mel.hop, self.n_codes, self.n_group * self.n_residual)
    }
}

/// Frames per second of a front end with this hop.
pub fn token_rate(sample_rate: u32, hop: usize) -> f64 {
    sample_rate as f64 / hop as f64
}

/// Bits per second: frame rate × codebooks × log2(codes per codebook).
pub fn bandwidth_bps(sample_rate: u32, hop: usize, n_codes: usize, n_codebooks: usize) -> f64 {
    token_rate(sample_rate, hop) * n_codebooks as f64 * (n_codes as f64).log2()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for s in [
            CodecSpec::teacher(),
            CodecSpec::student("t.ckpt"),
            CodecSpec::desk_teacher(),
            CodecSpec::desk_student(),
        ] {
            s.validate().unwrap();
        }
        assert_eq!(CodecSpec::teacher().decoder.hop(), 256);
    }

    #[test]
    fn rate_mismatch_rejected() {
        let mut s = CodecSpec::desk_teacher();
        s.decoder.rates = vec![4, 2];
        assert!(s.validate().is_err());
        s.mel.hop = 8;
        s.mel.window = 32;
        s.validate().unwrap();
    }

    #[test]
    fn student_rates() {
        let s = CodecSpec::student("t");
        assert_eq!(s.tokens_per_second(), 93.75);
        assert_eq!(s.bandwidth_bps(), 1406.25);
    }

    #[test]
    fn init_source_toml() {
        #[derive(Deserialize)]
        struct W {
            a: InitSource,
            b: InitSource,
        }
        let w: W = toml::from_str("a = \"scratch\"\nb = { from = \"teacher.ckpt\" }").unwrap();
        assert_eq!(w.a, InitSource::Scratch);
        assert_eq!(w.b, InitSource::From("teacher.ckpt".into()));
    }
}
