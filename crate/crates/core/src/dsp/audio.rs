use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Mel spectrogram front-end settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub hop: usize,
    pub window: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Training segment length in samples.
    pub segment: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24000,
            n_mels: 128,
            hop: 256,
            window: 1024,
            fmin: 0.0,
            fmax: 12000.0,
            segment: 72000,
        }
    }
}

impl MelConfig {
    /// Small profile for tests and single-core training runs.
    pub fn desk() -> Self {
        Self {
            sample_rate: 8000,
            n_mels: 32,
            hop: 64,
            window: 256,
            fmin: 0.0,
            fmax: 4000.0,
            segment: 8000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        let problem = if self.sample_rate == 0 {
            Some("sample_rate must be positive".to_string())
        } else if self.n_mels == 0 || self.hop == 0 || self.window == 0 {
            Some("n_mels, hop and window must be >= 1".into())
        } else if self.hop > self.window {
            Some(format!("hop {} exceeds window {}", self.hop, self.window))
        } else if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            Some(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin {} fmax {}",
                self.fmin, self.fmax
            ))
        } else {
            None
        };
        problem.map_or(Ok(()), |p| Err(Error::Config(format!("mel config: {p}"))))
    }

    /// Mel frames produced for `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }
}
