use serde::{Deserialize, Serialize};

use super::audio::AudioBuffer;
use crate::error::{Error, Result};

/// Energy-detector settings for [`silence_proportion`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VadConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub rms_threshold: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            hop_ms: 10.0,
            rms_threshold: 1e-3,
        }
    }
}

impl VadConfig {
    pub fn proportion(&self, audio: &AudioBuffer) -> Result<f64> {
        let sr = audio.sample_rate() as f64;
        let frame = ((self.frame_ms * sr / 1000.0).round() as usize).max(1);
        let hop = ((self.hop_ms * sr / 1000.0).round() as usize).max(1);
        silence_proportion(audio.samples(), frame, hop, self.rms_threshold)
    }
}

/// Fraction of frames whose RMS is below `rms_threshold`. A signal shorter
/// than one frame is treated as a single frame; empty audio counts as silent.
pub fn silence_proportion(samples: &[f32], frame_len: usize, frame_hop: usize, rms_threshold: f64) -> Result<f64> {
    if frame_len == 0 || frame_hop == 0 {
        return Err(Error::Config("frame length and hop must be >= 1".into()));
    }
    if samples.is_empty() {
        return Ok(1.0);
    }
    let frames = if samples.len() <= frame_len {
        1
    } else {
        1 + (samples.len() - frame_len) / frame_hop
    };
    let silent = (0..frames)
        .filter(|&t| {
            let start = t * frame_hop;
            let chunk = &samples[start..(start + frame_len).min(samples.len())];
            let ms = chunk.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / chunk.len() as f64;
            ms.sqrt() < rms_threshold
        })
        .count();
    Ok(silent as f64 / frames as f64)
}
