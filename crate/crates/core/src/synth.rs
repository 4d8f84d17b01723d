//! Deterministic synthetic audio for tests, demos and desk-scale training.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};

/// Spectral family of a synthetic clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipClass {
    /// Harmonic tone with vibrato and a percussive envelope.
    Tone,
    /// Sinusoid with amplitude and frequency modulation.
    Modulated,
    /// Band-limited noise bursts separated by gaps.
    Noise,
    Silence,
}

impl ClipClass {
    pub const ALL: [ClipClass; 4] = [ClipClass::Tone, ClipClass::Modulated, ClipClass::Noise, ClipClass::Silence];

    pub fn name(self) -> &'static str {
        match self {
            ClipClass::Tone => "tone",
            ClipClass::Modulated => "modulated",
            ClipClass::Noise => "noise",
            ClipClass::Silence => "silence",
        }
    }
}

fn tone(rng: &mut ChaCha8Rng, sr: f64, len: usize) -> Vec<f32> {
    let f0 = rng.gen_range(80.0..(sr / 16.0).min(600.0));
    let harmonics: Vec<f64> = (1..=4).map(|h| rng.gen_range(0.2..1.0) / h as f64).collect();
    let vib_rate = rng.gen_range(3.0..7.0);
    let vib_depth = rng.gen_range(0.0..0.02);
    let attack = rng.gen_range(0.01..0.1) * sr;
    let decay = rng.gen_range(0.3..1.5) * sr;
    let gain = rng.gen_range(0.2..0.45);
    let norm: f64 = harmonics.iter().sum();
    let mut phase = 0.0f64;
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let f = f0 * (1.0 + vib_depth * (TAU * vib_rate * t).sin());
            phase += TAU * f / sr;
            let s: f64 = harmonics
                .iter()
                .enumerate()
                .filter(|(h, _)| f * (*h as f64 + 1.0) < sr / 2.0)
                .map(|(h, a)| a * ((h as f64 + 1.0) * phase).sin())
                .sum::<f64>()
                / norm;
            let env = (i as f64 / attack).min(1.0) * (-(i as f64) / decay).exp();
            let noise = rng.gen_range(-1.0..1.0) * 0.005;
            (gain * env * s + noise) as f32
        })
        .collect()
}

fn modulated(rng: &mut ChaCha8Rng, sr: f64, len: usize) -> Vec<f32> {
    let fc = rng.gen_range(150.0..(sr / 5.0).min(1500.0));
    let dev = rng.gen_range(0.02..0.15) * fc;
    let fm = rng.gen_range(1.0..8.0);
    let am = rng.gen_range(1.0..6.0);
    let depth = rng.gen_range(0.2..0.8);
    let gain = rng.gen_range(0.15..0.4);
    let mut phase = 0.0f64;
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            phase += TAU * (fc + dev * (TAU * fm * t).sin()) / sr;
            let env = 1.0 - depth * 0.5 * (1.0 + (TAU * am * t).cos());
            (gain * env * phase.sin()) as f32
        })
        .collect()
}

fn noise(rng: &mut ChaCha8Rng, sr: f64, len: usize) -> Vec<f32> {
    // difference of two one-pole low-passes gives a band-pass
    let lo = rng.gen_range(0.05..0.2);
    let hi = rng.gen_range(0.4..0.8);
    let gain = rng.gen_range(0.15..0.35);
    let burst = (rng.gen_range(0.08..0.3) * sr) as usize;
    let gap = (rng.gen_range(0.02..0.1) * sr) as usize;
    let (mut a, mut b) = (0.0f64, 0.0f64);
    (0..len)
        .map(|i| {
            let w: f64 = rng.gen_range(-1.0..1.0);
            a += hi * (w - a);
            b += lo * (w - b);
            let on = i % (burst + gap) < burst;
            if on {
                (gain * 2.0 * (a - b)) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// One clip of `class`.
pub fn synth_clip(class: ClipClass, sample_rate: u32, len: usize, rng: &mut ChaCha8Rng) -> Result<AudioBuffer> {
    let sr = sample_rate as f64;
    let samples = match class {
        ClipClass::Tone => tone(rng, sr, len),
        ClipClass::Modulated => modulated(rng, sr, len),
        ClipClass::Noise => noise(rng, sr, len),
        ClipClass::Silence => vec![0.0; len],
    };
    AudioBuffer::new(samples, sample_rate)
}

/// Harmonic tones with random pitch, harmonic weights, vibrato and a
/// percussive envelope, plus a little noise. Peaks stay below 0.6.
pub fn tone_corpus(n_clips: usize, sample_rate: u32, len: usize, seed: u64) -> Result<Vec<AudioBuffer>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_clips).map(|_| synth_clip(ClipClass::Tone, sample_rate, len, &mut rng)).collect()
}

/// Class weights of the default synthetic corpus (tone, modulated, noise, silence).
pub const DEFAULT_CLASS_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

/// Clips drawn from `weights` (tone, modulated, noise, silence). The
/// first clips walk through every class with nonzero weight so small
/// corpora still cover them.
pub fn mixed_corpus(n_clips: usize, sample_rate: u32, len: usize, seed: u64, weights: [f64; 4]) -> Result<Vec<(ClipClass, AudioBuffer)>> {
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("class weights must be >= 0 with a positive sum, got {weights:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let present: Vec<ClipClass> = ClipClass::ALL.iter().zip(weights).filter(|(_, w)| *w > 0.0).map(|(c, _)| *c).collect();
    let total: f64 = weights.iter().sum();
    (0..n_clips)
        .map(|i| {
            let class = if i < present.len() {
                present[i]
            } else {
                let mut u = rng.gen_range(0.0..total);
                let mut pick = present[present.len() - 1];
                for (c, w) in ClipClass::ALL.iter().zip(weights) {
                    if u < w {
                        pick = *c;
                        break;
                    }
                    u -= w;
                }
                pick
            };
            Ok((class, synth_clip(class, sample_rate, len, &mut rng)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = tone_corpus(5, 8000, 4000, 7).unwrap();
        let b = tone_corpus(5, 8000, 4000, 7).unwrap();
        assert_eq!(a, b);
        for c in &a {
            assert_eq!(c.len(), 4000);
            assert!(c.samples().iter().all(|v| v.abs() < 0.6));
            assert!(c.samples().iter().any(|v| v.abs() > 0.05));
        }
    }

    #[test]
    fn mixed_corpus_covers_classes_first() {
        let c = mixed_corpus(6, 8000, 800, 1, [1.0, 1.0, 0.0, 1.0]).unwrap();
        let classes: Vec<_> = c.iter().map(|(k, _)| *k).collect();
        assert_eq!(&classes[..3], &[ClipClass::Tone, ClipClass::Modulated, ClipClass::Silence]);
        assert!(!classes.contains(&ClipClass::Noise));
        assert!(mixed_corpus(1, 8000, 10, 0, [0.0; 4]).is_err());
        for (_, a) in &c {
            assert!(a.samples().iter().all(|v| v.abs() < 0.8));
        }
    }
}
