use serde::{Deserialize, Serialize};

use super::audio::{AudioBuffer, MelConfig};
use super::stft::stft_raw;
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Real, Tensor};

/// Floor applied to mel power before the logarithm.
pub const LOG_FLOOR: f64 = 1e-5;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters with area normalization, `[n_mels, n_fft/2+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Filterbank {
    pub n_mels: usize,
    pub bins: usize,
    pub weights: Vec<f64>,
}

impl Filterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Result<Self> {
        if n_fft < 2 || n_mels == 0 || !(0.0 <= fmin && fmin < fmax && fmax <= sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "filterbank needs n_fft >= 2, n_mels >= 1 and 0 <= fmin < fmax <= nyquist (got {n_fft}, {n_mels}, {fmin}, {fmax})"
            )));
        }
        let bins = n_fft / 2 + 1;
        let spacing = sample_rate as f64 / n_fft as f64;
        let (mlo, mhi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            let row = &mut weights[m * bins..(m + 1) * bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * spacing;
                let up = (f - lo) / (mid - lo);
                let down = (hi - f) / (hi - mid);
                *w = up.min(down).max(0.0) * norm;
            }
            if row.iter().all(|&w| w == 0.0) {
                // Filter narrower than the bin spacing: take the nearest bin
                // with the response a full triangle would integrate to.
                let k = ((mid / spacing).round() as usize).min(bins - 1);
                row[k] = 1.0 / spacing;
            }
        }
        Ok(Self { n_mels, bins, weights })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    /// Mel power from one frame of linear power.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        (0..self.n_mels)
            .map(|m| self.row(m).iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }

    fn weight_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn([self.n_mels, self.bins], |i| T::lit(self.weights[i]))
    }
}

/// Log-mel spectrogram `[frames, n_mels]` of one clip.
pub fn mel_spectrogram(audio: &AudioBuffer, cfg: &MelConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    if audio.sample_rate() != cfg.sample_rate {
        return Err(Error::Input(format!(
            "audio sample rate {} does not match mel config {}",
            audio.sample_rate(),
            cfg.sample_rate
        )));
    }
    let fb = Filterbank::new(cfg.sample_rate, cfg.window, cfg.n_mels, cfg.fmin, cfg.fmax)?;
    let spec = stft_raw(audio.samples(), cfg.window, cfg.hop)?;
    let power = spec.power();
    let mut out = Vec::with_capacity(spec.frames * cfg.n_mels);
    for t in 0..spec.frames {
        let mel = fb.apply(&power[t * spec.bins..(t + 1) * spec.bins]);
        out.extend(mel.into_iter().map(|v| v.max(LOG_FLOOR).ln() as f32));
    }
    Tensor::new([spec.frames, cfg.n_mels], out)
}

/// Differentiable log-mel of `x: [B, L]`, giving `[B, frames, n_mels]`.
pub fn log_mel_graph<T: Real>(g: &mut Graph<T>, x: NodeId, fb: &Filterbank, n_fft: usize, hop: usize) -> Result<NodeId> {
    let power = g.stft_power(x, n_fft, hop)?;
    let s = g.shape(power).to_vec();
    if s[2] != fb.bins {
        return Err(Error::shape("filterbank bins", &[fb.bins], &[s[2]]));
    }
    let flat = g.reshape(power, vec![s[0] * s[1], s[2]])?;
    let w = g.constant(&fb.weight_tensor());
    let mel = g.linear(flat, w, None)?;
    let floored = g.max_const(mel, T::lit(LOG_FLOOR));
    let logmel = g.log(floored);
    g.reshape(logmel, vec![s[0], s[1], fb.n_mels])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelScale {
    pub window: usize,
    pub hop: usize,
}

impl MelScale {
    pub fn quarter_hop(window: usize) -> Self {
        Self {
            window,
            hop: (window / 4).max(1),
        }
    }

    /// Scales bracketing a 1024-sample analysis window.
    pub fn defaults() -> Vec<Self> {
        [512, 1024, 2048].into_iter().map(Self::quarter_hop).collect()
    }

    /// Scales bracketing the 256-sample desk window.
    pub fn desk_defaults() -> Vec<Self> {
        [128, 256, 512].into_iter().map(Self::quarter_hop).collect()
    }
}

/// Mean over scales of the L1 distance between log-mel spectrograms.
#[derive(Clone, Debug)]
pub struct MultiScaleMel {
    scales: Vec<(MelScale, Filterbank)>,
    sample_rate: u32,
}

impl MultiScaleMel {
    pub fn new(cfg: &MelConfig, scales: &[MelScale]) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Config("multi-scale mel loss needs at least one scale".into()));
        }
        let scales = scales
            .iter()
            .map(|&s| {
                if s.hop == 0 || s.hop > s.window {
                    return Err(Error::Config(format!("invalid mel scale {s:?}")));
                }
                Ok((s, Filterbank::new(cfg.sample_rate, s.window, cfg.n_mels, cfg.fmin, cfg.fmax)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            scales,
            sample_rate: cfg.sample_rate,
        })
    }

    pub fn scales(&self) -> impl Iterator<Item = &MelScale> {
        self.scales.iter().map(|(s, _)| s)
    }

    /// `y`, `y_hat`: `[B, L]` nodes of equal shape.
    pub fn loss_graph<T: Real>(&self, g: &mut Graph<T>, y: NodeId, y_hat: NodeId) -> Result<NodeId> {
        if g.shape(y) != g.shape(y_hat) {
            return Err(Error::shape("multi-scale mel loss (equal lengths)", g.shape(y), g.shape(y_hat)));
        }
        let mut total: Option<NodeId> = None;
        for (s, fb) in &self.scales {
            let a = log_mel_graph(g, y, fb, s.window, s.hop)?;
            let b = log_mel_graph(g, y_hat, fb, s.window, s.hop)?;
            let d = g.l1(a, b)?;
            total = Some(match total {
                None => d,
                Some(t) => g.add(t, d)?,
            });
        }
        let total = total.expect("at least one scale");
        Ok(g.scale(total, T::lit(1.0 / self.scales.len() as f64)))
    }

    pub fn loss(&self, y: &AudioBuffer, y_hat: &AudioBuffer) -> Result<f64> {
        if y.len() != y_hat.len() {
            return Err(Error::Input(format!(
                "multi-scale mel loss needs equal lengths, got {} and {}",
                y.len(),
                y_hat.len()
            )));
        }
        if y.sample_rate() != self.sample_rate || y_hat.sample_rate() != self.sample_rate {
            return Err(Error::Input("audio sample rate does not match mel loss configuration".into()));
        }
        let mut g = Graph::<f64>::new();
        let to = |a: &AudioBuffer| Tensor::from_fn([1, a.len()], |i| a.samples()[i] as f64);
        let a = g.constant(&to(y));
        let b = g.constant(&to(y_hat));
        let l = self.loss_graph(&mut g, a, b)?;
        Ok(g.scalar(l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mel_scale_round_trip() {
        for f in [0.0, 100.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn filter_rows_positive_and_contiguous() {
        for (sr, n_fft, n_mels, fmax) in [(24000, 1024, 128, 12000.0), (8000, 256, 32, 4000.0), (8000, 128, 32, 4000.0)] {
            let fb = Filterbank::new(sr, n_fft, n_mels, 0.0, fmax).unwrap();
            for m in 0..n_mels {
                let row = fb.row(m);
                assert!(row.iter().sum::<f64>() > 0.0);
                let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
                assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len(), "row {m} has a gap");
            }
        }
    }

    #[test]
    fn zero_audio_is_log_floor() {
        let cfg = MelConfig::desk();
        let a = AudioBuffer::new(vec![0.0; 500], cfg.sample_rate).unwrap();
        let m = mel_spectrogram(&a, &cfg).unwrap();
        assert_eq!(m.shape(), &[cfg.frames(500), cfg.n_mels]);
        let floor = LOG_FLOOR.ln() as f32;
        assert!(m.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn white_noise_is_roughly_flat() {
        let cfg = MelConfig::default();
        let fb = Filterbank::new(cfg.sample_rate, cfg.window, cfg.n_mels, cfg.fmin, cfg.fmax).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut energy = vec![0.0; cfg.n_mels];
        for _ in 0..100 {
            let x: Vec<f32> = (0..4096).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let s = stft_raw(&x, cfg.window, cfg.hop).unwrap();
            let p = s.power();
            for t in 0..s.frames {
                for (e, v) in energy.iter_mut().zip(fb.apply(&p[t * s.bins..(t + 1) * s.bins])) {
                    *e += v;
                }
            }
        }
        let mean = energy.iter().sum::<f64>() / energy.len() as f64;
        let var = energy.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / energy.len() as f64;
        let cv = var.sqrt() / mean;
        assert!(cv < 0.5, "coefficient of variation {cv}");
    }

    #[test]
    fn loss_properties() {
        let cfg = MelConfig::desk();
        let msm = MultiScaleMel::new(&cfg, &MelScale::desk_defaults()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = AudioBuffer::new((0..1000).map(|_| rng.gen_range(-0.5..0.5)).collect(), 8000).unwrap();
        let z = AudioBuffer::new((0..1000).map(|_| rng.gen_range(-0.5..0.5)).collect(), 8000).unwrap();
        assert_eq!(msm.loss(&y, &y).unwrap(), 0.0);
        let (a, b) = (msm.loss(&y, &z).unwrap(), msm.loss(&z, &y).unwrap());
        assert!(a > 0.0 && a == b);
        let short = AudioBuffer::new(vec![0.0; 999], 8000).unwrap();
        assert!(msm.loss(&y, &short).is_err());
    }

    #[test]
    fn single_scale_matches_direct_l1() {
        let mut cfg = MelConfig::desk();
        cfg.window = 128;
        cfg.hop = 32;
        let msm = MultiScaleMel::new(&cfg, &[MelScale { window: 128, hop: 32 }]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = AudioBuffer::new((0..700).map(|_| rng.gen_range(-0.5..0.5)).collect(), 8000).unwrap();
        let z = AudioBuffer::new((0..700).map(|_| rng.gen_range(-0.5..0.5)).collect(), 8000).unwrap();
        let (my, mz) = (mel_spectrogram(&y, &cfg).unwrap(), mel_spectrogram(&z, &cfg).unwrap());
        let direct: f64 = my
            .data()
            .iter()
            .zip(mz.data())
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum::<f64>()
            / my.numel() as f64;
        let got = msm.loss(&y, &z).unwrap();
        assert!((got - direct).abs() < 1e-5 * direct, "{got} vs {direct}");
    }
}
