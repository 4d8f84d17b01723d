use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::numerics::{hann, reflect_index};

/// One-sided complex spectrogram, row-major `[frames, bins]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Short-time Fourier transform with a periodic Hann window of `window`
/// samples. The signal is reflect-padded by `window/2` on both sides and frame
/// `t` is centred on sample `t*hop`, giving `ceil(len/hop)` frames.
pub fn stft_raw(samples: &[f32], window: usize, hop: usize) -> Result<Spectrogram> {
    if samples.is_empty() {
        return Err(Error::Input("stft of empty audio".into()));
    }
    if window == 0 || hop == 0 {
        return Err(Error::Config("stft window and hop must be >= 1".into()));
    }
    let len = samples.len();
    let frames = len.div_ceil(hop);
    let bins = window / 2 + 1;
    let w: Vec<f64> = hann(window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window);
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    let mut data = Vec::with_capacity(frames * bins);
    let half = (window / 2) as isize;
    for t in 0..frames {
        let start = (t * hop) as isize - half;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(samples[reflect_index(start + n as isize, len)] as f64 * w[n], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram { frames, bins, data })
}

pub fn stft(audio: &AudioBuffer, window: usize, hop: usize) -> Result<Spectrogram> {
    stft_raw(audio.samples(), window, hop)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_give_zero_magnitude() {
        let s = stft_raw(&[0.0; 100], 32, 8).unwrap();
        assert_eq!(s.frames, 13);
        assert!(s.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn bin_centred_sine_peaks_at_its_bin() {
        let (n, k) = (64usize, 5usize);
        let x: Vec<f32> = (0..640)
            .map(|i| (2.0 * std::f64::consts::PI * k as f64 * i as f64 / n as f64).sin() as f32)
            .collect();
        let s = stft_raw(&x, n, 16).unwrap();
        // frames whose window lies fully inside the signal (no reflection)
        let interior = (n / 2 / 16)..((640 - n / 2) / 16 + 1);
        assert!(interior.len() > 30);
        for t in interior {
            let mags: Vec<f64> = s.frame(t).iter().map(|c| c.norm()).collect();
            let arg = mags
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(arg, k, "frame {t}");
        }
    }

    #[test]
    fn parseval_per_frame() {
        // sum over the full spectrum of |X|^2 = N * sum (w x)^2
        let n = 128;
        let x: Vec<f32> = (0..1000).map(|i| ((i * 7919 % 997) as f32 / 997.0) - 0.5).collect();
        let s = stft_raw(&x, n, 32).unwrap();
        let w: Vec<f64> = hann(n);
        let half = (n / 2) as isize;
        for t in 0..s.frames {
            let fr = s.frame(t);
            let spec: f64 = fr[0].norm_sqr()
                + fr[n / 2].norm_sqr()
                + 2.0 * fr[1..n / 2].iter().map(|c| c.norm_sqr()).sum::<f64>();
            let start = (t * 32) as isize - half;
            let time: f64 = (0..n)
                .map(|i| {
                    let v = x[reflect_index(start + i as isize, x.len())] as f64 * w[i];
                    v * v
                })
                .sum::<f64>()
                * n as f64;
            assert!((spec - time).abs() <= 1e-3 * time.max(1e-12), "frame {t}: {spec} vs {time}");
        }
    }

    #[test]
    fn frame_count_is_ceil_len_over_hop() {
        for len in 1..=40 {
            assert_eq!(stft_raw(&vec![0.1; len], 16, 4).unwrap().frames, len.div_ceil(4));
        }
        assert!(stft_raw(&[], 16, 4).is_err());
    }
}
