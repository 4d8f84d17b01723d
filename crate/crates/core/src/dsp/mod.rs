//! Audio front end: STFT, mel spectrograms, multi-scale mel loss, energy VAD
//! and WAV I/O.

mod audio;
mod mel;
mod stft;
mod vad;
mod wav;

pub use audio::{AudioBuffer, MelConfig};
pub use mel::{
    hz_to_mel, log_mel_graph, mel_spectrogram, mel_to_hz, Filterbank, MelScale, MultiScaleMel, LOG_FLOOR,
};
pub use stft::{stft, stft_raw, Spectrogram};
pub use vad::{silence_proportion, VadConfig};
pub use wav::{read_wav, read_wav_at, write_wav};
