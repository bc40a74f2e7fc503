//! Waveforms, WAV I/O, the synthetic speaker corpus, and filterbank features.

mod corpus;
mod features;
pub(crate) mod noise;
mod wav;

pub use corpus::{synth_corpus, CorpusConfig, SpeakerCorpus, SpeakerProfile, Split, Utterance};
pub use features::{cmvn, logfbank, mel_filterbank, FeatureConfig, FeatureMatrix, Frontend};
pub use noise::{add_noise_at_snr, add_white_noise};
pub use wav::{load_wav, save_wav};

use crate::error::{invalid, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    /// Validates finiteness, range, length, and rate.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(invalid("waveform must hold at least one sample"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(invalid(format!("sample {i} = {} outside [-1, 1]", samples[i])));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Clips into `[-1, 1]`; non-finite samples are rejected.
    pub fn clipped(mut samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(invalid(format!("sample {i} is not finite")));
        }
        clip_in_place(&mut samples);
        Self::new(samples, sample_rate)
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

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        power(&self.samples)
    }
}

pub fn clip_in_place(x: &mut [f32]) {
    for s in x {
        *s = s.clamp(-1.0, 1.0);
    }
}

/// Mean square, accumulated in `f64`.
pub fn power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

/// `10·log10(P_signal / P_noise)` where the noise is `noisy − clean`.
pub fn snr_db(clean: &[f32], noisy: &[f32]) -> f64 {
    let diff: Vec<f64> = clean
        .iter()
        .zip(noisy)
        .map(|(&a, &b)| b as f64 - a as f64)
        .collect();
    let pn = diff.iter().map(|d| d * d).sum::<f64>() / diff.len().max(1) as f64;
    10.0 * (power(clean) / pn).log10()
}
