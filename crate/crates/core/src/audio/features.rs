use pflow_tensor::{Real, Tape, Tensor, Var};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const LOG_FLOOR: f64 = 1e-10;
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub mel_lo_hz: f64,
    /// Upper mel edge; `None` means Nyquist.
    pub mel_hi_hz: Option<f64>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            mel_lo_hz: 20.0,
            mel_hi_hz: None,
        }
    }
}

impl FeatureConfig {
    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let hi = self.mel_hi_hz.unwrap_or(nyquist);
        if !(self.window_ms > self.hop_ms && self.hop_ms > 0.0) {
            return Err(invalid("feature window must exceed hop, and hop must be positive"));
        }
        if self.n_mels == 0 {
            return Err(invalid("n_mels must be at least 1"));
        }
        if self.hop_samples(sample_rate) == 0 {
            return Err(invalid("hop is shorter than one sample"));
        }
        if self.fft_size < self.win_samples(sample_rate) {
            return Err(invalid(format!(
                "fft_size {} shorter than the {}-sample window",
                self.fft_size,
                self.win_samples(sample_rate)
            )));
        }
        if !(0.0 <= self.mel_lo_hz && self.mel_lo_hz < hi && hi <= nyquist) {
            return Err(invalid(format!("mel range [{}, {hi}] Hz invalid", self.mel_lo_hz)));
        }
        Ok(())
    }

    /// `floor((len − win)/hop) + 1`, or zero when shorter than a window.
    pub fn frame_count(&self, len: usize, sample_rate: u32) -> usize {
        let (win, hop) = (self.win_samples(sample_rate), self.hop_samples(sample_rate));
        if len < win || hop == 0 {
            0
        } else {
            (len - win) / hop + 1
        }
    }
}

/// Frames × mels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub n_mels: usize,
    pub frame_rate: f64,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, f: usize) -> &[f32] {
        &self.data[f * self.n_mels..(f + 1) * self.n_mels]
    }

    pub fn column(&self, m: usize) -> Vec<f32> {
        (0..self.frames).map(|f| self.data[f * self.n_mels + m]).collect()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the one-sided FFT grid, laid out `[bins × n_mels]`,
/// together with each filter's center frequency.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    let bins = n_fft / 2 + 1;
    let (mlo, mhi) = (hz_to_mel(lo), hz_to_mel(hi));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; bins * n_mels];
    for b in 0..bins {
        let f = b as f64 * sample_rate as f64 / n_fft as f64;
        for m in 0..n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = ((f - l) / (c - l)).min((r - f) / (r - c));
            if w > 0.0 {
                fb[b * n_mels + m] = w;
            }
        }
    }
    (fb, edges[1..=n_mels].to_vec())
}

/// Precomputed window and filterbank for one (config, sample rate) pair.
#[derive(Debug, Clone)]
pub struct Frontend {
    pub cfg: FeatureConfig,
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    window: Vec<f64>,
    filterbank: Vec<f64>,
    centers: Vec<f64>,
}

impl Frontend {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let win = cfg.win_samples(sample_rate);
        let hop = cfg.hop_samples(sample_rate);
        let window = (0..win)
            .map(|n| {
                if win == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos()
                }
            })
            .collect();
        let hi = cfg.mel_hi_hz.unwrap_or(sample_rate as f64 / 2.0);
        let (filterbank, centers) = mel_filterbank(sample_rate, cfg.fft_size, cfg.n_mels, cfg.mel_lo_hz, hi);
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            win,
            hop,
            window,
            filterbank,
            centers,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.cfg.n_mels
    }

    pub fn bins(&self) -> usize {
        self.cfg.fft_size / 2 + 1
    }

    pub fn mel_centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn frame_count(&self, len: usize) -> usize {
        self.cfg.frame_count(len, self.sample_rate)
    }

    fn check_len(&self, len: usize, min_frames: usize) -> Result<()> {
        let need = self.win + (min_frames - 1) * self.hop;
        if len < need {
            return Err(Error::TooShort {
                what: "filterbank",
                need,
                got: len,
            });
        }
        Ok(())
    }

    /// Mel energies before the log, `[frames × n_mels]`, in `f64`.
    pub fn mel_energies(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_len(x.len(), 1)?;
        let frames = self.frame_count(x.len());
        let n_fft = self.cfg.fft_size;
        let (bins, m) = (self.bins(), self.n_mels());
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; bins];
        let mut out = vec![0.0; frames * m];
        for f in 0..frames {
            let seg = &x[f * self.hop..f * self.hop + self.win];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = match seg.get(i) {
                    Some(&s) => Complex::new(s as f64 * self.window[i], 0.0),
                    None => Complex::new(0.0, 0.0),
                };
            }
            fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = &mut out[f * m..(f + 1) * m];
            for (b, &p) in power.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (r, &w) in row.iter_mut().zip(&self.filterbank[b * m..(b + 1) * m]) {
                    *r += p * w;
                }
            }
        }
        Ok(out)
    }

    pub fn logfbank(&self, x: &[f32]) -> Result<FeatureMatrix> {
        let energies = self.mel_energies(x)?;
        let m = self.n_mels();
        Ok(FeatureMatrix {
            frames: energies.len() / m,
            n_mels: m,
            frame_rate: self.sample_rate as f64 / self.hop as f64,
            data: energies.iter().map(|&e| (e + LOG_FLOOR).ln() as f32).collect(),
        })
    }

    /// Differentiable log filterbank of a 1-D signal: `[frames × n_mels]`.
    pub fn logfbank_on_tape<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_len(tape.shape(x)[0], 1)?;
        let frames = tape.frames(x, self.win, self.hop)?;
        let window = tape.constant(Tensor::from_vec(self.window.iter().map(|&v| T::lit(v)).collect()));
        let windowed = tape.mul(frames, window)?;
        let power = tape.power_spectrum(windowed, self.cfg.fft_size)?;
        let fb = Tensor::new(
            &[self.bins(), self.n_mels()],
            self.filterbank.iter().map(|&v| T::lit(v)).collect(),
        )?;
        let fb = tape.constant(fb);
        let mel = tape.matmul(power, fb)?;
        let floored = tape.add_scalar(mel, T::lit(LOG_FLOOR));
        Ok(tape.log(floored)?)
    }

    /// Log filterbank followed by per-utterance CMVN, on the tape.
    pub fn features_on_tape<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_len(tape.shape(x)[0], 2)?;
        let f = self.logfbank_on_tape(tape, x)?;
        cmvn_on_tape(tape, f)
    }
}

/// Per-column mean/variance normalization over the frame axis of `[frames × dims]`.
pub fn cmvn_on_tape<T: Real>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    if tape.shape(f)[0] < 2 {
        return Err(invalid("cmvn needs at least two frames"));
    }
    let mean = tape.mean(f, 0)?;
    let centered = tape.sub(f, mean)?;
    let sq = tape.square(centered);
    let var = tape.mean(sq, 0)?;
    let var = tape.clamp(var, T::lit(VAR_FLOOR), T::max_value());
    let std = tape.sqrt(var)?;
    Ok(tape.div(centered, std)?)
}

pub fn logfbank(samples: &[f32], sample_rate: u32, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    Frontend::new(cfg, sample_rate)?.logfbank(samples)
}

/// Zero-mean, unit-variance columns; variance floored at 1e-8.
pub fn cmvn(f: &FeatureMatrix) -> Result<FeatureMatrix> {
    if f.frames < 2 {
        return Err(invalid("cmvn needs at least two frames"));
    }
    let (n, m) = (f.frames, f.n_mels);
    let mut out = f.clone();
    for c in 0..m {
        let col: Vec<f64> = (0..n).map(|r| f.data[r * m + c] as f64).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.max(VAR_FLOOR).sqrt();
        for (r, v) in col.iter().enumerate() {
            out.data[r * m + c] = ((v - mean) / std) as f32;
        }
    }
    Ok(out)
}
