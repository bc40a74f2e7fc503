use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{invalid, Error, Result};

pub const SI_SDR_CAP_DB: f64 = 120.0;

/// Scale-invariant SDR in dB, capped at ±120 dB.
pub fn si_sdr(estimate: &[f32], reference: &[f32]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::LengthMismatch(estimate.len(), reference.len()));
    }
    let rr: f64 = reference.iter().map(|&r| (r as f64) * (r as f64)).sum();
    if rr == 0.0 {
        return Err(Error::Silent("SI-SDR reference"));
    }
    let er: f64 = estimate.iter().zip(reference).map(|(&e, &r)| e as f64 * r as f64).sum();
    let alpha = er / rr;
    let (mut target, mut residual) = (0.0, 0.0);
    for (&e, &r) in estimate.iter().zip(reference) {
        let t = alpha * r as f64;
        target += t * t;
        residual += (t - e as f64) * (t - e as f64);
    }
    if residual == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    if target == 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / residual).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoiConfig {
    pub frame_ms: f64,
    pub segment_frames: usize,
    pub n_bands: usize,
    pub min_band_hz: f64,
    /// Lower signal-to-distortion bound for envelope clipping.
    pub beta_db: f64,
}

impl Default for StoiConfig {
    fn default() -> Self {
        Self {
            frame_ms: 25.0,
            segment_frames: 30,
            n_bands: 15,
            min_band_hz: 150.0,
            beta_db: -15.0,
        }
    }
}

/// Simplified short-time objective intelligibility: correlation of clipped,
/// normalized third-octave band envelopes over short segments.
pub fn stoi_like(estimate: &Waveform, reference: &Waveform, cfg: &StoiConfig) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::LengthMismatch(estimate.len(), reference.len()));
    }
    if estimate.sample_rate() != reference.sample_rate() {
        return Err(invalid("sample rates differ"));
    }
    let sr = reference.sample_rate() as f64;
    if reference.duration_s() < 0.5 {
        return Err(Error::TooShort {
            what: "stoi_like",
            need: (sr * 0.5).ceil() as usize,
            got: reference.len(),
        });
    }
    let win = ((cfg.frame_ms * sr / 1000.0).round() as usize).max(2);
    let hop = (win / 2).max(1);
    let n_fft = win.next_power_of_two();
    let bins = n_fft / 2 + 1;
    let bands = third_octave_bands(cfg, sr, n_fft, bins);
    if bands.is_empty() {
        return Err(invalid("no third-octave band fits below Nyquist"));
    }
    let x = band_envelopes(reference.samples(), win, hop, n_fft, &bands);
    let y = band_envelopes(estimate.samples(), win, hop, n_fft, &bands);
    let frames = x.len() / bands.len();
    let n = cfg.segment_frames;
    if frames < n {
        return Err(Error::TooShort {
            what: "stoi_like segment",
            need: (n - 1) * hop + win,
            got: reference.len(),
        });
    }
    let clip = 1.0 + 10f64.powf(-cfg.beta_db / 20.0);
    let nb = bands.len();
    let (mut total, mut count) = (0.0, 0usize);
    for end in n..=frames {
        for b in 0..nb {
            let xs: Vec<f64> = (end - n..end).map(|m| x[m * nb + b]).collect();
            let ys: Vec<f64> = (end - n..end).map(|m| y[m * nb + b]).collect();
            let ex = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ey = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            let alpha = if ey > 0.0 { ex / ey } else { 0.0 };
            let yc: Vec<f64> = ys.iter().zip(&xs).map(|(&yv, &xv)| (alpha * yv).min(clip * xv)).collect();
            if let Some(r) = correlation(&xs, &yc) {
                total += r;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Bin ranges `[lo, hi)` of the bands that fit below Nyquist and hold at least one bin.
fn third_octave_bands(cfg: &StoiConfig, sr: f64, n_fft: usize, bins: usize) -> Vec<(usize, usize)> {
    let hz_per_bin = sr / n_fft as f64;
    (0..cfg.n_bands)
        .filter_map(|k| {
            let center = cfg.min_band_hz * 2f64.powf(k as f64 / 3.0);
            let (lo_hz, hi_hz) = (center * 2f64.powf(-1.0 / 6.0), center * 2f64.powf(1.0 / 6.0));
            if hi_hz > sr / 2.0 {
                return None;
            }
            let lo = (lo_hz / hz_per_bin).ceil() as usize;
            let hi = ((hi_hz / hz_per_bin).floor() as usize + 1).min(bins);
            (lo < hi).then_some((lo, hi))
        })
        .collect()
}

fn band_envelopes(x: &[f32], win: usize, hop: usize, n_fft: usize, bands: &[(usize, usize)]) -> Vec<f64> {
    let frames = (x.len() - win) / hop + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let window: Vec<f64> = (0..win)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (n + 1) as f64 / (win + 1) as f64).cos())
        .collect();
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(frames * bands.len());
    for f in 0..frames {
        buf.fill(Complex::new(0.0, 0.0));
        for (i, (b, w)) in buf.iter_mut().zip(&window).enumerate() {
            *b = Complex::new(x[f * hop + i] as f64 * w, 0.0);
        }
        fft.process(&mut buf);
        for &(lo, hi) in bands {
            out.push(buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
        }
    }
    out
}

fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma) * (x - ma);
        bb += (y - mb) * (y - mb);
    }
    let denom = (aa * bb).sqrt();
    (denom > 1e-12 * (1.0 + aa.max(bb))).then(|| ab / denom)
}
