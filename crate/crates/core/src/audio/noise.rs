use rand::Rng;
use rand_distr::StandardNormal;

use super::Waveform;
use crate::error::{invalid, Error, Result};
use crate::seed;

pub(crate) fn gaussian(seed: u64, path: &[u64], n: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed, path);
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Adds white Gaussian noise rescaled to the exact power that puts the
/// result at `target_snr_db`. An infinite target returns the input.
pub fn add_noise_at_snr(w: &Waveform, target_snr_db: f64, seed: u64) -> Result<Waveform> {
    if target_snr_db == f64::INFINITY {
        return Ok(w.clone());
    }
    if !target_snr_db.is_finite() {
        return Err(invalid("target SNR must be finite or +inf"));
    }
    let ps = w.power();
    if ps == 0.0 {
        return Err(Error::Silent("SNR"));
    }
    let target_power = ps / 10f64.powf(target_snr_db / 10.0);
    let noise = gaussian(seed, &[0x5A1], w.len());
    Ok(add_scaled(w, &noise, target_power))
}

/// Adds `noise` rescaled so its mean square is exactly `target_power`, then clips.
pub(crate) fn add_scaled(w: &Waveform, noise: &[f64], target_power: f64) -> Waveform {
    let pn = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    let scale = if pn > 0.0 { (target_power / pn).sqrt() } else { 0.0 };
    let samples = w
        .samples()
        .iter()
        .zip(noise)
        .map(|(&s, &n)| (s as f64 + scale * n).clamp(-1.0, 1.0) as f32)
        .collect();
    Waveform::new(samples, w.sample_rate()).expect("clipped finite samples")
}

/// `w + σ·N(0, I)`, clipped to `[-1, 1]`.
pub fn add_white_noise(w: &Waveform, sigma: f64, seed: u64) -> Result<Waveform> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("noise sigma {sigma} must be finite and nonnegative")));
    }
    if sigma == 0.0 {
        return Ok(w.clone());
    }
    let noise = gaussian(seed, &[0x0D1F], w.len());
    let samples = w
        .samples()
        .iter()
        .zip(&noise)
        .map(|(&s, &n)| (s as f64 + sigma * n).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(Waveform::new(samples, w.sample_rate()).expect("clipped finite samples"))
}
