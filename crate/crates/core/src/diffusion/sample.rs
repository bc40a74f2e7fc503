use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::schedule::{q_sample, reverse_step, NoiseSchedule};
use crate::audio::noise::gaussian;
use crate::audio::{clip_in_place, Waveform};
use crate::error::{invalid, Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    FullReverse,
    FastSixStep,
}

/// Variances of the short reverse chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FastSchedule {
    pub gamma: Vec<f64>,
}

impl Default for FastSchedule {
    fn default() -> Self {
        Self {
            gamma: vec![1e-4, 1e-3, 1e-2, 0.05, 0.2, 0.35],
        }
    }
}

impl FastSchedule {
    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::from_betas(self.gamma.clone()).map(|_| ())
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    /// `∏_{i ≤ s} (1 − γ_i)`, with the empty product at `s = 0`.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        self.gamma[..s].iter().map(|g| 1.0 - g).product()
    }

    /// Training step whose noise level matches each fast step.
    pub fn effective_steps(&self, sched: &NoiseSchedule) -> Vec<usize> {
        (1..=self.len()).map(|s| sched.step_for_level(self.alpha_bar(s))).collect()
    }

    /// Number of fast steps that stay at or above the noise level `level`;
    /// at least one.
    pub fn truncation(&self, level: f64) -> usize {
        (1..=self.len()).rev().find(|&s| self.alpha_bar(s) >= level).unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PurifierConfig {
    pub t_star: usize,
    pub sampler: Sampler,
    pub seed: u64,
    pub fast: FastSchedule,
}

impl Default for PurifierConfig {
    fn default() -> Self {
        Self {
            t_star: 2,
            sampler: Sampler::FullReverse,
            seed: 0,
            fast: FastSchedule::default(),
        }
    }
}

impl PurifierConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.t_star == 0 || self.t_star > sched.steps() {
            return Err(invalid(format!("t_star {} outside 1..={}", self.t_star, sched.steps())));
        }
        self.fast.validate()
    }
}

fn normal32(seed: u64, path: &[u64], n: usize) -> Vec<f32> {
    gaussian(seed, path, n).into_iter().map(|v| v as f32).collect()
}

/// Ancestral sampling from `x` at step `from` down to 0.
pub fn reverse_from(
    x: Vec<f32>,
    from: usize,
    sched: &NoiseSchedule,
    seed: u64,
    mut predict: impl FnMut(&[f32], usize) -> Result<Vec<f32>>,
) -> Result<Vec<f32>> {
    let mut x = x;
    for t in (1..=from).rev() {
        let eps = predict(&x, t)?;
        let noise = if t > 1 { normal32(seed, &[0x5EF, t as u64], x.len()) } else { Vec::new() };
        x = reverse_step(&x, t, &eps, sched, &noise)?;
    }
    Ok(x)
}

/// Runs fast steps `s = from, …, 1`: each uses `γ_s` as its variance and
/// queries the model at the matching training step.
pub fn fast_reverse_from(
    x: Vec<f32>,
    from: usize,
    fast: &FastSchedule,
    sched: &NoiseSchedule,
    seed: u64,
    mut predict: impl FnMut(&[f32], usize) -> Result<Vec<f32>>,
) -> Result<Vec<f32>> {
    fast.validate()?;
    if from == 0 || from > fast.len() {
        return Err(invalid(format!("fast start {from} outside 1..={}", fast.len())));
    }
    let steps = fast.effective_steps(sched);
    let mut x = x;
    for s in (1..=from).rev() {
        let g = fast.gamma[s - 1];
        let ab = fast.alpha_bar(s);
        let eps = predict(&x, steps[s - 1])?;
        if eps.len() != x.len() {
            return Err(Error::LengthMismatch(eps.len(), x.len()));
        }
        let c = (g / (1.0 - ab).sqrt()) as f32;
        let inv = (1.0 / (1.0 - g).sqrt()) as f32;
        x.iter_mut().zip(&eps).for_each(|(v, &e)| *v = inv * (*v - c * e));
        if s > 1 {
            let sigma = ((1.0 - fast.alpha_bar(s - 1)) / (1.0 - ab) * g).sqrt() as f32;
            let n = normal32(seed, &[0xFA5, s as u64], x.len());
            x.iter_mut().zip(&n).for_each(|(v, &z)| *v += sigma * z);
        }
    }
    Ok(x)
}

/// Full six-step fast sampling from `x`, taken as the most-noised state.
pub fn fast_sample(
    x: Vec<f32>,
    fast: &FastSchedule,
    sched: &NoiseSchedule,
    seed: u64,
    predict: impl FnMut(&[f32], usize) -> Result<Vec<f32>>,
) -> Result<Vec<f32>> {
    fast_reverse_from(x, fast.len(), fast, sched, seed, predict)
}

/// Diffuses `x` to `t*` (or the matching fast level) and denoises back,
/// clipping to `[-1, 1]`.
pub fn purify_with(
    x: &[f32],
    sched: &NoiseSchedule,
    cfg: &PurifierConfig,
    seed: u64,
    predict: impl FnMut(&[f32], usize) -> Result<Vec<f32>>,
) -> Result<Vec<f32>> {
    cfg.validate(sched)?;
    let s = seed::derive(cfg.seed, &[seed]);
    let noise = normal32(s, &[0x9_5A3], x.len());
    let mut out = match cfg.sampler {
        Sampler::FullReverse => {
            let xt = q_sample(x, cfg.t_star, &noise, sched)?;
            reverse_from(xt, cfg.t_star, sched, s, predict)?
        }
        Sampler::FastSixStep => {
            let from = cfg.fast.truncation(sched.alpha_bar(cfg.t_star));
            let ab = cfg.fast.alpha_bar(from);
            let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let xt = x.iter().zip(&noise).map(|(&v, &n)| a * v + b * n).collect();
            fast_reverse_from(xt, from, &cfg.fast, sched, s, predict)?
        }
    };
    clip_in_place(&mut out);
    Ok(out)
}

/// Purifies a waveform with a trained denoiser conditioned on the input's
/// own spectrogram.
pub fn purify(x: &Waveform, model: &Denoiser, cfg: &PurifierConfig, seed: u64) -> Result<Waveform> {
    model.check_input(x)?;
    let cond = model.conditioner(x.samples())?;
    let out = purify_with(x.samples(), &model.noise_schedule(), cfg, seed, |xt, t| {
        model.predict(xt, t, &cond)
    })?;
    Waveform::new(out, x.sample_rate())
}
