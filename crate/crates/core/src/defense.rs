//! Input transformations applied before scoring: smoothing filters, additive
//! noise, and diffusion purification.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audio::{add_white_noise, Waveform};
use crate::diffusion::{purify, Denoiser, PurifierConfig, Sampler};
use crate::error::{invalid, Result};

/// Anything that maps an input waveform to a defended one of the same length.
pub trait Defend: Sync {
    fn apply(&self, w: &Waveform, seed: u64) -> Result<Waveform>;
}

#[derive(Debug, Clone)]
pub enum Defense {
    Identity,
    Median { k: usize },
    Mean { k: usize },
    Gaussian { sigma: f64, k: usize },
    AddNoise { sigma: f64 },
    Dap { model: Arc<Denoiser>, cfg: PurifierConfig },
}

/// Serializable defense selection; `dap` is resolved against a loaded model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseSpec {
    Identity,
    Median {
        #[serde(default = "default_k")]
        k: usize,
    },
    Mean {
        #[serde(default = "default_k")]
        k: usize,
    },
    Gaussian {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    AddNoise {
        sigma: f64,
    },
    Dap {
        #[serde(default)]
        purifier: PurifierConfig,
    },
}

fn default_k() -> usize {
    3
}

fn default_sigma() -> f64 {
    1.0
}

/// Odd support `2·⌈3σ⌉ + 1` of the truncated Gaussian kernel.
pub fn gaussian_support(sigma: f64) -> usize {
    2 * (3.0 * sigma).ceil() as usize + 1
}

impl DefenseSpec {
    pub fn build(&self, model: Option<&Arc<Denoiser>>) -> Result<Defense> {
        let d = match self {
            DefenseSpec::Identity => Defense::Identity,
            DefenseSpec::Median { k } => Defense::Median { k: *k },
            DefenseSpec::Mean { k } => Defense::Mean { k: *k },
            DefenseSpec::Gaussian { sigma } => Defense::Gaussian {
                sigma: *sigma,
                k: gaussian_support(*sigma),
            },
            DefenseSpec::AddNoise { sigma } => Defense::AddNoise { sigma: *sigma },
            DefenseSpec::Dap { purifier } => Defense::Dap {
                model: model.ok_or_else(|| invalid("dap defense needs a trained denoiser"))?.clone(),
                cfg: purifier.clone(),
            },
        };
        d.validate()?;
        Ok(d)
    }
}

impl Defense {
    pub fn validate(&self) -> Result<()> {
        match self {
            Defense::Identity => Ok(()),
            Defense::Median { k } | Defense::Mean { k } => check_k(*k),
            Defense::Gaussian { sigma, k } => {
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(invalid(format!("gaussian kernel sigma must be positive, got {sigma}")));
                }
                check_k(*k)
            }
            Defense::AddNoise { sigma } => {
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return Err(invalid(format!("noise sigma must be nonnegative, got {sigma}")));
                }
                Ok(())
            }
            Defense::Dap { model, cfg } => cfg.validate(&model.noise_schedule()),
        }
    }

    /// Short kind name used in report rows.
    pub fn kind(&self) -> &'static str {
        match self {
            Defense::Identity => "none",
            Defense::Median { .. } => "median",
            Defense::Mean { .. } => "mean",
            Defense::Gaussian { .. } => "gaussian",
            Defense::AddNoise { .. } => "noise",
            Defense::Dap { .. } => "dap",
        }
    }

    /// Full parameterization as `key=value` pairs separated by `;`.
    pub fn params(&self) -> String {
        match self {
            Defense::Identity => String::new(),
            Defense::Median { k } | Defense::Mean { k } => format!("k={k}"),
            Defense::Gaussian { sigma, k } => format!("sigma={sigma};k={k}"),
            Defense::AddNoise { sigma } => format!("sigma={sigma}"),
            Defense::Dap { cfg, .. } => purifier_params(cfg),
        }
    }
}

fn purifier_params(cfg: &PurifierConfig) -> String {
    let sampler = match cfg.sampler {
        Sampler::FullReverse => "full_reverse",
        Sampler::FastSixStep => "fast_six_step",
    };
    format!("t_star={};sampler={sampler};seed={}", cfg.t_star, cfg.seed)
}

impl DefenseSpec {
    /// Same as [`Defense::kind`] of the built defense.
    pub fn kind(&self) -> &'static str {
        match self {
            DefenseSpec::Identity => "none",
            DefenseSpec::Median { .. } => "median",
            DefenseSpec::Mean { .. } => "mean",
            DefenseSpec::Gaussian { .. } => "gaussian",
            DefenseSpec::AddNoise { .. } => "noise",
            DefenseSpec::Dap { .. } => "dap",
        }
    }

    /// Same as [`Defense::params`] of the built defense.
    pub fn params(&self) -> String {
        match self {
            DefenseSpec::Identity => String::new(),
            DefenseSpec::Median { k } | DefenseSpec::Mean { k } => format!("k={k}"),
            DefenseSpec::Gaussian { sigma } => format!("sigma={sigma};k={}", gaussian_support(*sigma)),
            DefenseSpec::AddNoise { sigma } => format!("sigma={sigma}"),
            DefenseSpec::Dap { purifier } => purifier_params(purifier),
        }
    }
}

impl fmt::Display for DefenseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.params().as_str() {
            "" => f.write_str(self.kind()),
            p => write!(f, "{}({p})", self.kind()),
        }
    }
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.params().as_str() {
            "" => f.write_str(self.kind()),
            p => write!(f, "{}({p})", self.kind()),
        }
    }
}

impl Defend for Defense {
    fn apply(&self, w: &Waveform, seed: u64) -> Result<Waveform> {
        self.validate()?;
        let sr = w.sample_rate();
        match self {
            Defense::Identity => Ok(w.clone()),
            Defense::Median { k } => Waveform::new(median_filter(w.samples(), *k)?, sr),
            Defense::Mean { k } => Waveform::new(mean_filter(w.samples(), *k)?, sr),
            Defense::Gaussian { sigma, k } => Waveform::clipped(gaussian_filter(w.samples(), *sigma, *k)?, sr),
            Defense::AddNoise { sigma } => add_white_noise(w, *sigma, seed),
            Defense::Dap { model, cfg } => purify(w, model, cfg, seed),
        }
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(invalid(format!("kernel size must be odd and positive, got {k}")));
    }
    Ok(())
}

/// `x[i]` with indices clamped into range.
fn replicated(x: &[f32], i: isize) -> f32 {
    x[i.clamp(0, x.len() as isize - 1) as usize]
}

fn windows(x: &[f32], k: usize) -> impl Iterator<Item = Vec<f32>> + '_ {
    let h = (k / 2) as isize;
    (0..x.len() as isize).map(move |i| (i - h..=i + h).map(|j| replicated(x, j)).collect())
}

pub fn median_filter(x: &[f32], k: usize) -> Result<Vec<f32>> {
    check_k(k)?;
    Ok(windows(x, k)
        .map(|mut w| {
            w.sort_unstable_by(f32::total_cmp);
            w[k / 2]
        })
        .collect())
}

/// Correlation with an odd `kernel`, edge-replicated, accumulated in `f64`.
pub fn filter(x: &[f32], kernel: &[f64]) -> Result<Vec<f32>> {
    check_k(kernel.len())?;
    Ok(windows(x, kernel.len())
        .map(|w| w.iter().zip(kernel).map(|(&v, &c)| v as f64 * c).sum::<f64>() as f32)
        .collect())
}

pub fn mean_filter(x: &[f32], k: usize) -> Result<Vec<f32>> {
    check_k(k)?;
    filter(x, &vec![1.0 / k as f64; k])
}

/// Discretized Gaussian on `k` taps, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64, k: usize) -> Result<Vec<f64>> {
    check_k(k)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("gaussian kernel sigma must be positive, got {sigma}")));
    }
    let h = (k / 2) as f64;
    let raw: Vec<f64> = (0..k).map(|i| (-(i as f64 - h).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / z).collect())
}

pub fn gaussian_filter(x: &[f32], sigma: f64, k: usize) -> Result<Vec<f32>> {
    filter(x, &gaussian_kernel(sigma, k)?)
}
