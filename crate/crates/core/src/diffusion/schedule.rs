use pflow_tensor::Real;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// β/α/ᾱ/β̃ tables indexed by step `t ∈ 1..=T` (stored at `t − 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_lo: 1e-4,
            beta_hi: 0.035,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_lo, self.beta_hi)
    }
}

impl NoiseSchedule {
    /// `β_t = lo + (t − 1)·(hi − lo)/(T − 1)`.
    pub fn linear(steps: usize, beta_lo: f64, beta_hi: f64) -> Result<Self> {
        if steps < 2 {
            return Err(invalid("schedule needs at least two steps"));
        }
        if !(0.0 < beta_lo && beta_lo < beta_hi && beta_hi < 1.0) {
            return Err(invalid(format!("need 0 < beta_lo < beta_hi < 1, got {beta_lo}, {beta_hi}")));
        }
        let d = (beta_hi - beta_lo) / (steps - 1) as f64;
        let mut beta: Vec<f64> = (0..steps).map(|i| beta_lo + i as f64 * d).collect();
        beta[steps - 1] = beta_hi;
        Self::from_betas(beta)
    }

    /// Builds the derived tables from strictly increasing `β_t ∈ (0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(invalid("empty beta schedule"));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(invalid("every beta must lie in (0, 1)"));
        }
        if beta.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("betas must be strictly increasing"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_tilde = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    beta[0]
                } else {
                    (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]
                }
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.beta.len() {
            return Err(Error::InvalidArgument(format!("step {t} outside 1..={}", self.beta.len())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Largest `t` with `ᾱ_t ≥ level`, or 1 when even `ᾱ_1` is below it.
    pub fn step_for_level(&self, level: f64) -> usize {
        self.alpha_bar.iter().rposition(|&a| a >= level).map_or(1, |i| i + 1)
    }
}

fn check_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// Closed-form forward marginal: `√ᾱ_t·x0 + √(1 − ᾱ_t)·noise`.
pub fn q_sample<T: Real>(x0: &[T], t: usize, noise: &[T], sched: &NoiseSchedule) -> Result<Vec<T>> {
    sched.idx(t)?;
    check_len(x0, noise)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(x0.iter().zip(noise).map(|(&x, &n)| a * x + b * n).collect())
}

/// One forward transition: `√(1 − β_t)·x_{t−1} + √β_t·noise`.
pub fn single_forward_step<T: Real>(x_prev: &[T], t: usize, noise: &[T], sched: &NoiseSchedule) -> Result<Vec<T>> {
    sched.idx(t)?;
    check_len(x_prev, noise)?;
    let bt = sched.beta(t);
    let (a, b) = (T::lit((1.0 - bt).sqrt()), T::lit(bt.sqrt()));
    Ok(x_prev.iter().zip(noise).map(|(&x, &n)| a * x + b * n).collect())
}

/// Ancestral reverse step given the predicted noise. At `t = 1` the mean is
/// returned without added noise.
pub fn reverse_step<T: Real>(
    x_t: &[T],
    t: usize,
    eps_hat: &[T],
    sched: &NoiseSchedule,
    noise: &[T],
) -> Result<Vec<T>> {
    sched.idx(t)?;
    check_len(x_t, eps_hat)?;
    let coef = T::lit(sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt());
    let inv = T::lit(1.0 / sched.alpha(t).sqrt());
    let mut out: Vec<T> = x_t.iter().zip(eps_hat).map(|(&x, &e)| inv * (x - coef * e)).collect();
    if t > 1 {
        check_len(x_t, noise)?;
        let sigma = T::lit(sched.beta_tilde(t).sqrt());
        out.iter_mut().zip(noise).for_each(|(o, &n)| *o = *o + sigma * n);
    }
    Ok(out)
}
