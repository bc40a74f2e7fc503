//! White-box ℓ2 PGD and ℓ∞ BIM against a speaker encoder, plus
//! SNR-matched noise for genuine trials.

use std::fmt;

use pflow_tensor::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::asv::{score, SpeakerEncoder};
use crate::audio::noise::{add_scaled, gaussian};
use crate::audio::{power, snr_db, Waveform};
use crate::error::{invalid, Error, Result};

/// One integer step of 16-bit PCM on the `[-1, 1]` scale.
pub const PCM_UNIT: f64 = 1.0 / 32768.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    PgdL2,
    BimLinf,
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMethod::PgdL2 => "pgd_l2",
            AttackMethod::BimLinf => "bim_linf",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// Budget in PCM16 integer units.
    pub epsilon: f64,
    /// Step size in PCM16 integer units.
    pub alpha: f64,
    pub steps: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::PgdL2,
            epsilon: 30.0,
            alpha: 1.0,
            steps: 50,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.alpha > 0.0) {
            return Err(invalid("attack epsilon and alpha must be positive"));
        }
        Ok(())
    }

    /// ℓ∞ bound, or the ℓ2 radius `ε̂·√N` for an `n`-sample input.
    pub fn budget(&self, n: usize) -> f64 {
        match self.method {
            AttackMethod::BimLinf => self.epsilon * PCM_UNIT,
            AttackMethod::PgdL2 => self.epsilon * PCM_UNIT * (n as f64).sqrt(),
        }
    }

    /// Per-iteration step length in the attack's own norm.
    pub fn step(&self, n: usize) -> f64 {
        match self.method {
            AttackMethod::BimLinf => self.alpha * PCM_UNIT,
            AttackMethod::PgdL2 => self.alpha * PCM_UNIT * (n as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialExample {
    pub original: Waveform,
    pub perturbed: Waveform,
    /// `perturbed − original`, rounded to `f32`.
    pub perturbation: Vec<f32>,
    pub method: AttackMethod,
    pub steps: usize,
    pub score_before: f64,
    pub final_score: f64,
}

impl AdversarialExample {
    pub fn achieved_score_delta(&self) -> f64 {
        self.final_score - self.score_before
    }

    /// Largest `|perturbed − original|`, exact in `f64`.
    pub fn linf(&self) -> f64 {
        diff64(&self.original, &self.perturbed).fold(0.0, |m, d| m.max(d.abs()))
    }

    pub fn l2(&self) -> f64 {
        diff64(&self.original, &self.perturbed).map(|d| d * d).sum::<f64>().sqrt()
    }

    pub fn snr_db(&self) -> f64 {
        snr_db(self.original.samples(), self.perturbed.samples())
    }

    pub fn manifest_row(&self, trial_id: &str, cfg: &AttackConfig) -> String {
        format!(
            "{trial_id},{},{},{},{},{:.9},{:.9e},{:.9e},{:.6}",
            self.method,
            cfg.epsilon,
            cfg.alpha,
            self.steps,
            self.final_score,
            self.linf(),
            self.l2(),
            self.snr_db()
        )
    }
}

pub const MANIFEST_HEADER: &str = "trial_id,method,epsilon,alpha,steps,final_score,perturbation_linf,perturbation_l2,snr_db";

fn diff64<'a>(a: &'a Waveform, b: &'a Waveform) -> impl Iterator<Item = f64> + 'a {
    a.samples().iter().zip(b.samples()).map(|(&x, &y)| y as f64 - x as f64)
}

/// The enrollment side of an attacked trial.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackTarget {
    pub enroll_embedding: Vec<f32>,
    /// Target trials are pushed down, nontarget trials up.
    pub target: bool,
}

impl AttackTarget {
    pub fn direction(&self) -> f64 {
        if self.target {
            1.0
        } else {
            -1.0
        }
    }
}

/// `d·score(F(wave), enroll)` with `d = +1` for target trials and `−1` otherwise.
pub fn attack_loss<T: Real, E: SpeakerEncoder>(
    tape: &mut Tape<T>,
    model: &E,
    wave: Var,
    target: &AttackTarget,
) -> Result<Var> {
    let e = model.embed_on_tape(tape, wave)?;
    let enroll = target.enroll_embedding.iter().map(|&v| T::lit(target.direction() * v as f64)).collect();
    let enroll = tape.constant(Tensor::from_vec(enroll));
    let prod = tape.mul(e, enroll)?;
    Ok(tape.sum_all(prod))
}

/// Gradient of [`attack_loss`] with respect to the input samples.
pub fn attack_gradient<E: SpeakerEncoder>(model: &E, x: &[f32], target: &AttackTarget) -> Result<Vec<f32>> {
    let mut tape = Tape::<f32>::new();
    let v = tape.param(Tensor::from_vec(x.to_vec()));
    let loss = attack_loss(&mut tape, model, v, target)?;
    let g = tape.backward(loss)?;
    Ok(g.get_or_zeros(v, &[x.len()]).into_data())
}

/// Places `w + d` in `[-1, 1]` so that `|x − w| ≤ bound` holds exactly in `f64`.
fn place(w: f32, d: f32, bound: f64) -> f32 {
    let mut x = (w + d).clamp(-1.0, 1.0);
    while (x as f64 - w as f64).abs() > bound {
        x = if x > w { x.next_down() } else { x.next_up() };
    }
    x
}

/// Iterated sign steps clipped to the ℓ∞ box. Returns the iterate after
/// each step count in `snapshots` (ascending).
pub fn bim_linf_with(
    w: &[f32],
    cfg: &AttackConfig,
    snapshots: &[usize],
    mut grad: impl FnMut(&[f32]) -> Result<Vec<f32>>,
) -> Result<Vec<Vec<f32>>> {
    check_inputs(w, cfg, snapshots)?;
    let eps = cfg.budget(w.len());
    let alpha = cfg.step(w.len()) as f32;
    let eps32 = eps as f32;
    let mut delta = vec![0.0f32; w.len()];
    let mut x = w.to_vec();
    let mut out = Vec::with_capacity(snapshots.len());
    let last = snapshots.last().copied().unwrap_or(0);
    for k in 0..=last {
        while out.len() < snapshots.len() && snapshots[out.len()] == k {
            out.push(x.clone());
        }
        if k == last {
            break;
        }
        let g = grad(&x)?;
        for i in 0..w.len() {
            let s = if g[i] > 0.0 {
                1.0
            } else if g[i] < 0.0 {
                -1.0
            } else {
                0.0
            };
            delta[i] = (delta[i] - alpha * s).clamp(-eps32, eps32);
            x[i] = place(w[i], delta[i], eps);
            if (w[i] + delta[i]).abs() > 1.0 {
                delta[i] = x[i] - w[i];
            }
        }
    }
    Ok(out)
}

/// ℓ2-normalized steps with projection onto the ball of radius `ε̂·√N`.
/// A zero gradient skips the step.
pub fn pgd_l2_with(
    w: &[f32],
    cfg: &AttackConfig,
    snapshots: &[usize],
    mut grad: impl FnMut(&[f32]) -> Result<Vec<f32>>,
) -> Result<Vec<Vec<f32>>> {
    check_inputs(w, cfg, snapshots)?;
    let radius = cfg.budget(w.len());
    let step = cfg.step(w.len());
    let mut x = w.to_vec();
    let mut out = Vec::with_capacity(snapshots.len());
    let last = snapshots.last().copied().unwrap_or(0);
    for k in 0..=last {
        while out.len() < snapshots.len() && snapshots[out.len()] == k {
            out.push(x.clone());
        }
        if k == last {
            break;
        }
        let g = grad(&x)?;
        let gn = g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if gn == 0.0 || !gn.is_finite() {
            continue;
        }
        let mut delta: Vec<f64> = (0..w.len())
            .map(|i| x[i] as f64 - step * g[i] as f64 / gn - w[i] as f64)
            .collect();
        let dn = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        if dn > radius {
            let s = radius / dn;
            delta.iter_mut().for_each(|d| *d *= s);
        }
        loop {
            for i in 0..w.len() {
                x[i] = (w[i] as f64 + delta[i]).clamp(-1.0, 1.0) as f32;
            }
            let actual = x
                .iter()
                .zip(w)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if actual <= radius {
                break;
            }
            delta.iter_mut().for_each(|d| *d *= 1.0 - 1e-7);
        }
    }
    Ok(out)
}

fn check_inputs(w: &[f32], cfg: &AttackConfig, snapshots: &[usize]) -> Result<()> {
    if w.is_empty() {
        return Err(invalid("cannot attack zero-length audio"));
    }
    cfg.validate()?;
    if snapshots.windows(2).any(|p| p[0] >= p[1]) {
        return Err(invalid("snapshot step counts must be strictly ascending"));
    }
    Ok(())
}

/// Runs one attack on `w` and returns the adversarial example after each
/// step count in `snapshots`; `cfg.steps` is ignored in favor of them.
pub fn attack_snapshots<E: SpeakerEncoder>(
    model: &E,
    w: &Waveform,
    target: &AttackTarget,
    cfg: &AttackConfig,
    snapshots: &[usize],
) -> Result<Vec<AdversarialExample>> {
    model.check_input(w)?;
    let grad = |x: &[f32]| attack_gradient(model, x, target);
    let iterates = match cfg.method {
        AttackMethod::BimLinf => bim_linf_with(w.samples(), cfg, snapshots, grad)?,
        AttackMethod::PgdL2 => pgd_l2_with(w.samples(), cfg, snapshots, grad)?,
    };
    let score_before = score(&model.embed(w)?, &target.enroll_embedding)?;
    iterates
        .into_iter()
        .zip(snapshots)
        .map(|(x, &steps)| {
            let perturbed = Waveform::new(x, w.sample_rate())?;
            let final_score = score(&model.embed(&perturbed)?, &target.enroll_embedding)?;
            let perturbation = perturbed
                .samples()
                .iter()
                .zip(w.samples())
                .map(|(&p, &o)| p - o)
                .collect();
            Ok(AdversarialExample {
                original: w.clone(),
                perturbed,
                perturbation,
                method: cfg.method,
                steps,
                score_before,
                final_score,
            })
        })
        .collect()
}

pub fn bim_linf<E: SpeakerEncoder>(
    model: &E,
    w: &Waveform,
    target: &AttackTarget,
    cfg: &AttackConfig,
) -> Result<AdversarialExample> {
    if cfg.method != AttackMethod::BimLinf {
        return Err(invalid("bim_linf called with a non-BIM config"));
    }
    Ok(attack_snapshots(model, w, target, cfg, &[cfg.steps])?.remove(0))
}

pub fn pgd_l2<E: SpeakerEncoder>(
    model: &E,
    w: &Waveform,
    target: &AttackTarget,
    cfg: &AttackConfig,
) -> Result<AdversarialExample> {
    if cfg.method != AttackMethod::PgdL2 {
        return Err(invalid("pgd_l2 called with a non-PGD config"));
    }
    Ok(attack_snapshots(model, w, target, cfg, &[cfg.steps])?.remove(0))
}

/// Adds white noise with exactly the perturbation's power, so the genuine
/// input shares the adversarial SNR.
pub fn genuine_with_matched_noise(w: &Waveform, adv: &AdversarialExample, seed: u64) -> Result<Waveform> {
    if adv.original.len() != w.len() {
        return Err(Error::LengthMismatch(adv.original.len(), w.len()));
    }
    if w.power() == 0.0 {
        return Err(Error::Silent("matched-noise SNR"));
    }
    let p = diff64(&adv.original, &adv.perturbed).map(|d| d * d).sum::<f64>() / w.len() as f64;
    if p == 0.0 {
        return Ok(w.clone());
    }
    let noise = gaussian(seed, &[0x6E0], w.len());
    Ok(add_scaled(w, &noise, p))
}

/// Mean perturbation power over a set, in dB relative to each original.
pub fn mean_snr_db(examples: &[AdversarialExample]) -> f64 {
    let vals: Vec<f64> = examples
        .iter()
        .filter(|e| power(&e.perturbation) > 0.0)
        .map(AdversarialExample::snr_db)
        .collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}
