use pflow_tensor::optim::{clip_grad_norm, collect_grads};
use pflow_tensor::{Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserConfig};
use super::schedule::{q_sample, NoiseSchedule, ScheduleConfig};
use crate::asv::OptimizerKind;
use crate::audio::noise::gaussian;
use crate::audio::Waveform;
use crate::error::{invalid, Error, Result};
use crate::seed;

/// What the denoiser sees during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DapTrainMode {
    /// Clean target conditioned on its own spectrogram.
    Clean,
    /// Clean target conditioned on the spectrogram of its adversarial version.
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DapTrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Random crop length in samples; 0 trains on whole utterances.
    pub crop_samples: usize,
    pub mode: DapTrainMode,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub momentum: f32,
    pub clip_norm: f32,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
}

impl Default for DapTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 1000,
            batch_size: 4,
            crop_samples: 2000,
            mode: DapTrainMode::Clean,
            optimizer: OptimizerKind::SgdMomentum,
            lr: 2e-4,
            momentum: 0.9,
            clip_norm: 0.0,
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

/// One term of the denoising objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossItem<T> {
    pub x0: Vec<T>,
    pub t: usize,
    pub noise: Vec<T>,
}

/// `(1/B)·Σ_b ‖ε_b − ε̂(x_t, t)‖²` with `x_t` from [`q_sample`]. `predict`
/// receives the item index alongside `x_t` and `t`.
pub fn denoising_loss<T: Real>(
    tape: &mut Tape<T>,
    sched: &NoiseSchedule,
    items: &[LossItem<T>],
    mut predict: impl FnMut(&mut Tape<T>, usize, Var, usize) -> Result<Var>,
) -> Result<Var> {
    if items.is_empty() {
        return Err(invalid("denoising loss needs a nonempty batch"));
    }
    let mut total: Option<Var> = None;
    for (i, it) in items.iter().enumerate() {
        let xt = q_sample(&it.x0, it.t, &it.noise, sched)?;
        let xt = tape.constant(Tensor::from_vec(xt));
        let eps_hat = predict(tape, i, xt, it.t)?;
        let eps = tape.constant(Tensor::from_vec(it.noise.clone()));
        let d = tape.sub(eps, eps_hat)?;
        let sq = tape.square(d);
        let s = tape.sum_all(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(tape.scale(total.expect("nonempty"), T::lit(1.0 / items.len() as f64)))
}

#[derive(Debug, Clone)]
pub struct TrainedDap {
    pub denoiser: Denoiser,
    /// Minibatch loss per iteration, before that iteration's update.
    pub losses: Vec<f64>,
}

/// Trains an ε-predictor on `clean` audio. In adversarial mode `adversarial[i]`
/// supplies the conditioner for target `clean[i]`.
pub fn train_dap(clean: &[Waveform], adversarial: Option<&[Waveform]>, cfg: &DapTrainConfig) -> Result<TrainedDap> {
    if clean.is_empty() || cfg.batch_size == 0 {
        return Err(invalid("DAP training needs data and a positive batch size"));
    }
    let conds = match (cfg.mode, adversarial) {
        (DapTrainMode::Clean, _) => clean,
        (DapTrainMode::Adversarial, Some(a)) => {
            if a.len() != clean.len() {
                return Err(Error::LengthMismatch(a.len(), clean.len()));
            }
            if let Some((x, y)) = a.iter().zip(clean).find(|(x, y)| x.len() != y.len()) {
                return Err(Error::LengthMismatch(x.len(), y.len()));
            }
            a
        }
        (DapTrainMode::Adversarial, None) => {
            return Err(invalid("adversarial DAP training needs adversarial examples"));
        }
    };
    let sr = clean[0].sample_rate();
    if clean.iter().any(|w| w.sample_rate() != sr) {
        return Err(invalid("training audio mixes sample rates"));
    }
    let mut dcfg = cfg.denoiser.clone();
    dcfg.init_seed = seed::derive(cfg.seed, &[0xDA9]);
    let mut model = Denoiser::new(&dcfg, &cfg.schedule, sr)?;
    let sched = model.noise_schedule();
    let shortest = clean.iter().map(Waveform::len).min().unwrap_or(0);
    let crop = if cfg.crop_samples == 0 { shortest } else { cfg.crop_samples.min(shortest) };
    if crop < model.min_samples() {
        return Err(Error::TooShort {
            what: "DAP training crop",
            need: model.min_samples(),
            got: crop,
        });
    }

    let mut opt = cfg.optimizer.build(cfg.lr, cfg.momentum);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut rng = seed::rng(cfg.seed, &[0x17E2, it as u64]);
        let mut items = Vec::with_capacity(cfg.batch_size);
        let mut cond = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let k = rng.random_range(0..clean.len());
            let start = rng.random_range(0..=clean[k].len() - crop);
            let t = rng.random_range(1..=sched.steps());
            let noise = gaussian(cfg.seed, &[0x17E2, it as u64, b as u64], crop);
            items.push(LossItem {
                x0: clean[k].samples()[start..start + crop].to_vec(),
                t,
                noise: noise.into_iter().map(|v| v as f32).collect(),
            });
            cond.push(model.conditioner(&conds[k].samples()[start..start + crop])?);
        }
        let mut tape = Tape::<f32>::new();
        let vars = model.params.register(&mut tape, true);
        let loss = denoising_loss(&mut tape, &sched, &items, |tape, i, x, t| {
            model.forward(tape, &vars, x, t, &cond[i])
        })?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(invalid(format!("DAP training diverged at iteration {it}")));
        }
        losses.push(value);
        let g = tape.backward(loss)?;
        let mut grads = collect_grads(&model.params, &vars, &g);
        if cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, cfg.clip_norm);
        }
        opt.step(&mut model.params, &grads);
    }
    Ok(TrainedDap { denoiser: model, losses })
}
