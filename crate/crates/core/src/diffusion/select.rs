use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::sample::PurifierConfig;
use crate::asv::{evaluate_trials, AudioSource, SpeakerEncoder, TrialList};
use crate::defense::Defense;
use crate::error::{invalid, Result};
use crate::metrics::eer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TStarPoint {
    pub t: usize,
    pub eer_adversarial: f64,
    pub eer_genuine: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TStarSelection {
    pub t_star: usize,
    pub lambda: f64,
    pub curve: Vec<TStarPoint>,
}

impl TStarSelection {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,eer_adversarial,eer_genuine,objective\n");
        for p in &self.curve {
            s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", p.t, p.eer_adversarial, p.eer_genuine, p.objective));
        }
        s
    }
}

/// `{step, 2·step, …}` up to `steps`.
pub fn default_grid(steps: usize, step: usize) -> Vec<usize> {
    (1..).map(|k| k * step.max(1)).take_while(|&t| t <= steps).collect()
}

/// Minimizes `eer_adv(t) + λ·eer_gen(t)` over `grid`; ties go to the smaller `t`.
pub fn select_on_curve(
    grid: &[usize],
    lambda: f64,
    mut eval: impl FnMut(usize) -> Result<(f64, f64)>,
) -> Result<TStarSelection> {
    if grid.is_empty() {
        return Err(invalid("t* grid is empty"));
    }
    let mut ts = grid.to_vec();
    ts.sort_unstable();
    ts.dedup();
    let mut curve = Vec::with_capacity(ts.len());
    for t in ts {
        let (a, g) = eval(t)?;
        curve.push(TStarPoint {
            t,
            eer_adversarial: a,
            eer_genuine: g,
            objective: a + lambda * g,
        });
    }
    let best = curve
        .iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective).then(a.t.cmp(&b.t)))
        .expect("nonempty");
    Ok(TStarSelection {
        t_star: best.t,
        lambda,
        curve,
    })
}

/// A trial list with the audio it refers to.
pub struct TrialSet<'a, A> {
    pub trials: &'a TrialList,
    pub audio: &'a A,
}

/// Grid search for `t*` on a validation set. Without adversarial trials the
/// adversarial term is zero.
pub fn select_t_star<E: SpeakerEncoder, A: AudioSource>(
    model: &Arc<Denoiser>,
    asv: &E,
    base: &PurifierConfig,
    genuine: &TrialSet<'_, A>,
    adversarial: Option<&TrialSet<'_, A>>,
    grid: &[usize],
    lambda: f64,
    seed: u64,
) -> Result<TStarSelection> {
    if genuine.trials.is_empty() || adversarial.is_some_and(|a| a.trials.is_empty()) {
        return Err(invalid("t* selection needs nonempty validation trials"));
    }
    select_on_curve(grid, lambda, |t| {
        let defense = Defense::Dap {
            model: model.clone(),
            cfg: PurifierConfig { t_star: t, ..base.clone() },
        };
        let run = |set: &TrialSet<'_, A>| -> Result<f64> {
            let s = evaluate_trials(set.trials, set.audio, asv, Some(&defense), seed)?;
            eer(&s.labeled())
        };
        let g = run(genuine)?;
        let a = match adversarial {
            Some(set) => run(set)?,
            None => 0.0,
        };
        Ok((a, g))
    })
}
