//! Self-check suite behind `pflow verify`: schedule algebra, metric
//! oracles and gradient checks, each against a direct reimplementation.

use pflow_core::asv::{Encoder, EncoderConfig, SpeakerEncoder};
use pflow_core::attack::{attack_loss, AttackTarget};
use pflow_core::audio::{FeatureConfig, Waveform};
use pflow_core::diffusion::{denoising_loss, q_sample, reverse_step, LossItem, NoiseSchedule};
use pflow_core::metrics::{eer, min_dcf, si_sdr, DcfParams, LabeledScore};
use pflow_tensor::{grad_check, Padding, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: &'static str,
    /// Worst observed error on success, the violation on failure.
    pub outcome: Result<String, String>,
}

type Outcome = Result<String, String>;

pub fn run_all() -> Vec<Check> {
    let checks: [(&'static str, fn() -> Outcome); 6] = [
        ("schedule", schedule),
        ("reverse", reverse),
        ("eer-min-dcf", error_rates),
        ("rank-invariance", rank_invariance),
        ("si-sdr", si_sdr_formula),
        ("gradients", gradients),
    ];
    checks
        .into_iter()
        .map(|(name, f)| Check { name, outcome: f() })
        .collect()
}

fn within(name: &str, err: f64, tol: f64) -> Outcome {
    if err <= tol {
        Ok(format!("max error {err:.3e} <= {tol:e}"))
    } else {
        Err(format!("{name}: error {err:.3e} exceeds {tol:e}"))
    }
}

fn schedule() -> Outcome {
    let (steps, lo, hi) = (100, 1e-4, 0.035);
    let s = NoiseSchedule::linear(steps, lo, hi).map_err(|e| e.to_string())?;
    if s.beta_tilde(1) != s.beta(1) {
        return Err("beta_tilde(1) != beta(1)".into());
    }
    let mut worst = 0.0f64;
    let mut prod = 1.0f64;
    for t in 1..=steps {
        let beta = lo + (hi - lo) * (t - 1) as f64 / (steps - 1) as f64;
        let prev = prod;
        prod *= 1.0 - beta;
        worst = worst
            .max((s.beta(t) - beta).abs())
            .max((s.alpha(t) - (1.0 - beta)).abs())
            .max((s.alpha_bar(t) - prod).abs());
        if t > 1 {
            worst = worst.max((s.beta_tilde(t) - (1.0 - prev) / (1.0 - prod) * beta).abs());
        }
    }
    within("schedule", worst, 1e-12)
}

fn reverse() -> Outcome {
    let s = NoiseSchedule::linear(100, 1e-4, 0.035).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eps: Vec<f64> = (0..256).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x1 = q_sample(&x0, 1, &eps, &s).map_err(|e| e.to_string())?;
    let back = reverse_step(&x1, 1, &eps, &s, &vec![0.0; 256]).map_err(|e| e.to_string())?;
    let err = x0.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    within("t=1 recovery", err, 1e-6)?;

    let mut tape = Tape::<f64>::new();
    let items = vec![LossItem {
        x0: x0.clone(),
        t: 37,
        noise: eps.clone(),
    }];
    let loss = denoising_loss(&mut tape, &s, &items, |tape, _, _, _| {
        Ok(tape.constant(Tensor::from_vec(eps.clone())))
    })
    .map_err(|e| e.to_string())?;
    match tape.value(loss).data()[0] {
        0.0 => Ok(format!("recovery error {err:.3e}, oracle loss 0")),
        l => Err(format!("oracle denoising loss is {l}, not 0")),
    }
}

fn sweep(s: &[LabeledScore]) -> Vec<(f64, f64)> {
    let n_t = s.iter().filter(|x| x.target).count() as f64;
    let n_n = s.len() as f64 - n_t;
    let mut th: Vec<f64> = s.iter().map(|x| x.score).chain([f64::INFINITY]).collect();
    th.sort_by(f64::total_cmp);
    th.dedup();
    th.iter()
        .map(|&t| {
            let fa = s.iter().filter(|x| !x.target && x.score >= t).count() as f64;
            let fr = s.iter().filter(|x| x.target && x.score < t).count() as f64;
            (fa / n_n, fr / n_t)
        })
        .collect()
}

fn sweep_eer(s: &[LabeledScore]) -> f64 {
    let pts = sweep(s);
    let i = pts.iter().position(|&(fa, fr)| fa <= fr).expect("+inf threshold has fa = 0");
    let (fa, fr) = pts[i];
    if fa == fr || i == 0 {
        return 100.0 * fa.max(fr);
    }
    let (pfa, pfr) = pts[i - 1];
    let w = (pfa - pfr) / ((pfa - pfr) - (fa - fr));
    100.0 * (pfa + w * (fa - pfa))
}

fn sweep_dcf(s: &[LabeledScore], p: f64) -> f64 {
    sweep(s)
        .iter()
        .map(|&(fa, fr)| p * fr + (1.0 - p) * fa)
        .fold(f64::INFINITY, f64::min)
        / p.min(1.0 - p)
}

fn random_scores(rng: &mut ChaCha8Rng) -> Vec<LabeledScore> {
    let n = rng.random_range(2..60);
    let mut s: Vec<LabeledScore> = (0..n)
        .map(|_| {
            let target = rng.random_bool(0.5);
            let score = (rng.random_range(-1.0..1.0f64) * 8.0).round() / 8.0 + if target { 0.2 } else { 0.0 };
            LabeledScore { score, target }
        })
        .collect();
    s[0].target = true;
    s[1].target = false;
    s
}

fn error_rates() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p = DcfParams::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = random_scores(&mut rng);
        let e = eer(&s).map_err(|e| e.to_string())?;
        let d = min_dcf(&s, &p).map_err(|e| e.to_string())?;
        worst = worst.max((e - sweep_eer(&s)).abs()).max((d - sweep_dcf(&s, p.p_target)).abs());
    }
    within("eer/min_dcf vs sweep", worst, 1e-9)
}

fn rank_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let p = DcfParams::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = random_scores(&mut rng);
        let (e, d) = (eer(&s).map_err(|e| e.to_string())?, min_dcf(&s, &p).map_err(|e| e.to_string())?);
        let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
        for f in [&(|v: f64| v.exp()) as &dyn Fn(f64) -> f64, &|v| a * v + b] {
            let t: Vec<_> = s.iter().map(|x| LabeledScore { score: f(x.score), ..*x }).collect();
            worst = worst
                .max((eer(&t).map_err(|e| e.to_string())? - e).abs())
                .max((min_dcf(&t, &p).map_err(|e| e.to_string())? - d).abs());
        }
    }
    within("rank invariance", worst, 1e-9)
}

fn si_sdr_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(10..2000);
        let r: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = rng.random_range(0.01f32..2.0);
        let e: Vec<f32> = r.iter().map(|&v| 0.7 * v + g * rng.random_range(-1.0f32..1.0)).collect();
        let (e64, r64): (Vec<f64>, Vec<f64>) = (e.iter().map(|&v| v as f64).collect(), r.iter().map(|&v| v as f64).collect());
        let alpha = e64.iter().zip(&r64).map(|(a, b)| a * b).sum::<f64>() / r64.iter().map(|v| v * v).sum::<f64>();
        let target: f64 = r64.iter().map(|v| (alpha * v).powi(2)).sum();
        let resid: f64 = e64.iter().zip(&r64).map(|(a, b)| (alpha * b - a).powi(2)).sum();
        let want = 10.0 * (target / resid).log10();
        worst = worst.max((si_sdr(&e, &r).map_err(|e| e.to_string())? - want).abs());
    }
    within("si_sdr", worst, 1e-6)
}

fn weighted_sum(t: &mut Tape<f64>, y: Var) -> Result<Var, TensorError> {
    let n = t.value(y).numel();
    let w = t.constant(Tensor::new(
        t.shape(y),
        (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect(),
    )?);
    let p = t.mul(y, w)?;
    Ok(t.sum_all(p))
}

fn gradients() -> Outcome {
    type OpFn = fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>;
    let ops: [(&str, &[usize], OpFn); 9] = [
        ("exp", &[6], |t, v| Ok(t.exp(v))),
        ("tanh", &[6], |t, v| Ok(t.tanh(v))),
        ("sigmoid", &[6], |t, v| Ok(t.sigmoid(v))),
        ("swish", &[6], |t, v| Ok(t.swish(v))),
        ("square", &[6], |t, v| Ok(t.square(v))),
        ("matmul", &[2, 3], |t, v| {
            let b = t.constant(Tensor::new(&[3, 2], vec![1., -2., 0.5, 0.1, 3., -1.])?);
            t.matmul(v, b)
        }),
        ("conv1d", &[2, 9], |t, v| {
            let w = t.constant(Tensor::new(&[3, 2, 3], (0..18).map(|i| (i as f64 * 0.37).sin()).collect())?);
            t.conv1d(v, w, 2, Padding::Same)
        }),
        ("frames", &[20], |t, v| t.frames(v, 8, 3)),
        ("power_spectrum", &[3, 6], |t, v| t.power_spectrum(v, 8)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for (name, shape, op) in ops {
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).map_err(|e| e.to_string())?;
        let r = grad_check(
            |t, v| {
                let y = op(t, v)?;
                weighted_sum(t, y)
            },
            &x,
            1e-5,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        within(name, r.max_rel_error, 1e-4)?;
        worst = worst.max(r.max_rel_error);
    }

    let feats = FeatureConfig {
        n_mels: 4,
        fft_size: 32,
        ..FeatureConfig::default()
    };
    let cfg = EncoderConfig {
        channels: 3,
        embedding_dim: 3,
        blocks: vec![(3, 1)],
        init_seed: 2,
    };
    let enc = Encoder::new(&cfg, &feats, 1000).map_err(|e| e.to_string())?;
    let enroll_wave = Waveform::new((0..90).map(|_| rng.random_range(-0.5f32..0.5)).collect(), 1000).map_err(|e| e.to_string())?;
    let enroll = enc.embed(&enroll_wave).map_err(|e| e.to_string())?;
    let x = Tensor::from_vec((0..90).map(|_| rng.random_range(-0.5..0.5)).collect());
    for target in [true, false] {
        let t = AttackTarget {
            enroll_embedding: enroll.clone(),
            target,
        };
        let r = grad_check(
            |tape, v| attack_loss(tape, &enc, v, &t).map_err(|e| TensorError::InvalidArgument { op: "attack_loss", msg: e.to_string() }),
            &x,
            1e-6,
        )
        .map_err(|e| format!("attack loss: {e}"))?;
        within("attack loss", r.max_rel_error, 1e-3)?;
    }
    Ok(format!("op max rel error {worst:.3e}; attack loss within 1e-3"))
}
