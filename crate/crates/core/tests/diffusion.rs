use std::cell::Cell;

use pflow_core::audio::{FeatureConfig, Waveform};
use pflow_core::diffusion::*;
use pflow_core::Error;
use pflow_tensor::{grad_check, Container, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(100, 1e-4, 0.035).unwrap()
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn linear_schedule_matches_product_oracle() {
    let s = default_schedule();
    assert_eq!(s.steps(), 100);
    assert_eq!(s.beta(1), 1e-4);
    assert_eq!(s.beta(100), 0.035);
    assert_eq!(s.beta_tilde(1), s.beta(1));
    assert_eq!(s.alpha_bar(0), 1.0);

    let mut log_prod = 0.0f64;
    for t in 1..=100 {
        let beta = 1e-4 + (t - 1) as f64 * (0.035 - 1e-4) / 99.0;
        assert!((s.beta(t) - beta).abs() < 1e-12);
        assert!((s.alpha(t) - (1.0 - s.beta(t))).abs() < 1e-12);
        assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-12);
        log_prod += (-beta).ln_1p();
        assert!((s.alpha_bar(t) / log_prod.exp() - 1.0).abs() < 1e-10, "t={t}");
        if t > 1 {
            let bt = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
            assert!((s.beta_tilde(t) - bt).abs() < 1e-12);
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }
}

#[test]
fn schedule_rejects_bad_bounds() {
    assert!(NoiseSchedule::linear(1, 1e-4, 0.035).is_err());
    assert!(NoiseSchedule::linear(10, 0.0, 0.035).is_err());
    assert!(NoiseSchedule::linear(10, 0.1, 0.05).is_err());
    assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    assert!(NoiseSchedule::from_betas(vec![0.1, 0.1]).is_err());
    assert!(ScheduleConfig { steps: 0, ..Default::default() }.build().is_err());
}

#[test]
fn q_sample_without_noise_is_scaled_input() {
    let s = default_schedule();
    let x0 = [0.5, -0.25, 1.0];
    let out = q_sample(&x0, 37, &[0.0; 3], &s).unwrap();
    let a = s.alpha_bar(37).sqrt();
    assert_eq!(out, x0.map(|v| a * v).to_vec());
    assert!(q_sample(&x0, 0, &[0.0; 3], &s).is_err());
    assert!(q_sample(&x0, 101, &[0.0; 3], &s).is_err());
    assert!(q_sample(&x0, 3, &[0.0; 2], &s).is_err());

    let step = single_forward_step(&x0, 5, &[0.0; 3], &s).unwrap();
    let a = (1.0 - s.beta(5)).sqrt();
    assert_eq!(step, x0.map(|v| a * v).to_vec());
}

#[test]
fn q_sample_moments_match_closed_form() {
    let s = default_schedule();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = normals(&mut rng, n);
    let xt = q_sample(&vec![1.0; n], 10, &noise, &s).unwrap();
    let (m, v) = mean_var(&xt);
    let var = 1.0 - s.alpha_bar(10);
    assert!((m - s.alpha_bar(10).sqrt()).abs() < 3.0 * (var / n as f64).sqrt());
    assert!((v - var).abs() < 3.0 * var * (2.0 / (n - 1) as f64).sqrt());
}

#[test]
fn forward_chain_matches_marginal() {
    let s = default_schedule();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut x = vec![1.0f64; n];
    for t in 1..=100 {
        x = single_forward_step(&x, t, &normals(&mut rng, n), &s).unwrap();
        if [1, 5, 10, 50, 100].contains(&t) {
            let (m, v) = mean_var(&x);
            let var = 1.0 - s.alpha_bar(t);
            assert!((m - s.alpha_bar(t).sqrt()).abs() < 3.0 * (var / n as f64).sqrt(), "mean at t={t}");
            assert!((v - var).abs() < 3.0 * var * (2.0 / (n - 1) as f64).sqrt(), "variance at t={t}");
        }
    }
}

#[test]
fn first_forward_step_has_schedule_variance() {
    let s = default_schedule();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = single_forward_step(&vec![0.0; n], 1, &normals(&mut rng, n), &s).unwrap();
    let (_, v) = mean_var(&x);
    assert!((v - 1e-4).abs() < 3.0 * 1e-4 * (2.0 / (n - 1) as f64).sqrt());
}

#[test]
fn heavy_noise_dominates_marginal() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let n = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0: Vec<f64> = (0..n).map(|i| (i as f64 * 0.05).sin()).collect();
    let noise = normals(&mut rng, n);
    let xt = q_sample(&x0, 1000, &noise, &s).unwrap();
    let (mx, vx) = mean_var(&xt);
    let (mn, vn) = mean_var(&noise);
    let cov = xt.iter().zip(&noise).map(|(a, b)| (a - mx) * (b - mn)).sum::<f64>() / (n - 1) as f64;
    assert!(cov / (vx * vn).sqrt() > 0.99);
}

#[test]
fn reverse_step_recovers_input_with_oracle_noise() {
    let s = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eps = normals(&mut rng, 256);
    let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
    let back = reverse_step(&x1, 1, &eps, &s, &[]).unwrap();
    for (a, b) in back.iter().zip(&x0) {
        assert!((a - b).abs() < 1e-6);
    }

    let xt = vec![0.3f64, -0.7];
    let mu = reverse_step(&xt, 1, &[0.0, 0.0], &s, &[]).unwrap();
    let inv = 1.0 / s.alpha(1).sqrt();
    assert_eq!(mu, vec![inv * 0.3, inv * -0.7]);
    assert!(reverse_step(&xt, 0, &[0.0, 0.0], &s, &[]).is_err());
    assert!(reverse_step(&xt, 2, &[0.0, 0.0], &s, &[0.0]).is_err());
}

#[test]
fn oracle_predictor_gives_zero_loss() {
    let s = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let items: Vec<LossItem<f64>> = (0..4)
        .map(|i| LossItem {
            x0: (0..100).map(|_| rng.random_range(-0.5..0.5)).collect(),
            t: 1 + 30 * i,
            noise: normals(&mut rng, 100),
        })
        .collect();
    let mut tape = Tape::<f64>::new();
    let loss = denoising_loss(&mut tape, &s, &items, |tape, i, _, _| {
        Ok(tape.constant(Tensor::from_vec(items[i].noise.clone())))
    })
    .unwrap();
    assert_eq!(tape.value(loss).data(), &[0.0]);
}

#[test]
fn zero_predictor_loss_is_sample_count() {
    let s = default_schedule();
    let (n, b) = (1000, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items: Vec<LossItem<f64>> = (0..b)
        .map(|i| LossItem {
            x0: vec![0.1; n],
            t: 1 + i,
            noise: normals(&mut rng, n),
        })
        .collect();
    let mut tape = Tape::<f64>::new();
    let loss = denoising_loss(&mut tape, &s, &items, |tape, _, _, _| Ok(tape.constant(Tensor::zeros(&[n])))).unwrap();
    let v = tape.value(loss).data()[0];
    assert!((v - n as f64).abs() < 4.0 * (2.0 * n as f64 / b as f64).sqrt(), "{v}");
    assert!(denoising_loss(&mut tape, &s, &[], |tape, _, _, _| Ok(tape.constant(Tensor::zeros(&[1])))).is_err());
}

fn tiny_denoiser() -> Denoiser {
    let cfg = DenoiserConfig {
        channels: 2,
        blocks: 2,
        dilation_cycle: 2,
        kernel: 3,
        t_embed_dim: 4,
        t_hidden: 4,
        cond: CondConfig {
            features: FeatureConfig {
                n_mels: 4,
                fft_size: 32,
                ..FeatureConfig::default()
            },
            floor: 1e-4,
        },
        init_seed: 9,
    };
    let mut d = Denoiser::new(&cfg, &ScheduleConfig::default(), 1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..d.params.len() {
        let p = d.params.get(i);
        let data = p.data().iter().map(|&v| v + rng.random_range(-0.3f32..0.3)).collect();
        d.params.set(i, Tensor::new(p.shape(), data).unwrap());
    }
    d
}

#[test]
fn denoising_loss_gradient_matches_finite_differences() {
    let d = tiny_denoiser();
    assert!(d.params.num_scalars() <= 200, "{}", d.params.num_scalars());
    let s = d.noise_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0: Vec<f32> = (0..64).map(|_| rng.random_range(-0.5f32..0.5)).collect();
    let cond = d.conditioner(&x0).unwrap();
    let items = [LossItem {
        x0: x0.iter().map(|&v| v as f64).collect(),
        t: 7,
        noise: normals(&mut rng, 64),
    }];
    for p in 0..d.params.len() {
        let x = d.params.get(p).cast::<f64>();
        let report = grad_check(
            |tape, v| {
                let vars: Vec<_> = (0..d.params.len())
                    .map(|j| if j == p { v } else { tape.constant(d.params.get(j).cast()) })
                    .collect();
                denoising_loss(tape, &s, &items, |tape, _, xt, t| d.forward(tape, &vars, xt, t, &cond)).map_err(tensor_err)
            },
            &x,
            1e-6,
        )
        .unwrap_or_else(|e| panic!("{}: {e}", d.params.names()[p]));
        assert!(report.max_rel_error < 1e-4, "{}: {report:?}", d.params.names()[p]);
    }
}

#[test]
fn denoiser_output_matches_input_length() {
    let cfg = DenoiserConfig::default();
    let d = Denoiser::new(&cfg, &ScheduleConfig::default(), 8000).unwrap();
    for len in [8000, 16000, 24000] {
        let x: Vec<f32> = (0..len).map(|i| 0.1 * (i as f32 * 0.03).sin()).collect();
        let cond = d.conditioner(&x).unwrap();
        assert_eq!(cond.len(), len);
        assert_eq!(cond.upsampled().len(), len * cond.mels);
        let e = d.predict(&x, 3, &cond).unwrap();
        assert_eq!(e.len(), len);
        assert_eq!(e, d.predict(&x, 3, &cond).unwrap());
        let out = reverse_from(x.clone(), 2, &d.noise_schedule(), 0, |xt, t| d.predict(xt, t, &cond)).unwrap();
        assert_eq!(out.len(), len);
    }
    let short = vec![0.0f32; 10];
    assert!(d.conditioner(&short).is_err());
}

#[test]
fn conditioner_interpolates_between_frames() {
    let d = tiny_denoiser();
    let x: Vec<f32> = (0..100).map(|i| (i as f32 * 0.7).sin() * 0.3).collect();
    let c = d.conditioner(&x).unwrap();
    let up = c.upsampled();
    for m in 0..c.mels {
        let row = &c.data[m * c.frames..(m + 1) * c.frames];
        let lo = row.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for &v in &up[m * x.len()..(m + 1) * x.len()] {
            assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
        assert_eq!(up[m * x.len()], row[0]);
        assert_eq!(up[(m + 1) * x.len() - 1], row[c.frames - 1]);
    }
}

#[test]
fn fast_schedule_steps_and_evaluation_count() {
    let s = default_schedule();
    let fast = FastSchedule::default();
    assert_eq!(fast.gamma, vec![1e-4, 1e-3, 1e-2, 0.05, 0.2, 0.35]);
    fast.validate().unwrap();
    let steps = fast.effective_steps(&s);
    assert_eq!(steps.len(), 6);
    for (k, &t) in steps.iter().enumerate() {
        let level = fast.alpha_bar(k + 1);
        assert!(s.alpha_bar(t) >= level);
        assert!(t == s.steps() || s.alpha_bar(t + 1) < level);
    }
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(fast.truncation(1.0), 1);
    assert_eq!(fast.truncation(0.0), 6);

    let calls = Cell::new(0);
    let x: Vec<f32> = (0..500).map(|i| (i as f32 * 0.01).cos() * 0.2).collect();
    let out = fast_sample(x.clone(), &fast, &s, 1, |xt, _| {
        calls.set(calls.get() + 1);
        Ok(vec![0.0; xt.len()])
    })
    .unwrap();
    assert_eq!(calls.get(), 6);
    assert_eq!(out.len(), x.len());

    assert!(FastSchedule { gamma: vec![0.1, 0.05] }.validate().is_err());
    assert!(FastSchedule { gamma: vec![0.1, 1.0] }.validate().is_err());
}

#[test]
fn fast_step_with_oracle_noise_recovers_input() {
    let s = default_schedule();
    let fast = FastSchedule::default();
    let x0: Vec<f32> = (0..300).map(|i| (i as f32 * 0.05).sin() * 0.4).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let eps: Vec<f32> = (0..300).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let g = fast.gamma[0] as f32;
    let x1: Vec<f32> = x0.iter().zip(&eps).map(|(&a, &e)| (1.0 - g).sqrt() * a + g.sqrt() * e).collect();
    let out = fast_reverse_from(x1, 1, &fast, &s, 0, |_, _| Ok(eps.clone())).unwrap();
    for (a, b) in out.iter().zip(&x0) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn purification_preserves_length_and_range() {
    let d = tiny_denoiser();
    for sampler in [Sampler::FullReverse, Sampler::FastSixStep] {
        let cfg = PurifierConfig {
            t_star: 20,
            sampler,
            seed: 3,
            ..Default::default()
        };
        for len in [40, 257, 1000] {
            let x: Vec<f32> = (0..len).map(|i| if i % 7 == 0 { 1.0 } else { -0.9 }).collect();
            let w = Waveform::new(x, 1000).unwrap();
            let a = purify(&w, &d, &cfg, 5).unwrap();
            assert_eq!(a.len(), len);
            assert_eq!(a.sample_rate(), 1000);
            assert!(a.samples().iter().all(|v| v.abs() <= 1.0));
            assert_eq!(a, purify(&w, &d, &cfg, 5).unwrap());
            assert_ne!(a, purify(&w, &d, &cfg, 6).unwrap());
        }
    }
    let w = Waveform::new(vec![0.0; 100], 1000).unwrap();
    let bad = PurifierConfig { t_star: 0, ..Default::default() };
    assert!(purify(&w, &d, &bad, 0).is_err());
    let bad = PurifierConfig { t_star: 101, ..Default::default() };
    assert!(purify(&w, &d, &bad, 0).is_err());
    assert!(purify(&Waveform::new(vec![0.0; 100], 8000).unwrap(), &d, &PurifierConfig::default(), 0).is_err());
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let d = tiny_denoiser();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dap.pflw");
    d.save(&path).unwrap();
    let back = Denoiser::load(&path).unwrap();
    assert_eq!(back.cfg, d.cfg);
    assert_eq!(back.schedule, d.schedule);
    assert_eq!(back.sample_rate, d.sample_rate);
    for i in 0..d.params.len() {
        let (a, b) = (d.params.get(i).data(), back.params.get(i).data());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let mut c = Container::new();
    d.write_to(&mut c).unwrap();
    assert_eq!(c.to_bytes(), Container::load(&path).unwrap().to_bytes());
}

#[test]
fn curve_selection_breaks_ties_toward_small_steps() {
    let sel = select_on_curve(&[10, 5, 15, 20], 1.0, |t| Ok((if t >= 10 { 2.0 } else { 5.0 }, 1.0))).unwrap();
    assert_eq!(sel.t_star, 10);
    assert_eq!(sel.curve.iter().map(|p| p.t).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
    assert!(sel.to_csv().lines().count() == 5);

    let clean_only = select_on_curve(&default_grid(100, 5), 1.0, |t| Ok((0.0, t as f64 / 10.0))).unwrap();
    assert_eq!(clean_only.t_star, 5);
    assert_eq!(clean_only.curve.len(), 20);
    assert!(select_on_curve(&[], 1.0, |_| Ok((0.0, 0.0))).is_err());
}

#[test]
fn dap_training_halves_loss() {
    let sr = 4000;
    let clean: Vec<Waveform> = (0..6)
        .map(|k| {
            let f = 150.0 + 40.0 * k as f32;
            let x = (0..4000)
                .map(|i| 0.2 * (std::f32::consts::TAU * f * i as f32 / sr as f32).sin())
                .collect();
            Waveform::new(x, sr).unwrap()
        })
        .collect();
    let cfg = DapTrainConfig {
        iterations: 300,
        batch_size: 2,
        crop_samples: 800,
        optimizer: pflow_core::asv::OptimizerKind::Adam,
        lr: 2e-3,
        denoiser: DenoiserConfig {
            channels: 8,
            blocks: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    let a = train_dap(&clean, None, &cfg).unwrap();
    let b = train_dap(&clean, None, &cfg).unwrap();
    assert_eq!(a.losses, b.losses);
    let head: f64 = a.losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = a.losses[a.losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");

    let adv = DapTrainConfig {
        mode: DapTrainMode::Adversarial,
        iterations: 1,
        ..cfg.clone()
    };
    assert!(train_dap(&clean, None, &adv).is_err());
    assert!(train_dap(&clean, Some(&clean[..3]), &adv).is_err());
    assert!(train_dap(&clean, Some(&clean), &adv).is_ok());
}
