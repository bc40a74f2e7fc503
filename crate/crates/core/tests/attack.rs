use std::collections::HashMap;
use std::sync::OnceLock;

use pflow_core::asv::*;
use pflow_core::attack::*;
use pflow_core::audio::*;
use pflow_core::metrics::{det_curve, eer};
use pflow_tensor::{grad_check, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Victim {
    encoder: Encoder,
    corpus: SpeakerCorpus,
    audio: HashMap<String, Waveform>,
    trials: TrialList,
}

fn victim() -> &'static Victim {
    static V: OnceLock<Victim> = OnceLock::new();
    V.get_or_init(|| {
        let corpus = synth_corpus(&CorpusConfig {
            sample_rate: 8000,
            ..CorpusConfig::default()
        })
        .unwrap();
        let features = FeatureConfig {
            n_mels: 40,
            fft_size: 256,
            ..FeatureConfig::default()
        };
        let cfg = AsvTrainConfig {
            epochs: 40,
            optimizer: OptimizerKind::Adam,
            lr: 2e-3,
            lr_step_epochs: 30,
            ..AsvTrainConfig::default()
        };
        let encoder = train_asv(&corpus, &features, &cfg).unwrap().encoder;
        let trials = TrialList::sample(&corpus, Split::Eval, 30, 30, 2).unwrap();
        let audio = corpus.audio();
        Victim {
            encoder,
            corpus,
            audio,
            trials,
        }
    })
}

fn target_of(v: &Victim, t: &Trial) -> AttackTarget {
    AttackTarget {
        enroll_embedding: v.encoder.embed(&v.audio[&t.enroll]).unwrap(),
        target: t.target,
    }
}

fn random_wave(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| if i % 10 == 0 { rng.random_range(0.999f32..=1.0) } else { rng.random_range(-1.0f32..=1.0) })
        .collect()
}

#[test]
fn budgets_and_steps_use_pcm_units() {
    let c = AttackConfig::default();
    assert_eq!(c.budget(100), 30.0 / 32768.0 * 10.0);
    assert_eq!(c.step(100), 10.0 / 32768.0);
    let b = AttackConfig {
        method: AttackMethod::BimLinf,
        ..c.clone()
    };
    assert_eq!(b.budget(100), 30.0 / 32768.0);
    assert_eq!(b.step(100), 1.0 / 32768.0);
    assert!(AttackConfig { epsilon: 0.0, ..c.clone() }.validate().is_err());
    assert!(AttackConfig { alpha: -1.0, ..c }.validate().is_err());
}

#[test]
fn bim_bound_holds_exactly_coordinatewise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = AttackConfig {
        method: AttackMethod::BimLinf,
        epsilon: 30.0,
        alpha: 7.0,
        steps: 0,
    };
    let w = random_wave(&mut rng, 500);
    let bound = 30.0 / 32768.0;
    let mut grng = ChaCha8Rng::seed_from_u64(2);
    let snaps = bim_linf_with(&w, &cfg, &[0, 1, 3, 10, 40], |x| {
        Ok((0..x.len()).map(|_| grng.random_range(-1.0f32..1.0)).collect())
    })
    .unwrap();
    assert_eq!(snaps[0], w);
    for x in &snaps {
        for (a, b) in x.iter().zip(&w) {
            assert!((*a as f64 - *b as f64).abs() <= bound);
            assert!(a.abs() <= 1.0);
        }
    }
    let always_up = bim_linf_with(&w, &cfg, &[40], |x| Ok(vec![-1.0; x.len()])).unwrap();
    let moved = always_up[0].iter().zip(&w).filter(|(a, b)| a > b).count();
    assert!(moved > 400);
}

#[test]
fn pgd_bound_holds_to_relative_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_wave(&mut rng, 800);
    for alpha in [1.0, 5.0, 40.0] {
        let cfg = AttackConfig {
            method: AttackMethod::PgdL2,
            epsilon: 30.0,
            alpha,
            steps: 0,
        };
        let radius = cfg.budget(w.len());
        let mut grng = ChaCha8Rng::seed_from_u64(4);
        let snaps = pgd_l2_with(&w, &cfg, &[0, 1, 5, 60], |x| {
            Ok((0..x.len()).map(|_| grng.random_range(-1.0f32..1.0)).collect())
        })
        .unwrap();
        assert_eq!(snaps[0], w);
        for x in &snaps {
            let n = x.iter().zip(&w).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>().sqrt();
            assert!(n <= radius * (1.0 + 1e-6), "{n} > {radius}");
            assert!(x.iter().all(|v| v.abs() <= 1.0));
        }
    }
    let cfg = AttackConfig::default();
    let still = pgd_l2_with(&w, &cfg, &[5], |x| Ok(vec![0.0; x.len()])).unwrap();
    assert_eq!(still[0], w);
    assert!(pgd_l2_with(&[], &cfg, &[1], |x| Ok(vec![0.0; x.len()])).is_err());
    assert!(pgd_l2_with(&w, &cfg, &[3, 2], |x| Ok(vec![0.0; x.len()])).is_err());
}

#[test]
fn pgd_moves_toward_quadratic_minimum_until_ball() {
    let n = 400;
    let w = vec![0.0f32; n];
    let star: Vec<f32> = (0..n).map(|i| 0.01 * ((i % 7) as f32 - 3.0)).collect();
    let cfg = AttackConfig {
        method: AttackMethod::PgdL2,
        epsilon: 30.0,
        alpha: 2.0,
        steps: 0,
    };
    let radius = cfg.budget(n);
    let grad = |x: &[f32]| Ok(x.iter().zip(&star).map(|(a, b)| a - b).collect());
    let snaps: Vec<usize> = (0..40).collect();
    let iters = pgd_l2_with(&w, &cfg, &snaps, grad).unwrap();
    let dist = |x: &[f32]| x.iter().zip(&star).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
    let norm = |x: &[f32]| x.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let mut hit = false;
    for k in 1..iters.len() {
        if !hit {
            assert!(dist(&iters[k]) < dist(&iters[k - 1]));
        }
        hit |= norm(&iters[k]) >= radius * (1.0 - 1e-6);
    }
    assert!(hit);
    let last = iters.last().unwrap();
    let cos = last.iter().zip(&star).map(|(a, b)| (a * b) as f64).sum::<f64>() / (norm(last) * norm(&star));
    assert!(cos > 0.999);
}

#[test]
fn attack_loss_gradient_matches_finite_differences() {
    let feats = FeatureConfig {
        n_mels: 4,
        fft_size: 32,
        ..FeatureConfig::default()
    };
    let enc = Encoder::new(
        &EncoderConfig {
            channels: 3,
            embedding_dim: 3,
            blocks: vec![(3, 1)],
            init_seed: 2,
        },
        &feats,
        1000,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..90).map(|_| rng.random_range(-0.5..0.5)).collect();
    let enroll = enc
        .embed(&Waveform::new((0..90).map(|_| rng.random_range(-0.5f32..0.5)).collect(), 1000).unwrap())
        .unwrap();
    for target in [true, false] {
        let t = AttackTarget {
            enroll_embedding: enroll.clone(),
            target,
        };
        let report = grad_check(
            |tape, v| attack_loss(tape, &enc, v, &t).map_err(|_| TensorError::NonScalarLoss(vec![])),
            &Tensor::from_vec(x.clone()),
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}

#[test]
fn attack_loss_sign_convention() {
    let v = victim();
    let t = v.trials.trials.iter().find(|t| t.target).unwrap();
    let w = &v.audio[&t.enroll];
    let target = AttackTarget {
        enroll_embedding: v.encoder.embed(w).unwrap(),
        target: true,
    };
    let mut tape = pflow_tensor::Tape::<f32>::new();
    let x = tape.constant(Tensor::from_vec(w.samples().to_vec()));
    let l = attack_loss(&mut tape, &v.encoder, x, &target).unwrap();
    assert!((tape.value(l).data()[0] - 1.0).abs() < 1e-4);

    let cfg = AttackConfig {
        steps: 10,
        ..AttackConfig::default()
    };
    let ex = pgd_l2(&v.encoder, w, &target, &cfg).unwrap();
    assert!(ex.final_score < ex.score_before);
    assert!(ex.achieved_score_delta() < 0.0);
    let non = AttackTarget { target: false, ..target };
    let other = v.trials.trials.iter().find(|t| !t.target).unwrap();
    let ex = pgd_l2(&v.encoder, &v.audio[&other.test], &non, &cfg).unwrap();
    assert!(ex.final_score > ex.score_before);
}

#[test]
fn attack_examples_are_consistent_and_deterministic() {
    let v = victim();
    let t = &v.trials.trials[0];
    let w = &v.audio[&t.test];
    let target = target_of(v, t);
    for method in [AttackMethod::PgdL2, AttackMethod::BimLinf] {
        let cfg = AttackConfig {
            method,
            steps: 0,
            ..AttackConfig::default()
        };
        let zero = attack_snapshots(&v.encoder, w, &target, &cfg, &[0]).unwrap().remove(0);
        assert_eq!(&zero.perturbed, w);
        assert_eq!(zero.linf(), 0.0);

        let snaps = attack_snapshots(&v.encoder, w, &target, &cfg, &[5, 20]).unwrap();
        assert_eq!(snaps, attack_snapshots(&v.encoder, w, &target, &cfg, &[5, 20]).unwrap());
        for ex in &snaps {
            assert_eq!(&ex.original, w);
            for i in 0..w.len() {
                let sum = ex.original.samples()[i] + ex.perturbation[i];
                assert!((sum - ex.perturbed.samples()[i]).abs() <= 1e-7);
            }
            match method {
                AttackMethod::BimLinf => assert!(ex.linf() <= 30.0 / 32768.0),
                AttackMethod::PgdL2 => assert!(ex.l2() <= cfg.budget(w.len()) * (1.0 + 1e-6)),
            }
        }
        let full = match method {
            AttackMethod::PgdL2 => pgd_l2(&v.encoder, w, &target, &AttackConfig { steps: 20, ..cfg.clone() }),
            AttackMethod::BimLinf => bim_linf(&v.encoder, w, &target, &AttackConfig { steps: 20, ..cfg.clone() }),
        }
        .unwrap();
        assert_eq!(full, snaps[1]);
        let row = full.manifest_row("7", &cfg);
        assert_eq!(row.split(',').count(), MANIFEST_HEADER.split(',').count());
        assert!(row.starts_with(&format!("7,{method},30,1,20,")));
    }
    let bim = AttackConfig {
        method: AttackMethod::BimLinf,
        ..AttackConfig::default()
    };
    assert!(pgd_l2(&v.encoder, w, &target, &bim).is_err());
}

#[test]
fn matched_noise_shares_adversarial_snr() {
    let v = victim();
    let t = &v.trials.trials[1];
    let w = &v.audio[&t.test];
    let ex = pgd_l2(&v.encoder, w, &target_of(v, t), &AttackConfig { steps: 10, ..AttackConfig::default() }).unwrap();
    let g = genuine_with_matched_noise(w, &ex, 3).unwrap();
    assert!((snr_db(w.samples(), g.samples()) - ex.snr_db()).abs() < 0.5);
    assert_eq!(g, genuine_with_matched_noise(w, &ex, 3).unwrap());
    assert!(ex.snr_db() > 30.0);
    assert!((mean_snr_db(std::slice::from_ref(&ex)) - ex.snr_db()).abs() < 1e-12);

    let zero = attack_snapshots(&v.encoder, w, &target_of(v, t), &AttackConfig::default(), &[0])
        .unwrap()
        .remove(0);
    assert_eq!(&genuine_with_matched_noise(w, &zero, 3).unwrap(), w);
}

#[test]
fn attacks_raise_error_rate_with_more_steps() {
    let v = victim();
    let clean = evaluate_trials(&v.trials, &v.audio, &v.encoder, None, 0).unwrap();
    let base = eer(&clean.labeled()).unwrap();
    let det = det_curve(&clean.labeled()).unwrap();
    let theta = det
        .iter()
        .filter(|p| p.threshold.is_finite())
        .min_by(|a, b| {
            (a.false_accept_rate - a.false_reject_rate)
                .abs()
                .total_cmp(&(b.false_accept_rate - b.false_reject_rate).abs())
        })
        .unwrap()
        .threshold;

    let steps = [10, 20, 50, 100];
    for method in [AttackMethod::PgdL2, AttackMethod::BimLinf] {
        let cfg = AttackConfig {
            method,
            ..AttackConfig::default()
        };
        let per_trial: Vec<Vec<AdversarialExample>> = v
            .trials
            .trials
            .iter()
            .map(|t| attack_snapshots(&v.encoder, &v.audio[&t.test], &target_of(v, t), &cfg, &steps).unwrap())
            .collect();
        let mut last = 0.0;
        for k in 0..steps.len() {
            let mut audio = v.audio.clone();
            let mut trials = TrialList::default();
            for (i, t) in v.trials.trials.iter().enumerate() {
                let key = format!("adv/{i}");
                audio.insert(key.clone(), per_trial[i][k].perturbed.clone());
                trials.trials.push(Trial::new(t.target, t.enroll.clone(), key).unwrap());
            }
            let e = eer(&evaluate_trials(&trials, &audio, &v.encoder, None, 0).unwrap().labeled()).unwrap();
            assert!(e >= last - 2.0, "{method} {}: {e} < {last}", steps[k]);
            last = e;
            if steps[k] == 50 {
                assert!(e >= 5.0 * base.max(1.0), "{method}: {e} vs clean {base}");
                if method == AttackMethod::BimLinf {
                    let targets: Vec<_> = v.trials.trials.iter().enumerate().filter(|(_, t)| t.target).collect();
                    let below = targets.iter().filter(|(i, _)| per_trial[*i][k].final_score < theta).count();
                    assert!(below * 2 > targets.len(), "{below}/{}", targets.len());
                }
            }
        }
    }
    assert!(v.corpus.speakers.len() == 8);
}
