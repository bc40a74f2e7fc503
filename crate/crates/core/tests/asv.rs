use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use pflow_core::asv::*;
use pflow_core::audio::*;
use pflow_core::defense::Defense;
use pflow_core::metrics::eer;
use pflow_core::Error;
use pflow_tensor::{grad_check, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn toy_features() -> FeatureConfig {
    FeatureConfig {
        n_mels: 40,
        fft_size: 256,
        ..FeatureConfig::default()
    }
}

fn toy_corpus() -> &'static SpeakerCorpus {
    static C: OnceLock<SpeakerCorpus> = OnceLock::new();
    C.get_or_init(|| {
        synth_corpus(&CorpusConfig {
            sample_rate: 8000,
            ..CorpusConfig::default()
        })
        .unwrap()
    })
}

fn trained() -> &'static TrainedAsv {
    static M: OnceLock<TrainedAsv> = OnceLock::new();
    M.get_or_init(|| {
        let cfg = AsvTrainConfig {
            epochs: 40,
            optimizer: OptimizerKind::Adam,
            lr: 2e-3,
            lr_step_epochs: 30,
            ..AsvTrainConfig::default()
        };
        train_asv(toy_corpus(), &toy_features(), &cfg).unwrap()
    })
}

fn tiny_encoder() -> Encoder {
    let feats = FeatureConfig {
        n_mels: 4,
        fft_size: 32,
        ..FeatureConfig::default()
    };
    let cfg = EncoderConfig {
        channels: 3,
        embedding_dim: 3,
        blocks: vec![(3, 1)],
        init_seed: 4,
    };
    Encoder::new(&cfg, &feats, 1000).unwrap()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

#[test]
fn embeddings_are_unit_norm_for_any_length() {
    let m = &trained().encoder;
    let c = toy_corpus();
    let w = &c.utterances[0].wave;
    let e = m.embed(w).unwrap();
    assert_eq!(e.len(), 64);
    let n: f64 = e.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-5);
    assert_eq!(e, m.embed(w).unwrap());

    let mut long = w.samples().to_vec();
    long.extend_from_slice(c.utterances[1].wave.samples());
    let e2 = m.embed(&Waveform::new(long, 8000).unwrap()).unwrap();
    assert_eq!(e2.len(), 64);
    assert!((e2.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs() < 1e-5);

    let short = Waveform::new(vec![0.1; m.min_samples() - 1], 8000).unwrap();
    assert!(matches!(m.embed(&short), Err(Error::TooShort { .. })));
    assert!(m.embed(&Waveform::new(vec![0.1; 16000], 16000).unwrap()).is_err());
}

#[test]
fn score_examples_and_rotation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let e = unit(&mut rng, 16);
    let neg: Vec<f32> = e.iter().map(|v| -v).collect();
    assert!((score(&e, &e).unwrap() - 1.0).abs() < 1e-6);
    assert!((score(&e, &neg).unwrap() + 1.0).abs() < 1e-6);
    let f = unit(&mut rng, 16);
    assert_eq!(score(&e, &f).unwrap(), score(&f, &e).unwrap());
    assert!(score(&[1.0, 1.0], &[1.0, 0.0]).is_err());
    assert!(score(&[1.0], &[1.0, 0.0]).is_err());

    // random orthogonal map from Gram-Schmidt
    let d = 16;
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    let rot = |x: &[f32]| -> Vec<f32> {
        q.iter()
            .map(|row| row.iter().zip(x).map(|(a, &b)| a * b as f64).sum::<f64>() as f32)
            .collect()
    };
    for _ in 0..20 {
        let (a, b) = (unit(&mut rng, d), unit(&mut rng, d));
        assert!((score(&rot(&a), &rot(&b)).unwrap() - score(&a, &b).unwrap()).abs() < 1e-5);
    }
}

fn aam_value(emb: &[f64], w: &[f64], k: usize, label: usize, s: f64, m: f64) -> f64 {
    let d = emb.len();
    let mut tape = Tape::<f64>::new();
    let e = tape.constant(Tensor::new(&[1, d], emb.to_vec()).unwrap());
    let w = tape.constant(Tensor::new(&[k, d], w.to_vec()).unwrap());
    let l = aam_softmax_loss(&mut tape, e, w, &[label], s, m).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn aam_loss_examples() {
    let c = 4;
    let emb = [1.0, 0.0, 0.0, 0.0];
    let w = [
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    ];
    let expected = -(32f64.exp() / (32f64.exp() + (c - 1) as f64)).ln();
    assert!((aam_value(&emb, &w, c, 0, 32.0, 0.0) - expected).abs() < 1e-9);
    assert!(aam_value(&emb, &w, c, 0, 32.0, 0.2) >= aam_value(&emb, &w, c, 0, 32.0, 0.0));

    let mut last = f64::INFINITY;
    for angle in [1.2f64, 0.9, 0.6, 0.3, 0.1] {
        let e = [angle.cos(), 0.0, angle.sin(), 0.0];
        let w2 = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let v = aam_value(&e, &w2, 2, 0, 32.0, 0.2);
        assert!(v < last);
        last = v;
    }

    let mut tape = Tape::<f64>::new();
    let e = tape.constant(Tensor::new(&[1, 4], emb.to_vec()).unwrap());
    let wv = tape.constant(Tensor::new(&[4, 4], w.to_vec()).unwrap());
    assert!(aam_softmax_loss(&mut tape, e, wv, &[4], 32.0, 0.2).is_err());
}

#[test]
fn aam_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, d, k) = (3, 5, 4);
    let w = Tensor::new(&[k, d], (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let emb = Tensor::new(&[b, d], (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels = [0, 3, 1];
    let report = grad_check(
        |tape, x| {
            let wv = tape.constant(w.clone());
            aam_softmax_loss(tape, x, wv, &labels, 32.0, 0.2).map_err(|e| match e {
                Error::Tensor(t) => t,
                other => panic!("{other}"),
            })
        },
        &emb,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    let report = grad_check(
        |tape, x| {
            let ev = tape.constant(emb.clone());
            aam_softmax_loss(tape, ev, x, &labels, 32.0, 0.2).map_err(|_| TensorError::NonScalarLoss(vec![]))
        },
        &w,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn cosine_score_gradient_matches_finite_differences() {
    let enc = tiny_encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::from_vec((0..100).map(|_| rng.random_range(-0.5..0.5)).collect());
    let enroll: Vec<f64> = unit(&mut rng, 3).iter().map(|&v| v as f64).collect();
    let report = grad_check(
        |tape, v| {
            let e = enc.embed_on_tape(tape, v).map_err(|_| TensorError::NonScalarLoss(vec![]))?;
            let r = tape.constant(Tensor::from_vec(enroll.clone()));
            let p = tape.mul(e, r)?;
            Ok(tape.sum_all(p))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn trained_encoder_separates_held_out_speakers() {
    let t = trained();
    assert!(t.losses.last().unwrap() < &t.losses[0]);
    let c = toy_corpus();
    let trials = TrialList::sample(c, Split::Eval, 100, 100, 3).unwrap();
    let audio = c.audio();
    let s = evaluate_trials(&trials, &audio, &t.encoder, None, 0).unwrap();
    assert_eq!(s.len(), trials.len());
    let e = eer(&s.labeled()).unwrap();
    assert!(e < 20.0, "EER {e}");

    let embs: Vec<(usize, Vec<f32>)> = c
        .split(Split::Eval)
        .map(|u| (u.speaker_index, t.encoder.embed(&u.wave).unwrap()))
        .collect();
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let v = score(&embs[i].1, &embs[j].1).unwrap();
            if embs[i].0 == embs[j].0 { same.push(v) } else { cross.push(v) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&same) > mean(&cross));

    let identity = evaluate_trials(&trials, &audio, &t.encoder, Some(&Defense::Identity), 5).unwrap();
    assert_eq!(identity, s);
}

#[test]
fn training_is_deterministic() {
    let c = synth_corpus(&CorpusConfig {
        n_speakers: 3,
        utts_per_speaker: 3,
        eval_per_speaker: 1,
        sample_rate: 8000,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cfg = AsvTrainConfig {
        epochs: 2,
        batch_size: 4,
        encoder: EncoderConfig {
            channels: 8,
            embedding_dim: 8,
            ..EncoderConfig::default()
        },
        ..AsvTrainConfig::default()
    };
    let a = train_asv(&c, &toy_features(), &cfg).unwrap();
    let b = train_asv(&c, &toy_features(), &cfg).unwrap();
    assert_eq!(a.losses, b.losses);
    for i in 0..a.encoder.params.len() {
        assert_eq!(a.encoder.params.get(i), b.encoder.params.get(i));
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("asv.pflw");
    a.encoder.save(&p).unwrap();
    let back = Encoder::load(&p).unwrap();
    assert_eq!(back.cfg, a.encoder.cfg);
    for i in 0..a.encoder.params.len() {
        assert_eq!(back.params.get(i), a.encoder.params.get(i));
    }

    let single = SpeakerCorpus {
        speakers: vec![c.speakers[0].clone()],
        profiles: Vec::new(),
        utterances: c.utterances.iter().filter(|u| u.speaker_index == 0).cloned().collect(),
    };
    assert!(train_asv(&single, &toy_features(), &cfg).is_err());
}

#[test]
fn two_speaker_training_reaches_zero_eer() {
    let c = synth_corpus(&CorpusConfig {
        n_speakers: 2,
        utts_per_speaker: 8,
        eval_per_speaker: 2,
        sample_rate: 8000,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cfg = AsvTrainConfig {
        epochs: 15,
        batch_size: 4,
        optimizer: OptimizerKind::Adam,
        lr: 2e-3,
        encoder: EncoderConfig {
            channels: 16,
            embedding_dim: 16,
            ..EncoderConfig::default()
        },
        ..AsvTrainConfig::default()
    };
    let t = train_asv(&c, &toy_features(), &cfg).unwrap();
    let trials = TrialList::sample(&c, Split::Train, 20, 20, 1).unwrap();
    let s = evaluate_trials(&trials, &c.audio(), &t.encoder, None, 0).unwrap();
    assert_eq!(eer(&s.labeled()).unwrap(), 0.0);
}

#[test]
fn trial_lists_and_scores_round_trip() {
    let c = toy_corpus();
    let trials = TrialList::sample(c, Split::Eval, 30, 40, 9).unwrap();
    assert_eq!(trials.len(), 70);
    assert_eq!(trials.trials.iter().filter(|t| t.target).count(), 30);
    for t in &trials.trials {
        let (a, b) = (c.get(&t.enroll).unwrap(), c.get(&t.test).unwrap());
        assert_eq!(a.speaker == b.speaker, t.target);
        assert_eq!(a.split, Split::Eval);
    }
    assert_eq!(TrialList::parse(&trials.to_text()).unwrap(), trials);
    assert_eq!(trials, TrialList::sample(c, Split::Eval, 30, 40, 9).unwrap());
    assert!(trials.to_text().starts_with(if trials.trials[0].target { "1 wav/" } else { "0 wav/" }));
    assert!(TrialList::parse("2 a b").is_err());
    assert!(TrialList::parse("1 a a").is_err());
    assert!(TrialList::parse("1 a").is_err());
    assert!(Trial::new(true, "x", "x").is_err());

    let s = ScoreSet {
        scores: trials
            .trials
            .iter()
            .enumerate()
            .map(|(i, t)| ScoredTrial {
                trial: t.clone(),
                score: (i as f64 * 0.37).sin(),
            })
            .collect(),
    };
    let back = ScoreSet::parse_csv(&s.to_csv()).unwrap();
    assert_eq!(back.len(), s.len());
    for (a, b) in back.scores.iter().zip(&s.scores) {
        assert_eq!(a.trial, b.trial);
        assert!((a.score - b.score).abs() < 1e-9);
    }
    assert!(ScoreSet::parse_csv("a,b\n").is_err());
    assert!(ScoreSet::parse_csv("enroll,test,label,score\nx,y,3,0.1\n").is_err());
}

#[test]
fn self_trials_score_near_one_and_missing_audio_errors() {
    let m = &trained().encoder;
    let c = toy_corpus();
    let mut audio: BTreeMap<String, Waveform> = BTreeMap::new();
    let mut trials = TrialList::default();
    for (i, u) in c.split(Split::Eval).take(5).enumerate() {
        audio.insert(format!("e{i}"), u.wave.clone());
        audio.insert(format!("t{i}"), u.wave.clone());
        trials.trials.push(Trial::new(true, format!("e{i}"), format!("t{i}")).unwrap());
    }
    let s = evaluate_trials(&trials, &audio, m, None, 0).unwrap();
    assert!(s.scores.iter().all(|x| x.score > 1.0 - 1e-5));

    trials.trials.push(Trial::new(false, "e0", "nope").unwrap());
    assert!(matches!(
        evaluate_trials(&trials, &audio, m, None, 0),
        Err(Error::MissingAudio(k)) if k == "nope"
    ));
    let empty: HashMap<String, Waveform> = HashMap::new();
    assert!(evaluate_trials(&trials, &empty, m, None, 0).is_err());
}
