use pflow_core::audio::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn wav_round_trip_within_one_lsb() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = Waveform::new((0..3000).map(|_| rng.random_range(-1.0f32..=1.0)).collect(), 16000).unwrap();
    let path = dir.path().join("a/b/x.wav");
    save_wav(&path, &w).unwrap();
    let back = load_wav(&path).unwrap();
    assert_eq!(back.sample_rate(), 16000);
    for (a, b) in back.samples().iter().zip(w.samples()) {
        assert!((a - b).abs() <= 1.0 / 32768.0);
    }
    save_wav(&path, &back).unwrap();
    assert_eq!(load_wav(&path).unwrap(), back);
}

#[test]
fn wav_edge_values_and_silence() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zero.wav");
    save_wav(&path, &Waveform::new(vec![0.0; 16000], 16000).unwrap()).unwrap();
    let z = load_wav(&path).unwrap();
    assert_eq!(z.len(), 16000);
    assert!(z.samples().iter().all(|&v| v == 0.0));

    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 8000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let p = dir.path().join("min.wav");
    let mut wr = hound::WavWriter::create(&p, spec).unwrap();
    for v in [-32768i16, 32767, 1, -1] {
        wr.write_sample(v).unwrap();
    }
    wr.finalize().unwrap();
    let w = load_wav(&p).unwrap();
    assert_eq!(w.samples()[0], -1.0);
    assert_eq!(w.samples()[1], 32767.0 / 32768.0);

    let stereo = hound::WavSpec { channels: 2, ..spec };
    let p = dir.path().join("stereo.wav");
    let mut wr = hound::WavWriter::create(&p, stereo).unwrap();
    for _ in 0..8 {
        wr.write_sample(0i16).unwrap();
    }
    wr.finalize().unwrap();
    assert!(load_wav(&p).is_err());

    let float = hound::WavSpec {
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
        ..spec
    };
    let p = dir.path().join("float.wav");
    let mut wr = hound::WavWriter::create(&p, float).unwrap();
    wr.write_sample(0.5f32).unwrap();
    wr.finalize().unwrap();
    assert!(load_wav(&p).is_err());

    let p = dir.path().join("junk.wav");
    std::fs::write(&p, b"RIFF\x04\x00\x00\x00WAVE").unwrap();
    assert!(load_wav(&p).is_err());
    assert!(load_wav(dir.path().join("missing.wav")).is_err());
}

#[test]
fn feature_frame_count_examples() {
    let cfg = FeatureConfig::default();
    assert_eq!(cfg.frame_count(16000, 16000), 98);
    let f = logfbank(&vec![0.0; 16000], 16000, &cfg).unwrap();
    assert_eq!((f.frames, f.n_mels), (98, 80));
    assert!(f.data.iter().all(|&v| v == (1e-10f64).ln() as f32));
    assert!(logfbank(&[0.0; 399], 16000, &cfg).is_err());
}

#[test]
fn feature_config_validation() {
    let ok = FeatureConfig::default();
    assert!(ok.validate(16000).is_ok());
    assert!(FeatureConfig { hop_ms: 30.0, ..ok.clone() }.validate(16000).is_err());
    assert!(FeatureConfig { n_mels: 0, ..ok.clone() }.validate(16000).is_err());
    assert!(FeatureConfig { fft_size: 256, ..ok.clone() }.validate(16000).is_err());
    assert!(FeatureConfig { mel_hi_hz: Some(9000.0), ..ok }.validate(16000).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn frame_count_matches_closed_form(len in 400usize..4000, hop_ms in 5.0f64..15.0, extra in 0.0f64..10.0) {
        let cfg = FeatureConfig {
            n_mels: 8,
            window_ms: hop_ms + 1.0 + extra,
            hop_ms,
            fft_size: 512,
            ..FeatureConfig::default()
        };
        let (win, hop) = (cfg.win_samples(16000), cfg.hop_samples(16000));
        let x = vec![0.01f32; len];
        match logfbank(&x, 16000, &cfg) {
            Ok(f) => prop_assert_eq!(f.frames, (len - win) / hop + 1),
            Err(_) => prop_assert!(len < win),
        }
    }
}

#[test]
fn tone_peaks_in_nearest_mel_band() {
    let cfg = FeatureConfig::default();
    let fe = Frontend::new(&cfg, 16000).unwrap();
    let x: Vec<f32> = (0..16000)
        .map(|i| 0.5 * (std::f32::consts::TAU * 1000.0 * i as f32 / 16000.0).sin())
        .collect();
    let f = fe.logfbank(&x).unwrap();
    let nearest = fe
        .mel_centers()
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
        .unwrap()
        .0;
    for r in 0..f.frames {
        let row = f.row(r);
        let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(arg, nearest);
    }
}

#[test]
fn filterbank_triangles_peak_at_one() {
    let (fb, centers) = mel_filterbank(16000, 512, 40, 20.0, 8000.0);
    assert_eq!(fb.len(), 257 * 40);
    assert_eq!(centers.len(), 40);
    assert!(centers.windows(2).all(|w| w[0] < w[1]));
    for m in 0..40 {
        let col: Vec<f64> = (0..257).map(|b| fb[b * 40 + m]).collect();
        let peak = col.iter().cloned().fold(0.0, f64::max);
        assert!(peak > 0.0 && peak <= 1.0 + 1e-12);
    }
}

fn random_features(rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let x: Vec<f32> = (0..8000).map(|_| rng.random_range(-0.5f32..0.5)).collect();
    let cfg = FeatureConfig {
        n_mels: 20,
        ..FeatureConfig::default()
    };
    logfbank(&x, 16000, &cfg).unwrap()
}

#[test]
fn cmvn_normalizes_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = random_features(&mut rng);
    let g = cmvn(&f).unwrap();
    for c in 0..g.n_mels {
        let col: Vec<f64> = g.column(c).iter().map(|&v| v as f64).collect();
        let n = col.len() as f64;
        let m = col.iter().sum::<f64>() / n;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-4);
    }
    let h = cmvn(&g).unwrap();
    for (a, b) in g.data.iter().zip(&h.data) {
        assert!((a - b).abs() < 1e-5);
    }

    let flat = FeatureMatrix {
        frames: 4,
        n_mels: 2,
        frame_rate: 100.0,
        data: vec![3.0, 1.0, 3.0, 2.0, 3.0, 3.0, 3.0, 4.0],
    };
    let out = cmvn(&flat).unwrap();
    assert!(out.column(0).iter().all(|&v| v == 0.0));
    let single = FeatureMatrix {
        frames: 1,
        n_mels: 2,
        frame_rate: 100.0,
        data: vec![1.0, 2.0],
    };
    assert!(cmvn(&single).is_err());
}

#[test]
fn noise_at_target_snr() {
    let x: Vec<f32> = (0..16000).map(|i| 0.1 * (i as f32 * 0.05).sin()).collect();
    let w = Waveform::new(x, 16000).unwrap();
    let a = add_noise_at_snr(&w, 40.0, 1).unwrap();
    let b = add_noise_at_snr(&w, 40.0, 2).unwrap();
    assert_ne!(a, b);
    for y in [&a, &b] {
        assert!((snr_db(w.samples(), y.samples()) - 40.0).abs() < 0.5);
    }
    assert_eq!(a, add_noise_at_snr(&w, 40.0, 1).unwrap());
    assert_eq!(add_noise_at_snr(&w, f64::INFINITY, 1).unwrap(), w);
    let silent = Waveform::new(vec![0.0; 100], 16000).unwrap();
    assert!(add_noise_at_snr(&silent, 40.0, 1).is_err());
}

#[test]
fn corpus_is_deterministic_and_well_formed() {
    let cfg = CorpusConfig {
        n_speakers: 4,
        utts_per_speaker: 3,
        eval_per_speaker: 1,
        sample_rate: 8000,
        ..CorpusConfig::default()
    };
    let a = synth_corpus(&cfg).unwrap();
    let b = synth_corpus(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.utterances.len(), 12);
    assert_eq!(a.split(Split::Eval).count(), 4);
    let other = synth_corpus(&CorpusConfig { seed: 1, ..cfg.clone() }).unwrap();
    assert_ne!(a.utterances[0].wave, other.utterances[0].wave);
    for u in &a.utterances {
        assert_eq!(a.speakers[u.speaker_index], u.speaker);
        assert_eq!(u.wave.len(), 8000);
        assert!(u.wave.samples().iter().all(|v| v.abs() <= 1.0));
        assert!((u.wave.power().sqrt() - 0.1).abs() < 0.01);
    }
    let mut f0: Vec<f64> = a.profiles.iter().map(|p| p.f0_hz).collect();
    assert!(f0.iter().all(|f| (90.0..=250.0).contains(f)));
    f0.sort_by(f64::total_cmp);
    f0.dedup();
    assert_eq!(f0.len(), 4);

    let two = synth_corpus(&CorpusConfig {
        n_speakers: 2,
        utts_per_speaker: 1,
        eval_per_speaker: 0,
        ..CorpusConfig::default()
    })
    .unwrap();
    assert_eq!(two.utterances.len(), 2);
    assert_ne!(two.utterances[0].speaker, two.utterances[1].speaker);

    assert!(synth_corpus(&CorpusConfig { n_speakers: 1, ..cfg.clone() }).is_err());
    assert!(synth_corpus(&CorpusConfig { duration_s: 0.4, ..cfg.clone() }).is_err());
    assert!(synth_corpus(&CorpusConfig { utts_per_speaker: 0, ..cfg }).is_err());
}

#[test]
fn corpus_survives_disk_round_trip() {
    let cfg = CorpusConfig {
        n_speakers: 2,
        utts_per_speaker: 2,
        eval_per_speaker: 1,
        sample_rate: 8000,
        ..CorpusConfig::default()
    };
    let c = synth_corpus(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    c.write(dir.path()).unwrap();
    let back = SpeakerCorpus::read(dir.path()).unwrap();
    assert_eq!(back.speakers, c.speakers);
    assert_eq!(back.manifest(), c.manifest());
    for (a, b) in back.utterances.iter().zip(&c.utterances) {
        assert_eq!(a.wave, b.wave);
    }
    let line = c.manifest().lines().next().unwrap().to_string();
    assert_eq!(line.split('\t').count(), 4);
    assert!(line.ends_with(".wav"));
}
