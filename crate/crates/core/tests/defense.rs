use pflow_core::audio::Waveform;
use pflow_core::defense::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn wave(x: Vec<f32>) -> Waveform {
    Waveform::new(x, 8000).unwrap()
}

fn edge(x: &[f32], i: isize) -> f64 {
    x[i.clamp(0, x.len() as isize - 1) as usize] as f64
}

fn median_oracle(x: &[f32], k: usize) -> Vec<f32> {
    let h = (k / 2) as isize;
    (0..x.len() as isize)
        .map(|i| {
            let mut w: Vec<f64> = (-h..=h).map(|d| edge(x, i + d)).collect();
            w.sort_by(f64::total_cmp);
            w[k / 2] as f32
        })
        .collect()
}

fn conv_oracle(x: &[f32], kernel: &[f64]) -> Vec<f64> {
    let h = (kernel.len() / 2) as isize;
    (0..x.len() as isize)
        .map(|i| (-h..=h).map(|d| kernel[(d + h) as usize] * edge(x, i + d)).sum())
        .collect()
}

#[test]
fn median_filter_examples() {
    let x = [0.0f32, 1.0, 0.0, 1.0, 0.0];
    assert_eq!(median_filter(&x, 1).unwrap(), x.to_vec());
    assert_eq!(median_filter(&x, 3).unwrap(), median_oracle(&x, 3));
    assert_eq!(median_filter(&x, 3).unwrap(), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    assert_eq!(median_filter(&[0.3; 9], 5).unwrap(), vec![0.3; 9]);
    assert!(median_filter(&x, 2).is_err());
    assert!(median_filter(&x, 0).is_err());
}

#[test]
fn linear_filters_match_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let n = rng.random_range(1..200);
        let x: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = 2 * rng.random_range(0..6) + 1;
        let m = mean_filter(&x, k).unwrap();
        for (a, b) in m.iter().zip(conv_oracle(&x, &vec![1.0 / k as f64; k])) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        let sigma = rng.random_range(0.3..3.0);
        let gk = gaussian_kernel(sigma, gaussian_support(sigma)).unwrap();
        let g = gaussian_filter(&x, sigma, gk.len()).unwrap();
        for (a, b) in g.iter().zip(conv_oracle(&x, &gk)) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        assert_eq!(median_filter(&x, k).unwrap(), median_oracle(&x, k));
    }
}

#[test]
fn smoothing_preserves_constants() {
    let c = vec![0.4f32; 50];
    for v in mean_filter(&c, 7).unwrap() {
        assert!((v - 0.4).abs() < 1e-6);
    }
    for v in gaussian_filter(&c, 1.5, gaussian_support(1.5)).unwrap() {
        assert!((v - 0.4).abs() < 1e-6);
    }
}

#[test]
fn gaussian_impulse_response_is_kernel() {
    assert_eq!(gaussian_support(1.0), 7);
    assert_eq!(gaussian_support(0.5), 5);
    let k = gaussian_kernel(1.0, 7).unwrap();
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    let mut x = vec![0.0f32; 21];
    x[10] = 1.0;
    let y = gaussian_filter(&x, 1.0, 7).unwrap();
    for (i, &c) in k.iter().enumerate() {
        assert!((y[7 + i] as f64 - c).abs() < 1e-7);
    }
    assert!(gaussian_kernel(0.0, 3).is_err());
    assert!(gaussian_kernel(-1.0, 3).is_err());
    assert!(gaussian_kernel(1.0, 4).is_err());
}

proptest! {
    #[test]
    fn filters_are_shift_equivariant_in_the_interior(
        x in prop::collection::vec(-1.0f32..1.0, 30..80),
        half in 0usize..4,
        shift in 1usize..5,
    ) {
        let k = 2 * half + 1;
        let shifted: Vec<f32> = x[shift..].to_vec();
        for (f, g) in [
            (median_filter(&x, k).unwrap(), median_filter(&shifted, k).unwrap()),
            (mean_filter(&x, k).unwrap(), mean_filter(&shifted, k).unwrap()),
            (gaussian_filter(&x, 0.8, k).unwrap(), gaussian_filter(&shifted, 0.8, k).unwrap()),
        ] {
            for i in half..shifted.len() - half {
                prop_assert_eq!(f[i + shift], g[i]);
            }
        }
    }
}

#[test]
fn additive_noise_statistics() {
    let x: Vec<f32> = (0..16000).map(|i| 0.1 * (i as f32 * 0.01).sin()).collect();
    let w = wave(x.clone());
    let zero = Defense::AddNoise { sigma: 0.0 };
    assert_eq!(zero.apply(&w, 3).unwrap(), w);

    let d = Defense::AddNoise { sigma: 0.01 };
    let a = d.apply(&w, 3).unwrap();
    assert_eq!(a, d.apply(&w, 3).unwrap());
    assert_ne!(a, d.apply(&w, 4).unwrap());
    let diff: Vec<f64> = a.samples().iter().zip(&x).map(|(&p, &q)| p as f64 - q as f64).collect();
    let n = diff.len() as f64;
    let m = diff.iter().sum::<f64>() / n;
    let sd = (diff.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd - 0.01).abs() < 3.0 * 0.01 / (2.0 * (n - 1.0)).sqrt());
    assert!(Defense::AddNoise { sigma: -0.1 }.apply(&w, 0).is_err());
}

#[test]
fn defenses_preserve_length_rate_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = wave((0..999).map(|_| rng.random_range(-1.0f32..=1.0)).collect());
    let all = [
        Defense::Identity,
        Defense::Median { k: 5 },
        Defense::Mean { k: 3 },
        Defense::Gaussian { sigma: 1.0, k: 7 },
        Defense::AddNoise { sigma: 0.05 },
    ];
    for d in &all {
        let y = d.apply(&w, 9).unwrap();
        assert_eq!(y.len(), w.len());
        assert_eq!(y.sample_rate(), w.sample_rate());
        assert!(y.samples().iter().all(|v| v.abs() <= 1.0));
    }
    assert_eq!(Defense::Identity.apply(&w, 0).unwrap(), w);
    assert!(Defense::Mean { k: 4 }.apply(&w, 0).is_err());
    assert!(Defense::Gaussian { sigma: 0.0, k: 3 }.apply(&w, 0).is_err());
}

#[test]
fn specs_build_and_describe_defenses() {
    let s: DefenseSpec = serde_json::from_str(r#"{"kind":"gaussian","sigma":1.0}"#).unwrap();
    let d = s.build(None).unwrap();
    assert_eq!(d.to_string(), "gaussian(sigma=1;k=7)");
    let m: DefenseSpec = serde_json::from_str(r#"{"kind":"median"}"#).unwrap();
    assert_eq!(m.build(None).unwrap().to_string(), "median(k=3)");
    assert_eq!(DefenseSpec::Identity.build(None).unwrap().to_string(), "none");
    assert_eq!(
        DefenseSpec::AddNoise { sigma: 0.002 }.build(None).unwrap().params(),
        "sigma=0.002"
    );
    for spec in [
        DefenseSpec::Identity,
        DefenseSpec::Median { k: 5 },
        DefenseSpec::Mean { k: 3 },
        DefenseSpec::Gaussian { sigma: 0.5 },
        DefenseSpec::AddNoise { sigma: 0.05 },
    ] {
        let d = spec.build(None).unwrap();
        assert_eq!(spec.to_string(), d.to_string());
        assert_eq!(spec.kind(), d.kind());
    }
    assert!(DefenseSpec::Median { k: 2 }.build(None).is_err());
    assert!(serde_json::from_str::<DefenseSpec>(r#"{"kind":"dap"}"#).unwrap().build(None).is_err());
}
