use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::wav::quantize;
use super::{load_wav, save_wav, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{invalid, io_err, Error, Result};
use crate::seed;

const F0_GRID: std::ops::RangeInclusive<u32> = 90..=250;
const NOISE_FLOOR_DB: f64 = -30.0;
const MANIFEST: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Trailing utterances of each speaker tagged `eval`.
    pub eval_per_speaker: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Target RMS level before the noise floor is added.
    pub rms: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_speakers: 8,
            utts_per_speaker: 16,
            eval_per_speaker: 6,
            duration_s: 1.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            rms: 0.1,
        }
    }
}

/// Source-filter voice: a fundamental frequency, three resonances, and a
/// harmonic rolloff exponent.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub id: String,
    pub f0_hz: f64,
    pub formants: [(f64, f64); 3],
    pub rolloff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker: String,
    pub speaker_index: usize,
    pub utt_id: String,
    pub split: Split,
    /// Path relative to the corpus root; also the utterance's reference key.
    pub path: String,
    pub wave: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerCorpus {
    pub speakers: Vec<String>,
    pub profiles: Vec<SpeakerProfile>,
    pub utterances: Vec<Utterance>,
}

pub fn utterance_path(speaker: &str, utt_id: &str) -> String {
    format!("wav/{speaker}/{utt_id}.wav")
}

/// Deterministic synthetic corpus: one profile per speaker drawn from
/// `(seed, speaker)`, one excitation per utterance drawn from `(seed, speaker, utt)`.
pub fn synth_corpus(cfg: &CorpusConfig) -> Result<SpeakerCorpus> {
    if cfg.n_speakers < 2 {
        return Err(invalid("corpus needs at least two speakers"));
    }
    if cfg.n_speakers > F0_GRID.count() {
        return Err(invalid(format!("at most {} speakers have distinct F0", F0_GRID.count())));
    }
    if cfg.utts_per_speaker == 0 || cfg.eval_per_speaker > cfg.utts_per_speaker {
        return Err(invalid("utts_per_speaker must be positive and cover eval_per_speaker"));
    }
    if !(cfg.duration_s >= 0.5) {
        return Err(invalid("utterances must last at least 0.5 s"));
    }
    if cfg.sample_rate < 4000 {
        return Err(invalid("sample rate below 4 kHz cannot hold the formant range"));
    }
    if !(cfg.rms > 0.0 && cfg.rms < 0.5) {
        return Err(invalid("rms must lie in (0, 0.5)"));
    }
    let mut grid: Vec<u32> = F0_GRID.collect();
    grid.shuffle(&mut seed::rng(cfg.seed, &[0xF0]));
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let mut corpus = SpeakerCorpus {
        speakers: Vec::new(),
        profiles: Vec::new(),
        utterances: Vec::new(),
    };
    for s in 0..cfg.n_speakers {
        let id = format!("spk{s:03}");
        let mut rng = seed::rng(cfg.seed, &[1, s as u64]);
        let f3_hi = 3400f64.min(0.85 * nyquist);
        let profile = SpeakerProfile {
            id: id.clone(),
            f0_hz: grid[s] as f64,
            formants: [
                (rng.random_range(300.0..850.0), rng.random_range(50.0..150.0)),
                (rng.random_range(900.0..2300.0), rng.random_range(70.0..200.0)),
                (rng.random_range(2400.0f64.min(f3_hi - 1.0)..f3_hi), rng.random_range(100.0..250.0)),
            ],
            rolloff: rng.random_range(0.6..1.4),
        };
        for u in 0..cfg.utts_per_speaker {
            let utt_id = format!("u{u:03}");
            let split = if u + cfg.eval_per_speaker >= cfg.utts_per_speaker {
                Split::Eval
            } else {
                Split::Train
            };
            let samples = synth_utterance(&profile, cfg, s, u)?;
            corpus.utterances.push(Utterance {
                speaker: id.clone(),
                speaker_index: s,
                path: utterance_path(&id, &utt_id),
                utt_id,
                split,
                wave: Waveform::new(samples, cfg.sample_rate)?,
            });
        }
        corpus.speakers.push(id);
        corpus.profiles.push(profile);
    }
    Ok(corpus)
}

/// Samples land on the PCM16 grid so a WAV round trip is lossless.
fn synth_utterance(p: &SpeakerProfile, cfg: &CorpusConfig, s: usize, u: usize) -> Result<Vec<f32>> {
    use std::f64::consts::PI;
    let mut rng = seed::rng(cfg.seed, &[2, s as u64, u as u64]);
    let sr = cfg.sample_rate as f64;
    let n = (cfg.duration_s * sr).round() as usize;
    let nyquist = sr / 2.0;

    let offset = 1.0 + rng.random_range(-0.03..0.03);
    let (a1, a2) = (rng.random_range(0.0..0.06), rng.random_range(0.0..0.04));
    let (r1, r2) = (rng.random_range(0.3..1.5), rng.random_range(1.5..3.0));
    let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let jitter: Vec<f64> = (0..3).map(|_| 1.0 + rng.random_range(-0.03..0.03)).collect();
    let syl_rate = rng.random_range(2.5..4.5);
    let syl_phase = rng.random_range(0.0..1.0);
    let f0_max = p.f0_hz * offset * (1.0 + a1 + a2) * 1.01;
    let harmonics = ((0.95 * nyquist) / f0_max).floor().max(1.0) as usize;
    let formants: Vec<(f64, f64)> = p
        .formants
        .iter()
        .zip(&jitter)
        .map(|(&(c, b), j)| (c * j, b))
        .collect();
    let gain: Vec<f64> = (1..=harmonics).map(|h| (h as f64).powf(-p.rolloff)).collect();

    let mut out = vec![0.0f64; n];
    let mut phase = 0.0f64;
    let fade = (0.01 * sr) as usize;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let contour = 1.0 + a1 * (2.0 * PI * r1 * t + p1).sin() + a2 * (2.0 * PI * r2 * t + p2).sin();
        let f0 = p.f0_hz * offset * contour * (1.0 + 0.01 * (2.0 * PI * 5.5 * t + vib_phase).sin());
        phase += 2.0 * PI * f0 / sr;
        let mut acc = 0.0;
        for (h, g) in gain.iter().enumerate() {
            let f = (h + 1) as f64 * f0;
            let mut env = 0.05;
            for &(c, b) in &formants {
                let d = (f - c) / b;
                env += 1.0 / (1.0 + d * d);
            }
            acc += g * env * ((h + 1) as f64 * phase).sin();
        }
        let syl = (PI * (syl_rate * t + syl_phase)).sin();
        let mut amp = 0.25 + 0.75 * syl * syl;
        if i < fade {
            amp *= i as f64 / fade as f64;
        } else if n - i <= fade {
            amp *= (n - i - 1) as f64 / fade as f64;
        }
        *o = acc * amp;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms == 0.0 {
        return Err(invalid("synthesized silence"));
    }
    let floor = cfg.rms * 10f64.powf(NOISE_FLOOR_DB / 20.0);
    Ok(out
        .iter()
        .map(|&v| {
            let noise: f64 = rng.sample(StandardNormal);
            let v = (v * cfg.rms / rms + floor * noise).clamp(-1.0, 1.0) as f32;
            quantize(v) as f32 / 32768.0
        })
        .collect())
}

impl SpeakerCorpus {
    pub fn sample_rate(&self) -> u32 {
        self.utterances.first().map_or(DEFAULT_SAMPLE_RATE, |u| u.wave.sample_rate())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn get(&self, path: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.path == path)
    }

    /// Reference-keyed view of every waveform.
    pub fn audio(&self) -> HashMap<String, Waveform> {
        self.utterances
            .iter()
            .map(|u| (u.path.clone(), u.wave.clone()))
            .collect()
    }

    pub fn manifest(&self) -> String {
        self.utterances
            .iter()
            .map(|u| format!("{}\t{}\t{}\t{}\n", u.speaker, u.utt_id, u.split, u.path))
            .collect()
    }

    /// Writes every utterance as WAV plus `manifest.tsv` under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root).map_err(io_err(root))?;
        for u in &self.utterances {
            save_wav(root.join(&u.path), &u.wave)?;
        }
        let mpath = root.join(MANIFEST);
        std::fs::write(&mpath, self.manifest()).map_err(io_err(&mpath))
    }

    /// Reads a corpus written by [`SpeakerCorpus::write`]. Profiles are not
    /// stored on disk and come back empty.
    pub fn read(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST);
        let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let mut corpus = SpeakerCorpus {
            speakers: Vec::new(),
            profiles: Vec::new(),
            utterances: Vec::new(),
        };
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Parse {
                    what: mpath.display().to_string(),
                    msg: format!("line {}: expected 4 tab-separated fields", ln + 1),
                });
            }
            let speaker_index = match corpus.speakers.iter().position(|s| s == cols[0]) {
                Some(i) => i,
                None => {
                    corpus.speakers.push(cols[0].to_string());
                    corpus.speakers.len() - 1
                }
            };
            corpus.utterances.push(Utterance {
                speaker: cols[0].to_string(),
                speaker_index,
                utt_id: cols[1].to_string(),
                split: cols[2].parse()?,
                path: cols[3].to_string(),
                wave: load_wav(root.join(cols[3]))?,
            });
        }
        Ok(corpus)
    }
}
