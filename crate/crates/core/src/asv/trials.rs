use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::encoder::{score, SpeakerEncoder};
use crate::audio::{Split, SpeakerCorpus, Waveform};
use crate::defense::Defend;
use crate::error::{invalid, Error, Result};
use crate::metrics::LabeledScore;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

impl Trial {
    pub fn new(target: bool, enroll: impl Into<String>, test: impl Into<String>) -> Result<Self> {
        let (enroll, test) = (enroll.into(), test.into());
        if enroll == test {
            return Err(invalid(format!("trial enrolls and tests the same reference {enroll}")));
        }
        Ok(Self { target, enroll, test })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Balanced random trials over the given split: target pairs share a
    /// speaker, nontarget pairs do not.
    pub fn sample(corpus: &SpeakerCorpus, split: Split, n_target: usize, n_nontarget: usize, seed: u64) -> Result<Self> {
        let utts: Vec<_> = corpus.split(split).collect();
        let mut rng = seed::rng(seed, &[0x7121]);
        let mut same = Vec::new();
        let mut diff = Vec::new();
        for i in 0..utts.len() {
            for j in i + 1..utts.len() {
                if utts[i].speaker == utts[j].speaker {
                    same.push((i, j));
                } else {
                    diff.push((i, j));
                }
            }
        }
        if same.len() < n_target || diff.len() < n_nontarget {
            return Err(invalid(format!(
                "split has {} target and {} nontarget pairs, {n_target}/{n_nontarget} requested",
                same.len(),
                diff.len()
            )));
        }
        same.shuffle(&mut rng);
        diff.shuffle(&mut rng);
        let mut trials = Vec::with_capacity(n_target + n_nontarget);
        for (target, pairs) in [(true, &same[..n_target]), (false, &diff[..n_nontarget])] {
            for &(i, j) in pairs {
                let (a, b) = if rng.random::<bool>() { (i, j) } else { (j, i) };
                trials.push(Trial::new(target, &utts[a].path, &utts[b].path)?);
            }
        }
        trials.shuffle(&mut rng);
        Ok(Self { trials })
    }

    /// Space-separated `label enroll test` lines, label 1 for target.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let _ = writeln!(s, "{} {} {}", u8::from(t.target), t.enroll, t.test);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: &str| Error::Parse {
                what: "trial list".into(),
                msg: format!("line {}: {msg}", ln + 1),
            };
            if cols.len() != 3 {
                return Err(bad("expected `label enroll test`"));
            }
            let target = match cols[0] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("label must be 1 or 0")),
            };
            trials.push(Trial::new(target, cols[1], cols[2])?);
        }
        Ok(Self { trials })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<ScoredTrial>,
}

impl ScoreSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn labeled(&self) -> Vec<LabeledScore> {
        self.scores
            .iter()
            .map(|s| LabeledScore {
                score: s.score,
                target: s.trial.target,
            })
            .collect()
    }

    /// CSV with header `enroll,test,label,score`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("enroll,test,label,score\n");
        for st in &self.scores {
            let _ = writeln!(
                s,
                "{},{},{},{:.9}",
                st.trial.enroll,
                st.trial.test,
                u8::from(st.trial.target),
                st.score
            );
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("enroll,test,label,score") {
            return Err(Error::Parse {
                what: "score file".into(),
                msg: "missing `enroll,test,label,score` header".into(),
            });
        }
        let mut scores = Vec::new();
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            let parsed = (cols.len() == 4)
                .then(|| Some((cols[2].parse::<u8>().ok()?, cols[3].parse::<f64>().ok()?)))
                .flatten();
            let Some((label, score)) = parsed.filter(|(l, s)| *l <= 1 && s.is_finite()) else {
                return Err(Error::Parse {
                    what: "score file".into(),
                    msg: format!("line {}: {line:?}", ln + 2),
                });
            };
            scores.push(ScoredTrial {
                trial: Trial::new(label == 1, cols[0], cols[1])?,
                score,
            });
        }
        Ok(Self { scores })
    }
}

/// Source of audio by reference key.
pub trait AudioSource: Sync {
    fn audio(&self, key: &str) -> Option<&Waveform>;
}

impl AudioSource for HashMap<String, Waveform> {
    fn audio(&self, key: &str) -> Option<&Waveform> {
        self.get(key)
    }
}

impl AudioSource for BTreeMap<String, Waveform> {
    fn audio(&self, key: &str) -> Option<&Waveform> {
        self.get(key)
    }
}

/// Scores every trial. A defense, when given, transforms the test side
/// only, seeded per trial index from `seed`.
pub fn evaluate_trials<E: SpeakerEncoder>(
    trials: &TrialList,
    audio: &impl AudioSource,
    model: &E,
    defense: Option<&dyn Defend>,
    seed: u64,
) -> Result<ScoreSet> {
    let lookup = |key: &str| audio.audio(key).ok_or_else(|| Error::MissingAudio(key.to_string()));
    let mut enroll_keys: Vec<&str> = trials.trials.iter().map(|t| t.enroll.as_str()).collect();
    let mut seen = HashSet::new();
    enroll_keys.retain(|k| seen.insert(*k));
    let enrolled: HashMap<&str, Vec<f32>> = enroll_keys
        .par_iter()
        .map(|&k| Ok((k, model.embed(lookup(k)?)?)))
        .collect::<Result<_>>()?;
    let scores = trials
        .trials
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let w = lookup(&t.test)?;
            let e = match defense {
                Some(d) => model.embed(&d.apply(w, seed::derive(seed, &[i as u64]))?)?,
                None => model.embed(w)?,
            };
            Ok(ScoredTrial {
                trial: t.clone(),
                score: score(&enrolled[t.enroll.as_str()], &e)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet { scores })
}
