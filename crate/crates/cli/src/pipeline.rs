//! Experiment stages. Each one reads its inputs from the run directory and
//! writes its outputs there; nothing outside it is touched.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pflow_core::asv::{score, train_asv, Encoder, ScoreSet, ScoredTrial, SpeakerEncoder, Trial, TrialList};
use pflow_core::attack::{attack_snapshots, genuine_with_matched_noise, AttackConfig, AttackTarget, MANIFEST_HEADER};
use pflow_core::audio::{load_wav, save_wav, synth_corpus, SpeakerCorpus, Split, Waveform};
use pflow_core::defense::{Defend, DefenseSpec};
use pflow_core::diffusion::{select_t_star, train_dap, DapTrainMode, Denoiser, TrialSet};
use pflow_core::metrics::{si_sdr, stoi_like};
use pflow_core::seed;
use rayon::prelude::*;

use crate::config::{stage, ExperimentConfig};
use crate::layout::{plan_cells, Condition, RunDir};
use crate::report::{read_cell, Report};

pub const STAGES: [&str; 7] = ["synth-data", "train-asv", "attack", "train-dap", "defend", "evaluate", "report"];

pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: RunDir,
    pub hash: String,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} (missing {})", path.display());
    }
    Ok(())
}

fn lookup<'a>(audio: &'a HashMap<String, Waveform>, key: &str) -> Result<&'a Waveform> {
    audio.get(key).with_context(|| format!("trial refers to {key}, which is not in the corpus"))
}

impl Run {
    /// Opens (or creates) the run directory named by the config. A directory
    /// made from a different config is refused.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = RunDir::new(&cfg.out_dir);
        let hash = cfg.hash()?;
        let path = dir.config();
        if path.exists() {
            let prev = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let prev_hash = ExperimentConfig::from_toml(&prev)
                .and_then(|c| c.hash())
                .with_context(|| format!("{} is not a valid config", path.display()))?;
            if prev_hash != hash {
                bail!(
                    "{} was created from a different config (hash {prev_hash}, now {hash}); use a fresh --out",
                    dir.root().display()
                );
            }
        }
        write_file(&path, cfg.to_toml()?)?;
        Ok(Self { cfg, dir, hash })
    }

    pub fn stage(&self, name: &str) -> Result<()> {
        let t0 = Instant::now();
        match name {
            "synth-data" => self.synth_data()?,
            "train-asv" => self.train_asv()?,
            "attack" => self.attack()?,
            "train-dap" => self.train_dap()?,
            "defend" => self.defend()?,
            "evaluate" => self.evaluate()?,
            "report" => {
                self.report()?;
            }
            other => bail!("unknown stage {other}"),
        }
        self.record_timing(name, t0.elapsed().as_secs_f64())
    }

    /// Every stage in order, then the report.
    pub fn run_all(&self) -> Result<Report> {
        for s in &STAGES[..STAGES.len() - 1] {
            self.stage(s)?;
        }
        let t0 = Instant::now();
        let r = self.report()?;
        self.record_timing("report", t0.elapsed().as_secs_f64())?;
        Ok(r)
    }

    fn record_timing(&self, name: &str, secs: f64) -> Result<()> {
        let path = self.dir.timings("stages.csv");
        let mut rows: BTreeMap<String, String> = BTreeMap::new();
        if let Ok(text) = std::fs::read_to_string(&path) {
            for line in text.lines().skip(1) {
                if let Some((k, v)) = line.split_once(',') {
                    rows.insert(k.to_string(), v.to_string());
                }
            }
        }
        rows.insert(name.to_string(), format!("{secs:.3}"));
        let mut out = String::from("stage,seconds\n");
        for (k, v) in STAGES.iter().filter_map(|s| rows.get(*s).map(|v| (s, v))) {
            let _ = writeln!(out, "{k},{v}");
        }
        write_file(&path, out)
    }

    fn corpus(&self, stage: &str) -> Result<SpeakerCorpus> {
        require(
            &self.dir.data_manifest(),
            &format!("{stage} requires the synthetic corpus; run synth-data first"),
        )?;
        Ok(SpeakerCorpus::read(&self.dir.data())?)
    }

    fn trial_list(&self, name: &str, stage: &str) -> Result<TrialList> {
        let path = self.dir.trials(name);
        require(&path, &format!("{stage} requires the {name} trial list; run synth-data first"))?;
        Ok(TrialList::parse(&std::fs::read_to_string(&path)?)?)
    }

    fn encoder(&self, stage: &str) -> Result<Encoder> {
        let path = self.dir.encoder();
        require(&path, &format!("{stage} requires a trained ASV checkpoint; run train-asv first"))?;
        Ok(Encoder::load(&path)?)
    }

    fn denoiser(&self, stage: &str) -> Result<Arc<Denoiser>> {
        let path = self.dir.denoiser();
        require(&path, &format!("{stage} requires a trained DAP checkpoint; run train-dap first"))?;
        Ok(Arc::new(Denoiser::load(&path)?))
    }

    fn require_attacks(&self, stage: &str) -> Result<()> {
        require(
            &self.dir.attack_manifest(),
            &format!("{stage} requires adversarial audio; run attack first"),
        )
    }

    /// Defense list with `t*` filled in by `defend`.
    pub fn resolved_defenses(&self, stage: &str) -> Result<Vec<DefenseSpec>> {
        let path = self.dir.defenses();
        require(&path, &format!("{stage} requires resolved defenses; run defend first"))?;
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn synth_data(&self) -> Result<()> {
        let cfg = &self.cfg;
        let mut c = cfg.corpus.clone();
        c.seed = cfg.stage_seed(stage::CORPUS, c.seed);
        let corpus = synth_corpus(&c)?;
        corpus.write(&self.dir.data())?;
        eprintln!(
            "synth-data: {} speakers, {} utterances at {} Hz",
            corpus.speakers.len(),
            corpus.utterances.len(),
            c.sample_rate
        );
        let t = &cfg.trials;
        let s = cfg.stage_seed(stage::TRIALS, 0);
        let eval = TrialList::sample(&corpus, Split::Eval, t.eval_target, t.eval_nontarget, seed::derive(s, &[0]))?;
        let val = TrialList::sample(&corpus, Split::Train, t.val_target, t.val_nontarget, seed::derive(s, &[1]))?;
        write_file(&self.dir.trials("eval"), eval.to_text())?;
        write_file(&self.dir.trials("val"), val.to_text())
    }

    pub fn train_asv(&self) -> Result<()> {
        let corpus = self.corpus("train-asv")?;
        let mut a = self.cfg.asv.clone();
        a.seed = self.cfg.stage_seed(stage::ASV, a.seed);
        let trained = train_asv(&corpus, &self.cfg.features, &a)?;
        let path = self.dir.encoder();
        ensure_parent(&path)?;
        trained.encoder.save(&path)?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in trained.losses.iter().enumerate() {
            let _ = writeln!(csv, "{i},{l:.6}");
        }
        eprintln!(
            "train-asv: loss {:.4} -> {:.4}",
            trained.losses[0],
            trained.losses.last().copied().unwrap_or(f64::NAN)
        );
        write_file(&self.dir.asv_losses(), csv)
    }

    pub fn attack(&self) -> Result<()> {
        let enc = self.encoder("attack")?;
        let corpus = self.corpus("attack")?;
        let audio = corpus.audio();
        let eval = self.trial_list("eval", "attack")?;
        let val = self.trial_list("val", "attack")?;
        let plan = &self.cfg.attack;
        let primary = plan.primary();
        let main = plan.step_grid.iter().position(|&s| s == plan.steps).expect("validated");
        let noise_seed = self.cfg.stage_seed(stage::ATTACK, 0);
        let target_of = |t: &Trial| -> Result<AttackTarget> {
            Ok(AttackTarget {
                enroll_embedding: enc.embed(lookup(&audio, &t.enroll)?)?,
                target: t.target,
            })
        };

        let mut manifest = format!("{MANIFEST_HEADER}\n");
        for &method in &plan.methods {
            let acfg = plan.config(method);
            eprintln!("attack: {method} on {} trials, steps {:?}", eval.len(), plan.step_grid);
            let rows = eval
                .trials
                .par_iter()
                .enumerate()
                .map(|(i, t)| -> Result<String> {
                    let clean = lookup(&audio, &t.test)?;
                    let snaps = attack_snapshots(&enc, clean, &target_of(t)?, &acfg, &plan.step_grid)?;
                    let mut rows = String::new();
                    for ex in &snaps {
                        save_wav(self.dir.adversarial(method, ex.steps, i), &ex.perturbed)?;
                        let c = AttackConfig {
                            steps: ex.steps,
                            ..acfg.clone()
                        };
                        rows.push_str(&ex.manifest_row(&i.to_string(), &c));
                        rows.push('\n');
                    }
                    if method == primary {
                        let g = genuine_with_matched_noise(clean, &snaps[main], seed::derive(noise_seed, &[i as u64]))?;
                        save_wav(self.dir.genuine(i), &g)?;
                    }
                    Ok(rows)
                })
                .collect::<Result<Vec<_>>>()?;
            manifest.extend(rows);
        }

        let acfg = plan.config(primary);
        eprintln!("attack: {primary} on {} validation trials", val.len());
        val.trials
            .par_iter()
            .enumerate()
            .try_for_each(|(i, t)| -> Result<()> {
                let ex = attack_snapshots(&enc, lookup(&audio, &t.test)?, &target_of(t)?, &acfg, &[plan.steps])?.remove(0);
                save_wav(self.dir.val_adversarial(i), &ex.perturbed)?;
                Ok(())
            })?;
        write_file(&self.dir.attack_manifest(), manifest)
    }

    pub fn train_dap(&self) -> Result<()> {
        let mut d = self.cfg.dap.clone();
        d.seed = self.cfg.stage_seed(stage::DAP, d.seed);
        let trained = match d.mode {
            DapTrainMode::Clean => {
                let corpus = self.corpus("train-dap")?;
                let clean: Vec<Waveform> = corpus.split(Split::Train).map(|u| u.wave.clone()).collect();
                train_dap(&clean, None, &d)?
            }
            DapTrainMode::Adversarial => {
                self.require_attacks("adversarial DAP training")?;
                let corpus = self.corpus("train-dap")?;
                let audio = corpus.audio();
                let val = self.trial_list("val", "train-dap")?;
                let mut clean = Vec::with_capacity(val.len());
                let mut adv = Vec::with_capacity(val.len());
                for (i, t) in val.trials.iter().enumerate() {
                    clean.push(lookup(&audio, &t.test)?.clone());
                    adv.push(load_wav(self.dir.val_adversarial(i))?);
                }
                train_dap(&clean, Some(&adv), &d)?
            }
        };
        let path = self.dir.denoiser();
        ensure_parent(&path)?;
        trained.denoiser.save(&path)?;
        let mut csv = String::from("iteration,loss\n");
        for (i, l) in trained.losses.iter().enumerate() {
            let _ = writeln!(csv, "{i},{l:.6}");
        }
        let tail = trained.losses.len().min(50);
        let late = trained.losses[trained.losses.len() - tail..].iter().sum::<f64>() / tail.max(1) as f64;
        eprintln!(
            "train-dap: {} iterations, first loss {:.2}, mean of last {tail} {late:.2}",
            trained.losses.len(),
            trained.losses.first().copied().unwrap_or(f64::NAN)
        );
        write_file(&self.dir.dap_losses(), csv)
    }

    /// Picks `t*` on the validation trials (when configured) and writes the
    /// resolved defense list.
    pub fn defend(&self) -> Result<()> {
        let cfg = &self.cfg;
        let mut specs = cfg.defenses.clone();
        let model = if cfg.has_dap() { Some(self.denoiser("defend")?) } else { None };
        if let (Some(model), true) = (&model, cfg.t_star.select) {
            self.require_attacks("t* selection")?;
            let enc = self.encoder("defend")?;
            let corpus = self.corpus("defend")?;
            let audio: BTreeMap<String, Waveform> = corpus.audio().into_iter().collect();
            let val = self.trial_list("val", "defend")?;
            let mut adv_audio = audio.clone();
            let mut adv_trials = TrialList::default();
            for (i, t) in val.trials.iter().enumerate() {
                let key = format!("val-adv/{i:04}");
                adv_audio.insert(key.clone(), load_wav(self.dir.val_adversarial(i))?);
                adv_trials.trials.push(Trial::new(t.target, t.enroll.clone(), key)?);
            }
            let base = specs
                .iter()
                .find_map(|s| match s {
                    DefenseSpec::Dap { purifier } => Some(purifier.clone()),
                    _ => None,
                })
                .expect("has dap");
            let max_t = model.noise_schedule().steps();
            let grid: Vec<usize> = cfg.t_star.grid.iter().copied().filter(|&t| (1..=max_t).contains(&t)).collect();
            if grid.is_empty() {
                bail!("no t_star.grid value lies in 1..={max_t}");
            }
            eprintln!("defend: selecting t* over {grid:?}");
            let sel = select_t_star(
                model,
                &enc,
                &base,
                &TrialSet {
                    trials: &val,
                    audio: &audio,
                },
                Some(&TrialSet {
                    trials: &adv_trials,
                    audio: &adv_audio,
                }),
                &grid,
                cfg.t_star.lambda,
                cfg.stage_seed(stage::DEFEND, 0),
            )?;
            eprintln!("defend: t* = {}", sel.t_star);
            write_file(&self.dir.t_star_curve(), sel.to_csv())?;
            for s in &mut specs {
                if let DefenseSpec::Dap { purifier } = s {
                    purifier.t_star = sel.t_star;
                }
            }
        }
        for s in &specs {
            s.build(model.as_ref())?;
        }
        write_file(&self.dir.defenses(), serde_json::to_string_pretty(&specs)? + "\n")
    }

    fn condition_audio(&self, c: Condition, n: usize) -> Result<Vec<Waveform>> {
        (0..n)
            .map(|i| {
                let path = match c {
                    Condition::Genuine => self.dir.genuine(i),
                    Condition::Adversarial { method, steps } => self.dir.adversarial(method, steps, i),
                };
                Ok(load_wav(&path)?)
            })
            .collect()
    }

    /// Scores and quality for every planned cell.
    pub fn evaluate(&self) -> Result<()> {
        let cfg = &self.cfg;
        let defenses = self.resolved_defenses("evaluate")?;
        let model = if defenses.iter().any(|d| matches!(d, DefenseSpec::Dap { .. })) {
            Some(self.denoiser("evaluate")?)
        } else {
            None
        };
        self.require_attacks("evaluate")?;
        let enc = self.encoder("evaluate")?;
        let corpus = self.corpus("evaluate")?;
        let audio = corpus.audio();
        let eval = self.trial_list("eval", "evaluate")?;
        let n = eval.len();

        let mut enroll_keys: Vec<&str> = eval.trials.iter().map(|t| t.enroll.as_str()).collect();
        enroll_keys.sort_unstable();
        enroll_keys.dedup();
        let enrolled: HashMap<&str, Vec<f32>> = enroll_keys
            .par_iter()
            .map(|&k| Ok((k, enc.embed(lookup(&audio, k)?)?)))
            .collect::<Result<_>>()?;
        let clean: Vec<&Waveform> = eval.trials.iter().map(|t| lookup(&audio, &t.test)).collect::<Result<_>>()?;

        let seed = cfg.stage_seed(stage::EVAL, 0);
        let cells = plan_cells(cfg, &defenses);
        let mut cache: HashMap<Condition, Vec<Waveform>> = HashMap::new();
        let mut timings = String::from("cell,seconds\n");
        for (k, cell) in cells.iter().enumerate() {
            let t0 = Instant::now();
            if !cache.contains_key(&cell.condition) {
                cache.insert(cell.condition, self.condition_audio(cell.condition, n)?);
            }
            let tests = &cache[&cell.condition];
            let defense = cell.defense.build(model.as_ref())?;
            let results = (0..n)
                .into_par_iter()
                .map(|i| -> Result<(f64, f64, f64)> {
                    let y = defense.apply(&tests[i], seed::derive(seed, &[i as u64]))?;
                    let s = score(&enrolled[eval.trials[i].enroll.as_str()], &enc.embed(&y)?)?;
                    let q = si_sdr(y.samples(), clean[i].samples())?;
                    let st = stoi_like(&y, clean[i], &cfg.metrics.stoi)?;
                    Ok((s, q, st))
                })
                .collect::<Result<Vec<_>>>()?;
            let scores = ScoreSet {
                scores: eval
                    .trials
                    .iter()
                    .zip(&results)
                    .map(|(t, r)| ScoredTrial {
                        trial: t.clone(),
                        score: r.0,
                    })
                    .collect(),
            };
            let mut quality = String::from("trial,si_sdr_db,stoi_like\n");
            for (i, r) in results.iter().enumerate() {
                let _ = writeln!(quality, "{i},{:.6},{:.6}", r.1, r.2);
            }
            write_file(&self.dir.scores(cell), scores.to_csv())?;
            write_file(&self.dir.quality(cell), quality)?;
            let secs = t0.elapsed().as_secs_f64();
            let _ = writeln!(timings, "{},{secs:.3}", cell.slug());
            eprintln!("evaluate: [{}/{}] {} {} ({secs:.1}s)", k + 1, cells.len(), cell.condition, cell.defense);
        }
        write_file(&self.dir.timings("cells.csv"), timings)
    }

    /// Joins score and quality files into the report tables. Every missing
    /// input is listed in the error.
    pub fn report(&self) -> Result<Report> {
        let defenses_path = self.dir.defenses();
        let mut missing = Vec::new();
        let mut cells = Vec::new();
        if defenses_path.exists() {
            cells = plan_cells(&self.cfg, &self.resolved_defenses("report")?);
            for c in &cells {
                for p in [self.dir.scores(c), self.dir.quality(c)] {
                    if !p.exists() {
                        missing.push(p);
                    }
                }
            }
        } else {
            missing.push(defenses_path);
        }
        if !missing.is_empty() {
            let list: Vec<String> = missing.iter().map(|p| format!("  {}", p.display())).collect();
            bail!(
                "report is missing {} input file(s); run the earlier stages first:\n{}",
                missing.len(),
                list.join("\n")
            );
        }
        let timings = self.cell_timings();
        let rows = cells
            .into_iter()
            .map(|c| {
                let runtime = timings.get(&c.slug()).copied().unwrap_or(f64::NAN);
                read_cell(&self.dir, c, &self.cfg.metrics.dcf, &self.hash, runtime)
            })
            .collect::<Result<Vec<_>>>()?;
        let report = Report::new(&self.cfg, self.hash.clone(), rows);
        for (name, body) in [
            ("table2.csv", report.table2_csv()),
            ("table3.csv", report.table3_csv()),
            ("table4.csv", report.table4_csv()),
            ("rows.csv", report.rows_csv()),
            ("timings.csv", report.timings_csv()),
            ("summary.txt", report.summary()),
        ] {
            write_file(&self.dir.report(name), body)?;
        }
        Ok(report)
    }

    fn cell_timings(&self) -> HashMap<String, f64> {
        std::fs::read_to_string(self.dir.timings("cells.csv"))
            .unwrap_or_default()
            .lines()
            .skip(1)
            .filter_map(|l| {
                let (k, v) = l.rsplit_once(',')?;
                Some((k.to_string(), v.parse().ok()?))
            })
            .collect()
    }
}
