//! Experiment configuration: one TOML tree with every default filled in.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pflow_core::asv::AsvTrainConfig;
use pflow_core::attack::{AttackConfig, AttackMethod};
use pflow_core::audio::{CorpusConfig, FeatureConfig};
use pflow_core::defense::DefenseSpec;
use pflow_core::diffusion::{default_grid, DapTrainConfig, PurifierConfig};
use pflow_core::metrics::{DcfParams, StoiConfig};
use pflow_core::seed;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mixed into every stage seed, so one flag changes the whole replicate.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub asv: AsvTrainConfig,
    pub trials: TrialConfig,
    pub attack: AttackPlan,
    pub dap: DapTrainConfig,
    pub t_star: TStarPlan,
    pub metrics: MetricsConfig,
    pub report: ReportConfig,
    pub defenses: Vec<DefenseSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            features: FeatureConfig::default(),
            asv: AsvTrainConfig::default(),
            trials: TrialConfig::default(),
            attack: AttackPlan::default(),
            dap: DapTrainConfig::default(),
            t_star: TStarPlan::default(),
            metrics: MetricsConfig::default(),
            report: ReportConfig::default(),
            defenses: default_defenses(),
        }
    }
}

fn default_defenses() -> Vec<DefenseSpec> {
    let mut d = vec![
        DefenseSpec::Identity,
        DefenseSpec::Median { k: 3 },
        DefenseSpec::Mean { k: 3 },
        DefenseSpec::Gaussian { sigma: 1.0 },
    ];
    d.extend(NOISE_GRID.iter().map(|&sigma| DefenseSpec::AddNoise { sigma }));
    d.push(DefenseSpec::Dap {
        purifier: PurifierConfig::default(),
    });
    d
}

pub const NOISE_GRID: [f64; 5] = [0.002, 0.005, 0.01, 0.02, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub eval_target: usize,
    pub eval_nontarget: usize,
    /// Validation trials are drawn from the train split and used for `t*`.
    pub val_target: usize,
    pub val_nontarget: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            eval_target: 100,
            eval_nontarget: 100,
            val_target: 20,
            val_nontarget: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackPlan {
    pub methods: Vec<AttackMethod>,
    pub epsilon: f64,
    pub alpha: f64,
    /// Step count of the main adversarial conditions.
    pub steps: usize,
    /// Snapshot step counts for the steps sweep; must contain `steps`.
    pub step_grid: Vec<usize>,
}

impl Default for AttackPlan {
    fn default() -> Self {
        Self {
            methods: vec![AttackMethod::PgdL2, AttackMethod::BimLinf],
            epsilon: 30.0,
            alpha: 1.0,
            steps: 50,
            step_grid: vec![10, 20, 50, 100],
        }
    }
}

impl AttackPlan {
    pub fn config(&self, method: AttackMethod) -> AttackConfig {
        AttackConfig {
            method,
            epsilon: self.epsilon,
            alpha: self.alpha,
            steps: self.steps,
        }
    }

    /// The attack whose main snapshot sets the matched-noise level of the
    /// genuine condition and provides validation adversaries.
    pub fn primary(&self) -> AttackMethod {
        if self.methods.contains(&AttackMethod::PgdL2) {
            AttackMethod::PgdL2
        } else {
            self.methods[0]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TStarPlan {
    /// When false every `dap` defense keeps its configured `t_star`.
    pub select: bool,
    pub grid: Vec<usize>,
    pub lambda: f64,
}

impl Default for TStarPlan {
    fn default() -> Self {
        Self {
            select: true,
            grid: default_grid(100, 5),
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub dcf: DcfParams,
    pub stoi: StoiConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Noise level of the add-noise column in the steps sweep.
    pub sweep_noise_sigma: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { sweep_noise_sigma: 0.01 }
    }
}

pub mod stage {
    pub const CORPUS: u64 = 1;
    pub const TRIALS: u64 = 2;
    pub const ASV: u64 = 3;
    pub const ATTACK: u64 = 4;
    pub const DAP: u64 = 5;
    pub const DEFEND: u64 = 6;
    pub const EVAL: u64 = 7;
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides, with dotted keys addressing nested tables.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Self = toml::Value::Table(tree).try_into().context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.attack;
        if a.methods.is_empty() {
            bail!("attack.methods is empty");
        }
        if !a.step_grid.contains(&a.steps) {
            bail!("attack.step_grid {:?} must contain attack.steps = {}", a.step_grid, a.steps);
        }
        if a.step_grid.windows(2).any(|w| w[0] >= w[1]) {
            bail!("attack.step_grid must be strictly ascending");
        }
        for m in &a.methods {
            a.config(*m).validate()?;
        }
        if self.defenses.is_empty() {
            bail!("defense list is empty");
        }
        if self.t_star.select && self.t_star.grid.is_empty() {
            bail!("t_star.grid is empty");
        }
        if self.dap.schedule.steps == 0 {
            bail!("dap.schedule.steps must be positive");
        }
        self.features.validate(self.corpus.sample_rate)?;
        Ok(())
    }

    /// Seed for a stage, derived from the experiment seed and the stage's own.
    pub fn stage_seed(&self, stage: u64, own: u64) -> u64 {
        seed::derive(self.seed, &[stage, own])
    }

    /// SHA-256 of the canonical config with the output directory blanked, so
    /// the same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> Result<String> {
        let canonical = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn has_dap(&self) -> bool {
        self.defenses.iter().any(|d| matches!(d, DefenseSpec::Dap { .. }))
    }
}

fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} has an empty segment");
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("nonempty");
    let mut node = tree;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override {key:?}: {p} is not a table"),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// A TOML literal when it parses as one, else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
