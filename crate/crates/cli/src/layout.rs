//! Where every artifact of a run lives, and the evaluation cells it produces.

use std::fmt;
use std::path::{Path, PathBuf};

use pflow_core::attack::AttackMethod;
use pflow_core::defense::DefenseSpec;

use crate::config::ExperimentConfig;

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.data().join("manifest.tsv")
    }

    pub fn trials(&self, name: &str) -> PathBuf {
        self.root.join("trials").join(format!("{name}.txt"))
    }

    pub fn encoder(&self) -> PathBuf {
        self.root.join("asv/encoder.pflw")
    }

    pub fn asv_losses(&self) -> PathBuf {
        self.root.join("asv/losses.csv")
    }

    pub fn adversarial(&self, method: AttackMethod, steps: usize, trial: usize) -> PathBuf {
        self.root
            .join(format!("attack/{method}/s{steps}/{trial:04}.wav"))
    }

    pub fn genuine(&self, trial: usize) -> PathBuf {
        self.root.join(format!("attack/genuine/{trial:04}.wav"))
    }

    pub fn val_adversarial(&self, trial: usize) -> PathBuf {
        self.root.join(format!("attack/val/{trial:04}.wav"))
    }

    /// Written last by `attack`, so its presence means the stage finished.
    pub fn attack_manifest(&self) -> PathBuf {
        self.root.join("attack/manifest.csv")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.root.join("dap/denoiser.pflw")
    }

    pub fn dap_losses(&self) -> PathBuf {
        self.root.join("dap/losses.csv")
    }

    pub fn t_star_curve(&self) -> PathBuf {
        self.root.join("defend/t_star.csv")
    }

    pub fn defenses(&self) -> PathBuf {
        self.root.join("defend/defenses.json")
    }

    pub fn scores(&self, cell: &Cell) -> PathBuf {
        self.root.join("scores").join(format!("{}.csv", cell.slug()))
    }

    pub fn quality(&self, cell: &Cell) -> PathBuf {
        self.root.join("quality").join(format!("{}.csv", cell.slug()))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("report").join(name)
    }

    pub fn timings(&self, name: &str) -> PathBuf {
        self.root.join("timings").join(name)
    }
}

/// What the test side of each trial is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    /// Clean test audio plus white noise at the adversarial SNR.
    Genuine,
    Adversarial { method: AttackMethod, steps: usize },
}

impl Condition {
    pub fn id(&self) -> String {
        match self {
            Condition::Genuine => "genuine".into(),
            Condition::Adversarial { method, steps } => format!("adv-{}-s{steps}", short(*method)),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Condition::Genuine => "genuine",
            Condition::Adversarial {
                method: AttackMethod::PgdL2,
                ..
            } => "adv-PGD",
            Condition::Adversarial {
                method: AttackMethod::BimLinf,
                ..
            } => "adv-BIM",
        }
    }

    pub fn steps(&self) -> Option<usize> {
        match self {
            Condition::Genuine => None,
            Condition::Adversarial { steps, .. } => Some(*steps),
        }
    }

    pub fn is_adversarial(&self) -> bool {
        matches!(self, Condition::Adversarial { .. })
    }
}

fn short(m: AttackMethod) -> &'static str {
    match m {
        AttackMethod::PgdL2 => "pgd",
        AttackMethod::BimLinf => "bim",
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// One (condition, defense) pair of the evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub condition: Condition,
    pub defense: DefenseSpec,
}

impl Cell {
    pub fn slug(&self) -> String {
        let d = match self.defense.params().as_str() {
            "" => self.defense.kind().to_string(),
            p => format!("{}_{}", self.defense.kind(), p.replace(';', "_")),
        };
        format!("{}__{d}", self.condition.id())
    }
}

/// Main conditions at the configured step count: genuine first, then one per
/// attack method.
pub fn main_conditions(cfg: &ExperimentConfig) -> Vec<Condition> {
    std::iter::once(Condition::Genuine)
        .chain(cfg.attack.methods.iter().map(|&method| Condition::Adversarial {
            method,
            steps: cfg.attack.steps,
        }))
        .collect()
}

/// Defenses of the steps sweep: none, the sweep noise level, and the first
/// `dap` entry if there is one.
pub fn sweep_defenses(cfg: &ExperimentConfig, defenses: &[DefenseSpec]) -> Vec<DefenseSpec> {
    let mut d = vec![
        DefenseSpec::Identity,
        DefenseSpec::AddNoise {
            sigma: cfg.report.sweep_noise_sigma,
        },
    ];
    d.extend(defenses.iter().find(|s| matches!(s, DefenseSpec::Dap { .. })).cloned());
    d
}

/// Every cell a run evaluates: the full defense list on the main conditions,
/// then the sweep defenses at every step count. Duplicates are dropped.
pub fn plan_cells(cfg: &ExperimentConfig, defenses: &[DefenseSpec]) -> Vec<Cell> {
    let mut cells: Vec<Cell> = Vec::new();
    let mut push = |cell: Cell| {
        if !cells.contains(&cell) {
            cells.push(cell);
        }
    };
    for condition in main_conditions(cfg) {
        for d in defenses {
            push(Cell {
                condition,
                defense: d.clone(),
            });
        }
    }
    let sweep = sweep_defenses(cfg, defenses);
    for &method in &cfg.attack.methods {
        for &steps in &cfg.attack.step_grid {
            for d in &sweep {
                push(Cell {
                    condition: Condition::Adversarial { method, steps },
                    defense: d.clone(),
                });
            }
        }
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_covers_every_table_cell_once() {
        let cfg = ExperimentConfig::default();
        let cells = plan_cells(&cfg, &cfg.defenses);
        // 3 main conditions × 10 defenses, plus 2 methods × 3 other step counts × 3 sweep defenses
        assert_eq!(cells.len(), 30 + 18);
        let mut slugs: Vec<String> = cells.iter().map(Cell::slug).collect();
        slugs.sort();
        slugs.dedup();
        assert_eq!(slugs.len(), cells.len());
        assert!(slugs.contains(&"adv-pgd-s50__noise_sigma=0.01".to_string()));
        assert!(slugs.contains(&"genuine__none".to_string()));
    }
}
