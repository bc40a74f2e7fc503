//! Report rows and the three result tables: error rates by condition and
//! defense, reconstruction quality, and the attack-steps sweep.

use std::fmt::Write as _;

use anyhow::{Context, Result};
use pflow_core::asv::ScoreSet;
use pflow_core::attack::AttackMethod;
use pflow_core::defense::DefenseSpec;
use pflow_core::metrics::{eer, min_dcf, DcfParams};

use crate::config::ExperimentConfig;
use crate::layout::{main_conditions, sweep_defenses, Cell, Condition, RunDir};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub condition: Condition,
    pub defense: DefenseSpec,
    /// Percent.
    pub eer: f64,
    pub min_dcf: f64,
    /// Mean over trials of the defended test audio against the clean original.
    pub si_sdr_db: f64,
    pub stoi_like: f64,
    /// Wall time of the cell; kept out of the tables so they stay reproducible.
    pub runtime_s: f64,
    pub config_hash: String,
}

impl ReportRow {
    fn steps(&self) -> String {
        self.condition.steps().map(|s| s.to_string()).unwrap_or_default()
    }
}

/// Reads one cell's score and quality files into a row.
pub fn read_cell(dir: &RunDir, cell: Cell, dcf: &DcfParams, hash: &str, runtime_s: f64) -> Result<ReportRow> {
    let path = dir.scores(&cell);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let scores = ScoreSet::parse_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
    let labeled = scores.labeled();
    let path = dir.quality(&cell);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let (mut q, mut s, mut n) = (0.0, 0.0, 0usize);
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| -> Result<f64> {
            cols.get(i)
                .and_then(|v| v.parse().ok())
                .with_context(|| format!("{}: bad row {line:?}", path.display()))
        };
        q += parse(1)?;
        s += parse(2)?;
        n += 1;
    }
    let n = n.max(1) as f64;
    Ok(ReportRow {
        eer: eer(&labeled)?,
        min_dcf: min_dcf(&labeled, dcf)?,
        si_sdr_db: q / n,
        stoi_like: s / n,
        condition: cell.condition,
        defense: cell.defense,
        runtime_s,
        config_hash: hash.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct Report {
    pub config_hash: String,
    pub t_star: Option<usize>,
    pub rows: Vec<ReportRow>,
    main: Vec<Condition>,
    defenses: Vec<DefenseSpec>,
    sweep: Vec<DefenseSpec>,
    methods: Vec<AttackMethod>,
    step_grid: Vec<usize>,
}

const QUALITY_KINDS: [&str; 4] = ["none", "median", "noise", "dap"];

impl Report {
    /// `rows` must follow the cell plan of `cfg`; the main-condition rows
    /// fix the defense order.
    pub fn new(cfg: &ExperimentConfig, config_hash: String, rows: Vec<ReportRow>) -> Self {
        let defenses: Vec<DefenseSpec> = rows
            .iter()
            .filter(|r| r.condition == Condition::Genuine)
            .map(|r| r.defense.clone())
            .collect();
        let t_star = defenses.iter().find_map(|d| match d {
            DefenseSpec::Dap { purifier } => Some(purifier.t_star),
            _ => None,
        });
        Self {
            config_hash,
            t_star,
            main: main_conditions(cfg),
            sweep: sweep_defenses(cfg, &defenses),
            defenses,
            methods: cfg.attack.methods.clone(),
            step_grid: cfg.attack.step_grid.clone(),
            rows,
        }
    }

    pub fn get(&self, condition: Condition, defense: &DefenseSpec) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.condition == condition && &r.defense == defense)
    }

    /// First row of `condition` whose defense has this kind.
    pub fn by_kind(&self, condition: Condition, kind: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.condition == condition && r.defense.kind() == kind)
    }

    pub fn main_conditions(&self) -> &[Condition] {
        &self.main
    }

    pub fn defenses(&self) -> &[DefenseSpec] {
        &self.defenses
    }

    fn main_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.main
            .iter()
            .flat_map(move |&c| self.defenses.iter().filter_map(move |d| self.get(c, d)))
    }

    fn quality_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.main_rows()
            .filter(|r| r.condition.is_adversarial() && QUALITY_KINDS.contains(&r.defense.kind()))
    }

    fn sweep_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.methods.iter().flat_map(move |&method| {
            self.step_grid.iter().flat_map(move |&steps| {
                self.sweep
                    .iter()
                    .filter_map(move |d| self.get(Condition::Adversarial { method, steps }, d))
            })
        })
    }

    /// EER and minDCF for every defense under every main condition.
    pub fn table2_csv(&self) -> String {
        let mut s = String::from("condition,steps,defense,params,eer,min_dcf,config_hash\n");
        for r in self.main_rows() {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3},{:.4},{}",
                r.condition.label(),
                r.steps(),
                r.defense.kind(),
                r.defense.params(),
                r.eer,
                r.min_dcf,
                r.config_hash
            );
        }
        s
    }

    /// SI-SDR and STOI-like of defended adversarial audio against clean.
    pub fn table3_csv(&self) -> String {
        let mut s = String::from("condition,steps,defense,params,si_sdr_db,stoi_like,config_hash\n");
        for r in self.quality_rows() {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3},{:.4},{}",
                r.condition.label(),
                r.steps(),
                r.defense.kind(),
                r.defense.params(),
                r.si_sdr_db,
                r.stoi_like,
                r.config_hash
            );
        }
        s
    }

    /// EER over attack step counts for no defense, additive noise and DAP.
    pub fn table4_csv(&self) -> String {
        let mut s = String::from("condition,steps,defense,params,eer,min_dcf,config_hash\n");
        for r in self.sweep_rows() {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3},{:.4},{}",
                r.condition.label(),
                r.steps(),
                r.defense.kind(),
                r.defense.params(),
                r.eer,
                r.min_dcf,
                r.config_hash
            );
        }
        s
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("condition,steps,defense,params,eer,min_dcf,si_sdr_db,stoi_like,config_hash\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3},{:.4},{:.3},{:.4},{}",
                r.condition.label(),
                r.steps(),
                r.defense.kind(),
                r.defense.params(),
                r.eer,
                r.min_dcf,
                r.si_sdr_db,
                r.stoi_like,
                r.config_hash
            );
        }
        s
    }

    pub fn timings_csv(&self) -> String {
        let mut s = String::from("condition,steps,defense,params,runtime_s\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3}",
                r.condition.label(),
                r.steps(),
                r.defense.kind(),
                r.defense.params(),
                r.runtime_s
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config hash  {}", self.config_hash);
        if let Some(t) = self.t_star {
            let _ = writeln!(s, "t*           {t}");
        }
        let _ = writeln!(s, "\nEER (%)");
        let _ = write!(s, "{:<44}", "defense");
        for c in &self.main {
            let _ = write!(s, "{:>12}", c.label());
        }
        s.push('\n');
        for d in &self.defenses {
            let _ = write!(s, "{:<44}", d.to_string());
            for &c in &self.main {
                match self.get(c, d) {
                    Some(r) => {
                        let _ = write!(s, "{:>12.3}", r.eer);
                    }
                    None => {
                        let _ = write!(s, "{:>12}", "-");
                    }
                }
            }
            s.push('\n');
        }

        let _ = writeln!(s, "\nQuality of defended adversarial audio (SI-SDR dB, STOI-like)");
        for r in self.quality_rows() {
            let _ = writeln!(
                s,
                "{:<10}{:<44}{:>10.3}{:>10.4}",
                r.condition.label(),
                r.defense.to_string(),
                r.si_sdr_db,
                r.stoi_like
            );
        }

        let _ = writeln!(s, "\nEER (%) by attack steps");
        let _ = write!(s, "{:<10}{:<44}", "attack", "defense");
        for st in &self.step_grid {
            let _ = write!(s, "{st:>10}");
        }
        s.push('\n');
        for &method in &self.methods {
            for d in &self.sweep {
                let label = Condition::Adversarial { method, steps: 0 }.label();
                let _ = write!(s, "{label:<10}{:<44}", d.to_string());
                for &steps in &self.step_grid {
                    match self.get(Condition::Adversarial { method, steps }, d) {
                        Some(r) => {
                            let _ = write!(s, "{:>10.3}", r.eer);
                        }
                        None => {
                            let _ = write!(s, "{:>10}", "-");
                        }
                    }
                }
                s.push('\n');
            }
        }
        s
    }
}
