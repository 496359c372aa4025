use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Category, HarnessError, LengthClass, TaskSpec};
use crate::planner::{EpisodeResult, StepRecord};
use crate::simenv::FaultProfile;
use crate::skills::SkillKind;

/// Length of the expected-chain prefix completed before the first action
/// failure or divergence. Failed or repeated perception calls are recovery
/// and neither advance nor reset the count.
pub fn completed_prefix(steps: &[StepRecord], expected: &[String]) -> usize {
    let mut k = 0;
    for step in steps {
        if k == expected.len() {
            break;
        }
        let ok = step.outcome.is_success();
        let matches = step.skill() == expected[k];
        match step.kind {
            SkillKind::Terminal => break,
            SkillKind::Perception if ok && matches => k += 1,
            SkillKind::Perception => {}
            SkillKind::Action if ok && matches => k += 1,
            SkillKind::Action => break,
        }
    }
    k
}

/// Fraction of the expected chain completed, 1.0 for a successful episode.
pub fn compute_cr(episode: &EpisodeResult, task: &TaskSpec) -> f64 {
    if episode.success {
        return 1.0;
    }
    let len = task.expected_chain.len();
    if len == 0 {
        return 0.0;
    }
    completed_prefix(&episode.steps, &task.expected_chain) as f64 / len as f64
}

/// Percentage rounded to one decimal place.
pub fn percent(part: f64, whole: usize) -> f64 {
    (1000.0 * part / whole as f64).round() / 10.0
}

/// Success rate in percent.
pub fn compute_sr(episodes: &[EpisodeResult]) -> Result<f64, HarnessError> {
    if episodes.is_empty() {
        return Err(HarnessError::NoEpisodes);
    }
    let wins = episodes.iter().filter(|e| e.success).count();
    Ok(percent(wins as f64, episodes.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub category: Option<Category>,
    pub length_class: Option<LengthClass>,
    pub episodes: usize,
    pub successes: usize,
    pub sr: f64,
    pub cr: f64,
}

/// Everything needed to reproduce a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub suite: String,
    pub backend: String,
    pub faults: FaultProfile,
    pub seed: u64,
    pub repeats: usize,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fingerprint: Fingerprint,
    /// Category x length-class cells, then per-category totals
    /// (`length_class` null), then the overall total (both null).
    pub cells: Vec<CellMetrics>,
}

#[derive(Default)]
struct Acc {
    n: usize,
    wins: usize,
    cr_sum: f64,
}

impl Acc {
    fn add(&mut self, success: bool, cr: f64) {
        self.n += 1;
        self.wins += usize::from(success);
        self.cr_sum += cr;
    }

    fn cell(&self, category: Option<Category>, length_class: Option<LengthClass>) -> CellMetrics {
        let pct = |x: f64| if self.n == 0 { 0.0 } else { percent(x, self.n) };
        CellMetrics {
            category,
            length_class,
            episodes: self.n,
            successes: self.wins,
            sr: pct(self.wins as f64),
            cr: pct(self.cr_sum),
        }
    }
}

impl MetricsReport {
    /// `rows` holds (category, class, success, cr) per episode.
    pub fn aggregate(fingerprint: Fingerprint, rows: &[(Category, LengthClass, bool, f64)]) -> Self {
        let mut cells: BTreeMap<(Category, LengthClass), Acc> = BTreeMap::new();
        let mut per_cat: BTreeMap<Category, Acc> = BTreeMap::new();
        let mut total = Acc::default();
        for &(cat, class, ok, cr) in rows {
            cells.entry((cat, class)).or_default().add(ok, cr);
            per_cat.entry(cat).or_default().add(ok, cr);
            total.add(ok, cr);
        }
        let mut out: Vec<CellMetrics> = cells.iter().map(|((c, l), a)| a.cell(Some(*c), Some(*l))).collect();
        out.extend(per_cat.iter().map(|(c, a)| a.cell(Some(*c), None)));
        out.push(total.cell(None, None));
        Self { fingerprint, cells: out }
    }

    pub fn cell(&self, category: Option<Category>, length_class: Option<LengthClass>) -> Option<&CellMetrics> {
        self.cells
            .iter()
            .find(|c| c.category == category && c.length_class == length_class)
    }

    pub fn overall(&self) -> &CellMetrics {
        self.cells.last().expect("report always has a total row")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let fp = &self.fingerprint;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "suite {}  backend {}  seed {}  repeats {}  p_detect_empty {}  p_action_fail {}",
            fp.suite, fp.backend, fp.seed, fp.repeats, fp.faults.p_detect_empty, fp.faults.p_action_fail
        );
        let _ = writeln!(out, "{:<18} {:<7} {:>8} {:>7} {:>7}", "category", "length", "episodes", "SR%", "CR%");
        for c in &self.cells {
            let cat = c.category.map_or("all".to_string(), |c| c.to_string());
            let len = c.length_class.map_or("all".to_string(), |l| l.to_string());
            let _ = writeln!(
                out,
                "{:<18} {:<7} {:>8} {:>7.1} {:>7.1}",
                cat, len, c.episodes, c.sr, c.cr
            );
        }
        out
    }
}
