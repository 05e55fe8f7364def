//! Hit@1 computation and metric reports.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvalInstance, ItemIdx, ItemLabel, ScenarioLabel, UserIdx};
use crate::error::Result;

/// The top-ranked candidate: highest score, ties to the lowest item index.
/// NaN scores never win.
pub fn winner(candidates: &[ItemIdx], scores: &[f32]) -> Option<ItemIdx> {
    let mut best: Option<(f32, ItemIdx)> = None;
    for (&c, &s) in candidates.iter().zip(scores) {
        if s.is_nan() {
            continue;
        }
        best = match best {
            None => Some((s, c)),
            Some((bs, bc)) if s > bs || (s == bs && c < bc) => Some((s, c)),
            keep => keep,
        };
    }
    best.map(|(_, c)| c)
}

/// Candidates ordered by descending score, ties by ascending item index.
pub fn rank(candidates: &[ItemIdx], scores: &[f32]) -> Vec<(ItemIdx, f32)> {
    let mut v: Vec<(ItemIdx, f32)> = candidates.iter().copied().zip(scores.iter().copied()).collect();
    v.sort_by(|a, b| {
        let sa = if a.1.is_nan() { f32::NEG_INFINITY } else { a.1 };
        let sb = if b.1.is_nan() { f32::NEG_INFINITY } else { b.1 };
        sb.total_cmp(&sa).then(a.0.cmp(&b.0))
    });
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub user: UserIdx,
    pub positive: ItemIdx,
    pub winner: Option<ItemIdx>,
    pub hit: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcomes {
    pub items: Vec<Outcome>,
}

impl Outcomes {
    pub fn hits(&self) -> usize {
        self.items.iter().filter(|o| o.hit).count()
    }

    pub fn errors(&self) -> usize {
        self.items.iter().filter(|o| o.error.is_some()).count()
    }

    pub fn hit_rate(&self) -> f64 {
        if self.items.is_empty() {
            0.0
        } else {
            self.hits() as f64 / self.items.len() as f64
        }
    }

    pub fn filter(&self, keep: impl Fn(&Outcome) -> bool) -> Outcomes {
        Outcomes {
            items: self.items.iter().filter(|o| keep(o)).cloned().collect(),
        }
    }
}

/// Scores every instance in parallel. A scoring failure counts as a miss and
/// keeps its error message.
pub fn hit_at_1<F>(instances: &[EvalInstance], scorer: F) -> Outcomes
where
    F: Fn(&EvalInstance) -> Result<Vec<f32>> + Sync,
{
    let items = instances
        .par_iter()
        .map(|inst| match scorer(inst) {
            Ok(scores) => {
                let w = winner(&inst.candidates, &scores);
                Outcome {
                    user: inst.user,
                    positive: inst.positive,
                    winner: w,
                    hit: w == Some(inst.positive),
                    error: None,
                }
            }
            Err(e) => Outcome {
                user: inst.user,
                positive: inst.positive,
                winner: None,
                hit: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Outcomes { items }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub instances: usize,
    pub hits: usize,
    pub hit_at_1: f64,
}

impl LabelStats {
    fn of(o: &Outcomes) -> Self {
        LabelStats {
            instances: o.items.len(),
            hits: o.hits(),
            hit_at_1: o.hit_rate(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario: String,
    pub variant: String,
    pub hit_at_1: f64,
    pub instances: usize,
    pub hits: usize,
    pub errors: usize,
    pub breakdown: BTreeMap<String, LabelStats>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_users: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn from_outcomes(scenario: &str, variant: &str, seed: u64, outcomes: &Outcomes) -> Self {
        MetricReport {
            scenario: scenario.to_string(),
            variant: variant.to_string(),
            hit_at_1: outcomes.hit_rate(),
            instances: outcomes.items.len(),
            hits: outcomes.hits(),
            errors: outcomes.errors(),
            seed,
            ..MetricReport::default()
        }
    }

    /// Adds per-label statistics keyed by the positive item's label.
    pub fn with_labels(mut self, outcomes: &Outcomes, labels: &ScenarioLabel) -> Self {
        for lab in [ItemLabel::Cold, ItemLabel::Warm] {
            let sub = outcomes.filter(|o| labels.labels.get(o.positive) == Some(&lab));
            self.breakdown.insert(lab.as_str().to_string(), LabelStats::of(&sub));
        }
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Plain-text table of reports.
pub fn format_table(reports: &[MetricReport]) -> String {
    let mut out = format!(
        "{:<28} {:<22} {:>8} {:>9} {:>7}\n",
        "scenario", "variant", "Hit@1", "instances", "errors"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<28} {:<22} {:>8.4} {:>9} {:>7}\n",
            r.scenario, r.variant, r.hit_at_1, r.instances, r.errors
        ));
        for (label, s) in &r.breakdown {
            out.push_str(&format!(
                "{:<28} {:<22} {:>8.4} {:>9}\n",
                format!("  {label}"),
                "",
                s.hit_at_1,
                s.instances
            ));
        }
    }
    out
}
