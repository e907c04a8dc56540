//! Answer scoring and run-level aggregates.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CfqaError, Result};
use crate::model::policy::N_ACTIONS;

pub fn exact_match<A: AsRef<str>, B: AsRef<str>>(pred: &[A], gold: &[B]) -> bool {
    pred.len() == gold.len() && pred.iter().zip(gold).all(|(a, b)| a.as_ref() == b.as_ref())
}

/// Harmonic mean of precision and recall over the multiset overlap.
pub fn token_f1<A: AsRef<str>, B: AsRef<str>>(pred: &[A], gold: &[B]) -> f64 {
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for g in gold {
        *counts.entry(g.as_ref()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_ref()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best exact match and best F1 against any of the gold answers.
pub fn score_answer<A: AsRef<str>>(pred: &[A], golds: &[Vec<String>]) -> (bool, f64) {
    let em = golds.iter().any(|g| exact_match(pred, g));
    let f1 = golds.iter().map(|g| token_f1(pred, g)).fold(0.0, f64::max);
    (em, f1)
}

/// One episode as seen by the aggregate metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub id: String,
    pub em: f64,
    pub f1: f64,
    pub n_steps: usize,
    /// Action codes in order, e.g. `a2 a2 a1`.
    pub actions: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n: usize,
    pub em: f64,
    pub f1: f64,
    /// Share of a1, a2, a3 among all actions taken at all steps.
    pub action_props: [f64; N_ACTIONS],
    pub avg_steps: f64,
}

impl RunMetrics {
    pub fn from_summaries(rows: &[EpisodeSummary]) -> Result<Self> {
        if rows.is_empty() {
            return Err(CfqaError::Input("cannot summarize an empty run".into()));
        }
        let n = rows.len() as f64;
        let mut counts = [0usize; N_ACTIONS];
        for r in rows {
            for code in r.actions.split_whitespace() {
                let i = match code {
                    "a1" => 0,
                    "a2" => 1,
                    "a3" => 2,
                    other => return Err(CfqaError::Input(format!("unknown action code `{other}`"))),
                };
                counts[i] += 1;
            }
        }
        let total = counts.iter().sum::<usize>().max(1) as f64;
        Ok(Self {
            n: rows.len(),
            em: rows.iter().map(|r| r.em).sum::<f64>() / n,
            f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
            action_props: counts.map(|c| c as f64 / total),
            avg_steps: rows.iter().map(|r| r.n_steps as f64).sum::<f64>() / n,
        })
    }
}
