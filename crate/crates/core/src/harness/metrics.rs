//! Retrieval metrics over ranked candidate lists.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FgaError, Result};

/// 1-based rank of `gt` when sorting by descending probability, ties broken
/// by candidate index (lower index first).
pub fn rank_of(probs: &[f64], gt: usize) -> Result<usize> {
    let p = *probs
        .get(gt)
        .ok_or_else(|| FgaError::InvalidArgument(format!("ground truth {gt} out of range for {} candidates", probs.len())))?;
    let ahead = probs
        .iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < gt))
        .count();
    Ok(1 + ahead)
}

/// Candidate indices by descending probability, ties by index.
pub fn ranking(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: f64,
    /// Percentages.
    #[serde(rename = "r@1")]
    pub r1: f64,
    #[serde(rename = "r@5")]
    pub r5: f64,
    #[serde(rename = "r@10")]
    pub r10: f64,
    pub mean_rank: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
    pub record_ids: Vec<String>,
    pub ranks: Vec<usize>,
}

impl EvalReport {
    /// Summary rows `(metric, value)`.
    pub fn summary(&self) -> Vec<(&'static str, f64)> {
        let mut rows = vec![
            ("mrr", self.mrr),
            ("r@1", self.r1),
            ("r@5", self.r5),
            ("r@10", self.r10),
            ("mean_rank", self.mean_rank),
        ];
        if let Some(n) = self.ndcg {
            rows.push(("ndcg", n));
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "value"])?;
        for (k, v) in self.summary() {
            w.write_record([k.to_string(), v.to_string()])?;
        }
        w.write_record(["record_id", "rank"])?;
        for (id, r) in self.record_ids.iter().zip(&self.ranks) {
            w.write_record([id.clone(), r.to_string()])?;
        }
        w.flush().map_err(|e| FgaError::io(format!("writing {}", path.display()), e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| FgaError::io(format!("creating {}", path.display()), e))?;
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        writeln!(f, "{text}").map_err(|e| FgaError::io(format!("writing {}", path.display()), e))
    }
}

/// MRR, R@{1,5,10} (percent) and mean rank. Ranks are reduced in the given order.
pub fn metrics(ranks: &[usize]) -> Result<EvalReport> {
    if ranks.is_empty() {
        return Err(FgaError::InvalidArgument("no ranks to summarize".into()));
    }
    if ranks.contains(&0) {
        return Err(FgaError::InvalidArgument("ranks are 1-based".into()));
    }
    let n = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(EvalReport {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
        mean_rank: ranks.iter().map(|&r| r as f64).sum::<f64>() / n,
        ndcg: None,
        record_ids: Vec::new(),
        ranks: ranks.to_vec(),
    })
}

/// Normalized discounted cumulative gain of the model's ordering, with gain
/// `relevance` and discount `1 / log2(position + 1)`. Zero when nothing is relevant.
pub fn ndcg(probs: &[f64], relevance: &[f64]) -> Result<f64> {
    if probs.len() != relevance.len() {
        return Err(FgaError::InvalidArgument("one relevance value per candidate is required".into()));
    }
    let dcg = |gains: &mut dyn Iterator<Item = f64>| -> f64 {
        gains.enumerate().map(|(pos, g)| g / ((pos + 2) as f64).log2()).sum()
    };
    let mut ideal = relevance.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg(&mut ideal.into_iter());
    if best == 0.0 {
        return Ok(0.0);
    }
    let got = dcg(&mut ranking(probs).into_iter().map(|i| relevance[i]));
    Ok(got / best)
}
