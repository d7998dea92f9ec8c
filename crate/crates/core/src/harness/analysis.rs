//! Evaluation, ensembling, cue importance and interaction pruning.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::MessageEdge;
use crate::error::{FgaError, Result};
use crate::harness::{metrics, ndcg, rank_of, DialogRecord, EvalReport};
use crate::model::Model;

/// Anything producing eval-mode candidate probabilities.
pub trait Predictor: Sync {
    fn predict_probs(&self, records: &[DialogRecord]) -> Result<Vec<Vec<f64>>>;
}

impl Predictor for Model {
    fn predict_probs(&self, records: &[DialogRecord]) -> Result<Vec<Vec<f64>>> {
        Model::predict_probs(self, records)
    }
}

/// Models that differ only by their initialization seed.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub models: Vec<Model>,
}

impl Ensemble {
    pub fn new(models: Vec<Model>) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| FgaError::InvalidArgument("an ensemble needs at least one model".into()))?;
        let arch = first.config.architecture_hash();
        for m in &models[1..] {
            if m.config.architecture_hash() != arch || m.vocab != first.vocab || m.pruned != first.pruned {
                return Err(FgaError::Config("ensemble members must share configuration and vocabulary".into()));
            }
        }
        Ok(Ensemble { models })
    }
}

/// Arithmetic mean, computed as `p_1 + Σ_k (p_k - p_1) / K` so identical members
/// reproduce `p_1` exactly.
pub fn mean_probs(members: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = members
        .first()
        .ok_or_else(|| FgaError::InvalidArgument("nothing to average".into()))?;
    if members.iter().any(|m| m.len() != first.len()) {
        return Err(FgaError::shape("mean_probs", "members disagree on the candidate count"));
    }
    let k = members.len() as f64;
    Ok((0..first.len())
        .map(|u| {
            let delta: f64 = members[1..].iter().map(|m| m[u] - first[u]).sum();
            first[u] + delta / k
        })
        .collect())
}

impl Predictor for Ensemble {
    fn predict_probs(&self, records: &[DialogRecord]) -> Result<Vec<Vec<f64>>> {
        let per_model = self
            .models
            .iter()
            .map(|m| m.predict_probs(records))
            .collect::<Result<Vec<_>>>()?;
        (0..records.len())
            .map(|r| {
                let members: Vec<Vec<f64>> = per_model.iter().map(|p| p[r].clone()).collect();
                mean_probs(&members)
            })
            .collect()
    }
}

/// Mean of per-model probabilities for one record.
pub fn ensemble_predict(models: &[Model], record: &DialogRecord) -> Result<Vec<f64>> {
    let ensemble = Ensemble::new(models.to_vec())?;
    Ok(ensemble.predict_probs(std::slice::from_ref(record))?.remove(0))
}

/// Worker threads for evaluation: available cores, capped by `FGA_NUM_WORKERS`.
pub fn worker_count() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("FGA_NUM_WORKERS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cores.min(cap),
        _ => cores,
    }
}

/// Probabilities for every record, split across `workers` threads.
/// Results do not depend on the worker count.
pub fn predict_parallel<P: Predictor>(model: &P, records: &[DialogRecord], workers: usize) -> Result<Vec<Vec<f64>>> {
    let workers = workers.max(1).min(records.len().max(1));
    if workers == 1 {
        return model.predict_probs(records);
    }
    let chunk = records.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|c| s.spawn(move || model.predict_probs(c)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(records.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Ranks every record; metrics are reduced in record-id order.
pub fn evaluate<P: Predictor>(model: &P, records: &[DialogRecord], with_ndcg: bool, workers: usize) -> Result<EvalReport> {
    if with_ndcg {
        if let Some(r) = records.iter().find(|r| r.dense_relevance.is_none()) {
            return Err(FgaError::schema(&r.record_id, "dense_relevance", "required for NDCG"));
        }
    }
    let probs = predict_parallel(model, records, workers)?;
    let mut rows: Vec<(&str, usize, Option<f64>)> = Vec::with_capacity(records.len());
    for (r, p) in records.iter().zip(&probs) {
        let nd = match (&r.dense_relevance, with_ndcg) {
            (Some(rel), true) => Some(ndcg(p, rel)?),
            _ => None,
        };
        rows.push((&r.record_id, rank_of(p, r.gt_index)?, nd));
    }
    rows.sort_by(|a, b| a.0.cmp(b.0));
    let ranks: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let mut report = metrics(&ranks)?;
    report.record_ids = rows.iter().map(|r| r.0.to_string()).collect();
    if with_ndcg {
        report.ndcg = Some(rows.iter().map(|r| r.2.unwrap_or(0.0)).sum::<f64>() / rows.len() as f64);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CueScore {
    /// `prior`, `local`, or the source utility of a message.
    pub cue: String,
    pub weight: f64,
    pub mean_term: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub utility: String,
    pub cues: Vec<CueScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    /// Whether mean terms were taken over absolute values.
    pub absolute: bool,
    pub rows: Vec<ImportanceRow>,
}

pub const PRIOR_CUE: &str = "prior";
pub const LOCAL_CUE: &str = "local";

impl ImportanceTable {
    pub fn row(&self, utility: &str) -> Option<&ImportanceRow> {
        self.rows.iter().find(|r| r.utility == utility)
    }

    pub fn score(&self, utility: &str, cue: &str) -> Option<f64> {
        self.row(utility)?.cues.iter().find(|c| c.cue == cue).map(|c| c.score)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["utility", "cue", "weight", "mean_term", "score"])?;
        for row in &self.rows {
            for c in &row.cues {
                w.write_record([
                    row.utility.clone(),
                    c.cue.clone(),
                    c.weight.to_string(),
                    c.mean_term.to_string(),
                    c.score.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| FgaError::io(format!("writing {}", path.display()), e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| FgaError::io(format!("creating {}", path.display()), e))?;
        let text = serde_json::to_string_pretty(self).expect("table serializes");
        writeln!(f, "{text}").map_err(|e| FgaError::io(format!("writing {}", path.display()), e))
    }
}

/// `S(γ) = |m_γ γ| / Σ_δ |m_δ δ|` per target utility, where `m_γ` is the mean
/// raw term of cue `γ` over all records and entities. A row whose cues all
/// vanish gets equal scores.
pub fn importance_scores(model: &Model, records: &[DialogRecord], absolute: bool) -> Result<ImportanceTable> {
    if records.is_empty() {
        return Err(FgaError::InvalidArgument("importance needs validation records".into()));
    }
    let mut outputs = model.predict(records)?;
    outputs.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    let graph = &model.graph;
    let fold = |acc: f64, v: &f64| acc + if absolute { v.abs() } else { *v };
    let mut rows = Vec::with_capacity(graph.len());
    for (i, spec) in graph.utilities.iter().enumerate() {
        let local = model.fga.local(graph, i)?;
        let mut cues: Vec<(String, f64, f64)> = vec![
            (PRIOR_CUE.into(), model.store.value(local.prior_weight).data()[0], 0.0),
            (LOCAL_CUE.into(), model.store.value(local.local_weight).data()[0], 0.0),
        ];
        let sources: Vec<usize> = (0..graph.len()).filter(|&j| graph.message_enabled(i, j)).collect();
        for &j in &sources {
            let w = model.store.value(model.fga.message(graph, i, j)?.weight).data()[0];
            cues.push((graph.utilities[j].name.clone(), w, 0.0));
        }
        for out in &outputs {
            let att = &out.attention;
            cues[0].2 = att.prior_terms[i].iter().fold(cues[0].2, fold);
            cues[1].2 = att.local_terms[i].iter().fold(cues[1].2, fold);
            for (k, (_, term)) in att.message_terms[i].iter().enumerate() {
                cues[2 + k].2 = term.iter().fold(cues[2 + k].2, fold);
            }
        }
        let count = (outputs.len() * spec.entities) as f64;
        let magnitudes: Vec<f64> = cues.iter().map(|c| (c.2 / count * c.1).abs()).collect();
        let total: f64 = magnitudes.iter().sum();
        let k = cues.len() as f64;
        rows.push(ImportanceRow {
            utility: spec.name.clone(),
            cues: cues
                .into_iter()
                .zip(&magnitudes)
                .map(|((cue, weight, sum), &m)| CueScore {
                    cue,
                    weight,
                    mean_term: sum / count,
                    score: if total > 0.0 { m / total } else { 1.0 / k },
                })
                .collect(),
        });
    }
    Ok(ImportanceTable { absolute, rows })
}

/// Disables every message whose importance is below `threshold`, keeping
/// anything already pruned.
pub fn prune_interactions(model: &Model, table: &ImportanceTable, threshold: f64) -> Result<Model> {
    let mut pruned: BTreeSet<MessageEdge> = model.pruned.clone();
    for row in &table.rows {
        for c in &row.cues {
            if c.cue != PRIOR_CUE && c.cue != LOCAL_CUE && c.score < threshold {
                pruned.insert(MessageEdge {
                    target: row.utility.clone(),
                    source: c.cue.clone(),
                });
            }
        }
    }
    let mut out = model.clone();
    out.set_pruned(pruned)?;
    Ok(out)
}
