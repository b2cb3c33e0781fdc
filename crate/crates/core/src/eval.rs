//! Retrieval index, ranking and mAP@K / R@K evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{metadata_to_text, Item, MetadataKind};
use crate::error::{Error, Result};
use crate::model::{FusionMode, HybridModel, ItemRepr};
use crate::text::{tokenize, CLS};
use crate::text::TokenSequence;

/// Frozen per-item representations in insertion order.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    entries: Vec<ItemRepr>,
    mode: FusionMode,
    metadata: MetadataKind,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn entries(&self) -> &[ItemRepr] {
        &self.entries
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn metadata_kind(&self) -> MetadataKind {
        self.metadata
    }
}

/// Embeds every item with `model`, reading metadata as `kind`.
pub fn build_index(items: &[&Item], model: &HybridModel, kind: MetadataKind) -> Result<RetrievalIndex> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mode = model.mode();
    let mut ids = Vec::with_capacity(items.len());
    let mut positions = HashMap::with_capacity(items.len());
    let mut entries = Vec::with_capacity(items.len());
    for item in items {
        if positions.insert(item.id.clone(), ids.len()).is_some() {
            return Err(Error::DatasetConsistency(format!("duplicate id `{}` in index", item.id)));
        }
        let meta = if mode.uses_metadata() {
            tokenize(&metadata_to_text(item, kind)?, &model.vocab)
        } else {
            TokenSequence::new(vec![CLS])?
        };
        let frames = mode.uses_audio().then_some(&item.frames);
        let repr = model
            .item_representation(frames, &meta)
            .map_err(|e| match e {
                Error::Ingest(m) => Error::Ingest(format!("item `{}`: {m}", item.id)),
                other => other,
            })?;
        ids.push(item.id.clone());
        entries.push(repr);
    }
    Ok(RetrievalIndex {
        ids,
        positions,
        entries,
        mode,
        metadata: kind,
    })
}

/// Score of `query` against every indexed item, in index order.
pub fn score_all(index: &RetrievalIndex, model: &HybridModel, query: &str) -> Result<Vec<f64>> {
    if model.mode() != index.mode {
        return Err(Error::Config(format!(
            "index was built for mode {}, model is {}",
            index.mode,
            model.mode()
        )));
    }
    let q = model.query_representation(&model.tokenize(query))?;
    index.entries.iter().map(|e| model.score(&q, e)).collect()
}

/// Positions sorted by descending score; equal scores keep insertion order.
pub fn ranked_positions(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// 1-based rank of `target` under [`ranked_positions`] order.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub id: String,
    pub score: f64,
}

/// The top `k` items for a raw query string.
pub fn rank_items(index: &RetrievalIndex, query: &str, model: &HybridModel, k: usize) -> Result<Vec<RankedItem>> {
    if k == 0 {
        return Err(Error::Config("k: must be at least 1".into()));
    }
    let scores = score_all(index, model, query)?;
    Ok(ranked_positions(&scores)
        .into_iter()
        .take(k)
        .map(|i| RankedItem {
            id: index.ids[i].clone(),
            score: scores[i],
        })
        .collect())
}

pub fn average_precision_at_k(rank: usize, k: usize) -> Result<f64> {
    if rank == 0 {
        return Err(Error::IndexConvention);
    }
    Ok(if rank <= k { 1.0 / rank as f64 } else { 0.0 })
}

pub fn map_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut sum = 0.0;
    for &r in ranks {
        sum += average_precision_at_k(r, k)?;
    }
    Ok(sum / ranks.len() as f64)
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if ranks.contains(&0) {
        return Err(Error::IndexConvention);
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Retrieval metrics of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize], k: usize) -> Result<Self> {
        Ok(Self {
            map: map_at_k(ranks, k)?,
            r1: recall_at_k(ranks, 1)?,
            r5: recall_at_k(ranks, 5)?,
            r10: recall_at_k(ranks, 10)?,
        })
    }

    pub fn mean(runs: &[Metrics]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        let n = runs.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            map: avg(|m| m.map),
            r1: avg(|m| m.r1),
            r5: avg(|m| m.r5),
            r10: avg(|m| m.r10),
        })
    }
}

/// A query paired with the id of its single matching item.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub text: String,
    pub target: String,
}

/// Every evaluation query of `items`: each caption except, under FS, the
/// caption held out as metadata.
pub fn queries_for(items: &[&Item], kind: MetadataKind) -> Vec<Query> {
    items
        .iter()
        .flat_map(|item| {
            item.query_captions(kind).iter().map(|c| Query {
                text: c.clone(),
                target: item.id.clone(),
            })
        })
        .collect()
}

/// 1-based rank of each query's target over the whole index.
pub fn query_ranks(index: &RetrievalIndex, model: &HybridModel, queries: &[Query]) -> Result<Vec<usize>> {
    queries
        .iter()
        .map(|q| {
            let target = index
                .position(&q.target)
                .ok_or_else(|| Error::DatasetConsistency(format!("query targets unknown id `{}`", q.target)))?;
            Ok(rank_of(&score_all(index, model, &q.text)?, target))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub metrics: Metrics,
    pub n_queries: usize,
    pub n_items: usize,
}

/// Indexes `items` and ranks all of their queries.
pub fn evaluate_items(model: &HybridModel, items: &[&Item], kind: MetadataKind, k: usize) -> Result<RunResult> {
    let index = build_index(items, model, kind)?;
    let queries = queries_for(items, kind);
    let ranks = query_ranks(&index, model, &queries)?;
    Ok(RunResult {
        metrics: Metrics::from_ranks(&ranks, k)?,
        n_queries: queries.len(),
        n_items: items.len(),
    })
}

/// One row of a report: a configuration evaluated over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub mode: FusionMode,
    pub metadata: MetadataKind,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Metrics>,
    pub mean: Metrics,
    /// `mean.map` minus the first row's `mean.map`.
    pub delta_map: f64,
    pub n_queries: usize,
    pub n_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone)]
pub struct RowInput {
    pub label: String,
    pub mode: FusionMode,
    pub metadata: MetadataKind,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunResult>,
}

impl EvalReport {
    /// Builds rows from per-seed runs; deltas are taken against the first row.
    pub fn new(k: usize, inputs: Vec<RowInput>) -> Result<Self> {
        let mut rows: Vec<ReportRow> = Vec::with_capacity(inputs.len());
        for input in inputs {
            let per_seed: Vec<Metrics> = input.runs.iter().map(|r| r.metrics).collect();
            let mean = Metrics::mean(&per_seed)?;
            let first = input.runs[0];
            rows.push(ReportRow {
                label: input.label,
                mode: input.mode,
                metadata: input.metadata,
                seeds: input.seeds,
                per_seed,
                mean,
                delta_map: 0.0,
                n_queries: first.n_queries,
                n_items: first.n_items,
            });
        }
        if let Some(base) = rows.first().map(|r| r.mean.map) {
            for r in &mut rows {
                r.delta_map = r.mean.map - base;
            }
        }
        Ok(Self { k, rows })
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// One JSON record per row.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for row in &self.rows {
            let mut v = serde_json::to_value(row)?;
            v["k"] = self.k.into();
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut k = None;
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            k = v["k"].as_u64().map(|k| k as usize).or(k);
            rows.push(serde_json::from_value(v)?);
        }
        let k = k.ok_or(Error::EmptyEvaluation)?;
        Ok(Self { k, rows })
    }

    /// Fixed-width table in percentage points.
    pub fn to_table(&self) -> String {
        let k = self.k;
        let label_w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<label_w$}  {:>8}  {:>10}  {:>7}  {:>7}  {:>7}",
            "model",
            format!("map@{k}"),
            format!("Δmap@{k}"),
            "R@1",
            "R@5",
            "R@10"
        );
        for r in &self.rows {
            let m = r.mean;
            let _ = writeln!(
                out,
                "{:<label_w$}  {:>8.2}  {:>+10.2}  {:>7.2}  {:>7.2}  {:>7.2}",
                r.label,
                100.0 * m.map,
                100.0 * r.delta_map,
                100.0 * m.r1,
                100.0 * m.r5,
                100.0 * m.r10
            );
        }
        out
    }
}
