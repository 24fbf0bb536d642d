//! Offline diagnostics over cached traces: pool diversity, bridge proximity,
//! the chain-disambiguation gap, bridge-text substitution and B→C flips.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{ChatModel, Embedder};
use crate::corpus::{cosine, Corpus, QueryRecord, Subtype};
use crate::error::{Error, Result};
use crate::eval::{recall_at_k, summarize};
use crate::fusion::TOP_K;
use crate::judge::{JudgeCondition, SubstituteSource};
use crate::runner::rejudge_trace;
use crate::stats::spearman;
use crate::trace::RetrievalTrace;

/// Mean of `1 - cos` over unordered pairs.
pub fn pool_diversity(vectors: &[&[f64]]) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument("diversity needs at least two vectors".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            total += 1.0 - cosine(vectors[i], vectors[j])?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

pub fn bridge_info(bridge: &[f64], g2: &[f64]) -> Result<f64> {
    cosine(bridge, g2)
}

/// How the second-hop gold was picked for a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum G2Rule {
    /// The bridge is gold; g2 is the other one.
    NonBridgeGold,
    /// The bridge missed; g2 is the gold less similar to the question.
    HarderGold,
}

/// Picks g2 for a two-gold query, or `None` when the gold set is not a pair.
pub fn identify_g2(
    query: &QueryRecord,
    bridge_id: &str,
    question_vec: &[f64],
    corpus: &Corpus,
) -> Result<Option<(String, G2Rule)>> {
    let gold = query.gold_set();
    if gold.len() != 2 {
        return Ok(None);
    }
    if gold.contains(bridge_id) {
        let other = gold.into_iter().find(|g| *g != bridge_id).expect("two golds");
        return Ok(Some((other.to_string(), G2Rule::NonBridgeGold)));
    }
    let mut scored = Vec::with_capacity(2);
    for g in gold {
        scored.push((cosine(question_vec, corpus.embedding(g)?)?, g));
    }
    // gold set iterates in id order, so equal similarities resolve to the lower id
    let (_, g2) = if scored[1].0 < scored[0].0 { scored[1] } else { scored[0] };
    Ok(Some((g2.to_string(), G2Rule::HarderGold)))
}

fn embed_one(embedder: &dyn Embedder, text: &str) -> Result<Vec<f64>> {
    Ok(embedder.embed_texts(&[text.to_string()])?.remove(0))
}

/// `cos(q, c) - cos(q ⊕ b, c)` where `⊕` joins with a newline. An empty
/// bridge leaves the question unchanged.
pub fn chain_gap(embedder: &dyn Embedder, question: &str, bridge_text: &str, candidate: &str) -> Result<f64> {
    let joint = if bridge_text.trim().is_empty() {
        question.to_string()
    } else {
        format!("{question}\n{bridge_text}")
    };
    let vs = embedder.embed_texts(&[question.to_string(), joint, candidate.to_string()])?;
    Ok(cosine(&vs[0], &vs[2])? - cosine(&vs[1], &vs[2])?)
}

fn index_by_id(traces: &[RetrievalTrace]) -> BTreeMap<&str, &RetrievalTrace> {
    traces.iter().map(|t| (t.query_id.as_str(), t)).collect()
}

fn require_ids(queries: &[QueryRecord], traces: &BTreeMap<&str, &RetrievalTrace>) -> Result<()> {
    let missing: Vec<String> = queries
        .iter()
        .filter(|q| !traces.contains_key(q.id.as_str()))
        .map(|q| q.id.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingTraces(missing))
    }
}

fn r5(trace: &RetrievalTrace, query: &QueryRecord) -> Result<f64> {
    recall_at_k(trace.top5(), &query.gold_set(), TOP_K)
}

// ---- pool diversity --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub query_id: String,
    pub diversity: f64,
    pub delta_r5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Spearman correlation of diversity with the B→C delta; `None` when undefined.
    pub rho_with_delta: Option<f64>,
    pub rows: Vec<DiversityRow>,
}

pub fn diversity_report(
    queries: &[QueryRecord],
    traces_b: &[RetrievalTrace],
    traces_c: &[RetrievalTrace],
    corpus: &Corpus,
) -> Result<DiversityReport> {
    let (bs, cs) = (index_by_id(traces_b), index_by_id(traces_c));
    require_ids(queries, &bs)?;
    require_ids(queries, &cs)?;
    let mut rows = Vec::new();
    for q in queries {
        let c = cs[q.id.as_str()];
        let Some(pool) = &c.pool else { continue };
        let vectors = pool.ids().map(|id| corpus.embedding(id)).collect::<Result<Vec<_>>>()?;
        if vectors.len() < 2 {
            continue;
        }
        rows.push(DiversityRow {
            query_id: q.id.clone(),
            diversity: pool_diversity(&vectors)?,
            delta_r5: r5(c, q)? - r5(bs[q.id.as_str()], q)?,
        });
    }
    let values: Vec<f64> = rows.iter().map(|r| r.diversity).collect();
    let deltas: Vec<f64> = rows.iter().map(|r| r.delta_r5).collect();
    let n = values.len();
    Ok(DiversityReport {
        n,
        mean: if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 },
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        rho_with_delta: spearman(&values, &deltas).ok(),
        rows,
    })
}

// ---- bridge proximity ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityRow {
    pub query_id: String,
    pub g2: String,
    pub rule: G2Rule,
    pub bridge_info: f64,
    pub delta_r5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProximityReport {
    pub n: usize,
    /// Queries without exactly two golds or without a bridge.
    pub skipped: usize,
    pub rho_with_delta: Option<f64>,
    pub rows: Vec<ProximityRow>,
}

pub fn proximity_report(
    queries: &[QueryRecord],
    traces_b: &[RetrievalTrace],
    traces_c: &[RetrievalTrace],
    corpus: &Corpus,
    embedder: &dyn Embedder,
) -> Result<ProximityReport> {
    let (bs, cs) = (index_by_id(traces_b), index_by_id(traces_c));
    require_ids(queries, &bs)?;
    require_ids(queries, &cs)?;
    let mut rows = Vec::new();
    let mut skipped = 0;
    for q in queries {
        let c = cs[q.id.as_str()];
        let Some(bridge) = &c.bridge else {
            skipped += 1;
            continue;
        };
        let qv = embed_one(embedder, &q.question)?;
        let Some((g2, rule)) = identify_g2(q, &bridge.passage_id, &qv, corpus)? else {
            skipped += 1;
            continue;
        };
        rows.push(ProximityRow {
            query_id: q.id.clone(),
            bridge_info: bridge_info(corpus.embedding(&bridge.passage_id)?, corpus.embedding(&g2)?)?,
            g2,
            rule,
            delta_r5: r5(c, q)? - r5(bs[q.id.as_str()], q)?,
        });
    }
    let info: Vec<f64> = rows.iter().map(|r| r.bridge_info).collect();
    let deltas: Vec<f64> = rows.iter().map(|r| r.delta_r5).collect();
    Ok(ProximityReport {
        n: rows.len(),
        skipped,
        rho_with_delta: spearman(&info, &deltas).ok(),
        rows,
    })
}

// ---- chain-disambiguation gap ----------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub query_id: String,
    pub g2: String,
    pub gap: f64,
}

/// Chain gap of each query's g2 given its traced bridge.
pub fn gap_report(
    queries: &[QueryRecord],
    traces: &[RetrievalTrace],
    corpus: &Corpus,
    embedder: &dyn Embedder,
) -> Result<Vec<GapRow>> {
    let ts = index_by_id(traces);
    require_ids(queries, &ts)?;
    let mut rows = Vec::new();
    for q in queries {
        let Some(bridge) = &ts[q.id.as_str()].bridge else { continue };
        let qv = embed_one(embedder, &q.question)?;
        let Some((g2, _)) = identify_g2(q, &bridge.passage_id, &qv, corpus)? else { continue };
        let text = |id: &str| corpus.get(id).map(|p| p.content()).unwrap_or_default();
        rows.push(GapRow {
            query_id: q.id.clone(),
            gap: chain_gap(embedder, &q.question, &text(&bridge.passage_id), &text(&g2))?,
            g2,
        });
    }
    Ok(rows)
}

// ---- bridge substitution ---------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionRow {
    pub condition: String,
    pub subtype: Subtype,
    pub n: usize,
    pub mean_r_at_5: f64,
}

/// Re-judges condition-C traces with the bridge slot filled from `variant`.
/// Pools, entities, SVO queries and alpha are carried over unchanged.
pub fn run_bridge_substitution(
    chat: &dyn ChatModel,
    corpus: &Corpus,
    queries: &[QueryRecord],
    traces_c: &[RetrievalTrace],
    variant: SubstituteSource,
    budget: usize,
    default_alpha: f64,
) -> Result<Vec<RetrievalTrace>> {
    let cs = index_by_id(traces_c);
    require_ids(queries, &cs)?;
    let condition = JudgeCondition::BridgeSubstitute(variant);
    Ok(queries
        .iter()
        .map(|q| rejudge_trace(chat, corpus, cs[q.id.as_str()], condition, budget, default_alpha, Some(q)))
        .collect())
}

/// One row per (condition, subtype) plus an `all` row per condition.
pub fn substitution_table(queries: &[QueryRecord], runs: &[(String, Vec<RetrievalTrace>)]) -> Result<Vec<SubstitutionRow>> {
    let mut rows = Vec::new();
    for (label, traces) in runs {
        let results = crate::eval::score_traces(queries, traces, TOP_K)?;
        let report = summarize(label, &results);
        for s in &report.subtypes {
            rows.push(SubstitutionRow {
                condition: label.clone(),
                subtype: s.subtype,
                n: s.n,
                mean_r_at_5: s.mean_r_at_5,
            });
        }
    }
    Ok(rows)
}

// ---- flip analysis ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub query_id: String,
    pub subtype: Subtype,
    pub top1_b: Option<String>,
    pub top1_c: Option<String>,
    pub flipped: bool,
    pub delta_r5: f64,
    pub productive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRow {
    /// Subtype label, or `all`.
    pub group: String,
    pub n: usize,
    pub flips: usize,
    pub productive: usize,
    pub flip_rate: f64,
    /// Productive flips over flips; 0 without flips.
    pub flip_win_pct: f64,
    /// Mean delta among flipped queries minus mean delta among the rest.
    pub delta_vs_no_flip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub records: Vec<FlipRecord>,
    pub rows: Vec<FlipRow>,
}

fn flip_row(group: String, records: &[&FlipRecord]) -> FlipRow {
    let n = records.len();
    let flips = records.iter().filter(|r| r.flipped).count();
    let productive = records.iter().filter(|r| r.productive).count();
    let mean_of = |flipped: bool| {
        let ds: Vec<f64> = records.iter().filter(|r| r.flipped == flipped).map(|r| r.delta_r5).collect();
        (!ds.is_empty()).then(|| ds.iter().sum::<f64>() / ds.len() as f64)
    };
    FlipRow {
        group,
        n,
        flips,
        productive,
        flip_rate: if n == 0 { 0.0 } else { flips as f64 / n as f64 },
        flip_win_pct: if flips == 0 { 0.0 } else { productive as f64 / flips as f64 },
        delta_vs_no_flip: mean_of(true).zip(mean_of(false)).map(|(f, nf)| f - nf),
    }
}

/// Compares fused top-1 between matched B and C traces.
pub fn flip_analysis(queries: &[QueryRecord], traces_b: &[RetrievalTrace], traces_c: &[RetrievalTrace]) -> Result<FlipReport> {
    let (bs, cs) = (index_by_id(traces_b), index_by_id(traces_c));
    let left_only: Vec<String> = bs.keys().filter(|k| !cs.contains_key(*k)).map(|k| k.to_string()).collect();
    let right_only: Vec<String> = cs.keys().filter(|k| !bs.contains_key(*k)).map(|k| k.to_string()).collect();
    if !left_only.is_empty() || !right_only.is_empty() {
        return Err(Error::IdMismatch { left_only, right_only });
    }
    require_ids(queries, &bs)?;
    let mut records = Vec::with_capacity(queries.len());
    for q in queries {
        let (b, c) = (bs[q.id.as_str()], cs[q.id.as_str()]);
        let top1_b = b.top5().first().cloned();
        let top1_c = c.top5().first().cloned();
        let flipped = top1_b != top1_c;
        let delta_r5 = r5(c, q)? - r5(b, q)?;
        records.push(FlipRecord {
            query_id: q.id.clone(),
            subtype: q.subtype,
            top1_b,
            top1_c,
            flipped,
            delta_r5,
            productive: flipped && delta_r5 > 0.0,
        });
    }
    let mut groups: BTreeMap<Subtype, Vec<&FlipRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry(r.subtype).or_default().push(r);
    }
    let mut rows: Vec<FlipRow> = groups
        .into_iter()
        .map(|(s, rs)| flip_row(s.as_str().to_string(), &rs))
        .collect();
    rows.push(flip_row("all".into(), &records.iter().collect::<Vec<_>>()));
    Ok(FlipReport { records, rows })
}
