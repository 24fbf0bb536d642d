//! Percentile-rank normalization and convex score fusion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::CandidatePool;

/// Number of passages returned per query.
pub const TOP_K: usize = 5;

/// `PIT(c) = |{c' : s(c') <= s(c)}| / |universe|` over the ids of `scores`.
pub fn pit_rank(scores: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let mut sorted: Vec<f64> = scores.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    scores
        .iter()
        .map(|(id, &s)| {
            let at_or_below = sorted.partition_point(|&x| x <= s);
            (id.clone(), at_or_below as f64 / n)
        })
        .collect()
}

/// SVO score per pool member. Entity-only members take the pool minimum so
/// they land at the bottom of the SVO percentile scale.
pub fn svo_scores_with_floor(pool: &CandidatePool) -> BTreeMap<String, f64> {
    let floor = pool
        .entries()
        .iter()
        .filter_map(|e| e.svo_score)
        .min_by(f64::total_cmp)
        .unwrap_or(0.0);
    pool.entries()
        .iter()
        .map(|e| (e.passage_id.clone(), e.svo_score.unwrap_or(floor)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRanking {
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub pit_judge: BTreeMap<String, f64>,
    pub pit_svo: BTreeMap<String, f64>,
    pub fused: BTreeMap<String, f64>,
    /// Full fused order; `top5` is its prefix.
    pub ranking: Vec<String>,
    pub top5: Vec<String>,
}

/// Ids sorted by score descending, ties by id ascending.
pub fn ranked_ids(scores: &BTreeMap<String, f64>) -> Vec<String> {
    let mut ids: Vec<(&String, f64)> = scores.iter().map(|(k, &v)| (k, v)).collect();
    ids.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ids.into_iter().map(|(k, _)| k.clone()).collect()
}

/// `f(c) = (1 - alpha) * PIT_judge(c) + alpha * PIT_svo(c)` over the ids of
/// `svo`. Without judge scores (condition A) the ranking is `PIT_svo` alone.
pub fn fuse_and_rank(
    judge: Option<&BTreeMap<String, u8>>,
    svo: &BTreeMap<String, f64>,
    alpha: f64,
) -> Result<FusedRanking> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if svo.is_empty() {
        return Err(Error::EmptyPool);
    }
    let pit_svo = pit_rank(svo);
    let (pit_judge, fused) = match judge {
        None => (BTreeMap::new(), pit_svo.clone()),
        Some(judge) => {
            let raw = svo
                .keys()
                .map(|id| {
                    judge
                        .get(id)
                        .map(|&s| (id.clone(), f64::from(s)))
                        .ok_or_else(|| Error::InvalidArgument(format!("no judge score for `{id}`")))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            let pit_judge = pit_rank(&raw);
            let fused = pit_judge
                .iter()
                .map(|(id, &pj)| (id.clone(), (1.0 - alpha) * pj + alpha * pit_svo[id]))
                .collect();
            (pit_judge, fused)
        }
    };
    let ranking = ranked_ids(&fused);
    let top5 = ranking.iter().take(TOP_K).cloned().collect();
    Ok(FusedRanking {
        alpha,
        pit_judge,
        pit_svo,
        fused,
        ranking,
        top5,
    })
}
