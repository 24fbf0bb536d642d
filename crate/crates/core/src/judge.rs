//! Batched LLM judge over the candidate pool, under the ablation conditions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backend::{BackendError, ChatModel, ChatRequest};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::pipeline::{json_span, CandidatePool, EntityPair, SvoQueries};
use crate::prompts::{self, JudgeContext};

/// What fills the bridge slot when the real bridge is swapped out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubstituteSource {
    /// The SVO queries joined by newlines ("G").
    SvoText,
    /// The pool passage with the lowest SVO score ("A5").
    LowestSvoPool,
    /// The real bridge passage itself ("A1"); must reproduce condition C.
    BridgePassage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JudgeCondition {
    /// "A": no judge, rank by SVO score.
    SvoOnly,
    /// "B": judge sees query and candidates.
    TwoWay,
    /// "C": judge also sees both entities and the bridge passage.
    Tripartite,
    BridgeSubstitute(SubstituteSource),
}

impl JudgeCondition {
    pub const ALL: [JudgeCondition; 6] = [
        JudgeCondition::SvoOnly,
        JudgeCondition::TwoWay,
        JudgeCondition::Tripartite,
        JudgeCondition::BridgeSubstitute(SubstituteSource::BridgePassage),
        JudgeCondition::BridgeSubstitute(SubstituteSource::SvoText),
        JudgeCondition::BridgeSubstitute(SubstituteSource::LowestSvoPool),
    ];

    pub fn tag(self) -> &'static str {
        match self {
            JudgeCondition::SvoOnly => "A",
            JudgeCondition::TwoWay => "B",
            JudgeCondition::Tripartite => "C",
            JudgeCondition::BridgeSubstitute(SubstituteSource::BridgePassage) => "A1",
            JudgeCondition::BridgeSubstitute(SubstituteSource::SvoText) => "G",
            JudgeCondition::BridgeSubstitute(SubstituteSource::LowestSvoPool) => "A5",
        }
    }

    pub fn uses_judge(self) -> bool {
        self != JudgeCondition::SvoOnly
    }
}

impl fmt::Display for JudgeCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for JudgeCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.tag().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown condition `{s}` (A, B, C, A1, G, A5)")))
    }
}

impl Serialize for JudgeCondition {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for JudgeCondition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Machine-readable notes left by judge parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JudgeWarning {
    Clamped { passage_id: String, raw: f64 },
    Missing { passage_id: String },
    Duplicate { passage_id: String },
    OutOfRange { index: i64 },
    MalformedItem { position: usize },
    Retried { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub condition: JudgeCondition,
    pub scores: BTreeMap<String, u8>,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<JudgeWarning>,
    /// Pool passage used as the bridge slot under A5/A1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge_slot_passage: Option<String>,
}

/// Everything the judge may look at for one query. The pool, entities and SVO
/// queries are shared across conditions; only the bridge slot changes.
#[derive(Debug, Clone, Copy)]
pub struct JudgeInput<'a> {
    pub question: &'a str,
    pub bridge_id: &'a str,
    pub entities: &'a EntityPair,
    pub svo: &'a SvoQueries,
    pub pool: &'a CandidatePool,
    pub corpus: &'a Corpus,
}

fn passage_text(corpus: &Corpus, id: &str) -> Result<String> {
    corpus
        .get(id)
        .map(|p| p.content())
        .ok_or_else(|| Error::InvalidArgument(format!("passage `{id}` not in corpus")))
}

/// Pool passage with the smallest SVO score; ties go to the lower id.
pub fn lowest_svo_passage(pool: &CandidatePool) -> Result<&str> {
    pool.entries()
        .iter()
        .filter_map(|e| e.svo_score.map(|s| (s, e.passage_id.as_str())))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
        .map(|(_, id)| id)
        .ok_or_else(|| Error::InvalidArgument("no SVO-scored pool member to substitute".into()))
}

/// Bridge-slot text for `condition`, plus the pool passage it came from.
fn bridge_slot(input: &JudgeInput<'_>, condition: JudgeCondition) -> Result<Option<(String, Option<String>)>> {
    Ok(match condition {
        JudgeCondition::SvoOnly | JudgeCondition::TwoWay => None,
        JudgeCondition::Tripartite => Some((passage_text(input.corpus, input.bridge_id)?, None)),
        JudgeCondition::BridgeSubstitute(SubstituteSource::BridgePassage) => Some((
            passage_text(input.corpus, input.bridge_id)?,
            Some(input.bridge_id.to_string()),
        )),
        JudgeCondition::BridgeSubstitute(SubstituteSource::SvoText) => Some((input.svo.joined(), None)),
        JudgeCondition::BridgeSubstitute(SubstituteSource::LowestSvoPool) => {
            let id = lowest_svo_passage(input.pool)?;
            Some((passage_text(input.corpus, id)?, Some(id.to_string())))
        }
    })
}

/// One batched prompt over the whole pool. Errors on an empty pool, on
/// condition A, and when the prompt is over `budget` input tokens.
pub fn build_judge_prompt(input: &JudgeInput<'_>, condition: JudgeCondition, budget: usize) -> Result<ChatRequest> {
    Ok(build(input, condition, budget)?.0)
}

fn build(input: &JudgeInput<'_>, condition: JudgeCondition, budget: usize) -> Result<(ChatRequest, Option<String>)> {
    if input.pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if !condition.uses_judge() {
        return Err(Error::InvalidArgument("condition A has no judge prompt".into()));
    }
    let candidates = input
        .pool
        .ids()
        .map(|id| passage_text(input.corpus, id))
        .collect::<Result<Vec<_>>>()?;
    let slot = bridge_slot(input, condition)?;
    let context = slot.as_ref().map(|(text, _)| JudgeContext {
        entity1: &input.entities.e1,
        entity2: &input.entities.e2,
        bridge: text,
    });
    let req = prompts::judge_request(input.question, context, &candidates);
    let estimated = req.estimated_input_tokens();
    if estimated > budget {
        return Err(BackendError::Budget {
            estimated,
            limit: budget,
        }
        .into());
    }
    Ok((req, slot.and_then(|(_, id)| id)))
}

/// Decodes a JSON array of `{index, score}` (1-based positions into the pool).
/// Scores are rounded and clamped to 0..=10; absent candidates get 0. Every
/// repair leaves a warning. Fails only if no array can be decoded.
pub fn parse_judge_response(raw: &str, pool: &CandidatePool) -> Result<(BTreeMap<String, u8>, Vec<JudgeWarning>)> {
    let span = json_span(raw, '[', ']').ok_or_else(|| Error::ModelOutput("no JSON array in judge output".into()))?;
    let items: Vec<serde_json::Value> =
        serde_json::from_str(span).map_err(|e| Error::ModelOutput(format!("judge array: {e}")))?;
    let ids: Vec<&str> = pool.ids().collect();
    let mut scores = BTreeMap::new();
    let mut warnings = Vec::new();
    for (position, item) in items.iter().enumerate() {
        let index = item.get("index").and_then(serde_json::Value::as_f64);
        let score = item.get("score").and_then(serde_json::Value::as_f64);
        let (Some(index), Some(score)) = (index, score) else {
            warnings.push(JudgeWarning::MalformedItem { position });
            continue;
        };
        let index = index.round() as i64;
        let Some(&id) = usize::try_from(index - 1).ok().and_then(|i| ids.get(i)) else {
            warnings.push(JudgeWarning::OutOfRange { index });
            continue;
        };
        if scores.contains_key(id) {
            warnings.push(JudgeWarning::Duplicate { passage_id: id.into() });
            continue;
        }
        if !(0.0..=10.0).contains(&score) {
            warnings.push(JudgeWarning::Clamped {
                passage_id: id.into(),
                raw: score,
            });
        }
        scores.insert(id.to_string(), score.round().clamp(0.0, 10.0) as u8);
    }
    for id in ids {
        if !scores.contains_key(id) {
            warnings.push(JudgeWarning::Missing { passage_id: id.into() });
            scores.insert(id.to_string(), 0);
        }
    }
    Ok((scores, warnings))
}

/// Scores the pool with one chat call (two if the first reply is
/// undecodable). Condition A returns `None` without calling the model.
pub fn judge_pool(
    chat: &dyn ChatModel,
    input: &JudgeInput<'_>,
    condition: JudgeCondition,
    budget: usize,
) -> Result<Option<JudgeVerdict>> {
    if !condition.uses_judge() {
        return Ok(None);
    }
    let (req, bridge_slot_passage) = build(input, condition, budget)?;
    let mut retried = None;
    for attempt in 0..2 {
        let raw = chat.chat(&req)?;
        match parse_judge_response(&raw, input.pool) {
            Ok((scores, mut warnings)) => {
                if let Some(reason) = retried {
                    warnings.insert(0, JudgeWarning::Retried { reason });
                }
                return Ok(Some(JudgeVerdict {
                    condition,
                    scores,
                    raw_response: raw,
                    warnings,
                    bridge_slot_passage,
                }));
            }
            Err(e) if attempt == 0 => retried = Some(e.to_string()),
            Err(e) => return Err(e),
        }
    }
    unreachable!("loop returns on the second attempt")
}
