//! Offline backends: a hashed bag-of-words embedder and rule/script driven chat.

use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use super::{check_embed_input, BackendError, ChatModel, ChatRequest, Embedder, DEFAULT_INPUT_BUDGET};
use crate::prompts::{
    PromptKind, CANDIDATES_HEADER, ENTITY_BRIDGE_LABEL, FIRST_HOP_LABEL, JUDGE_BRIDGE_LABEL,
    QUERY_LABEL, QUESTION_LABEL,
};
use crate::text::{fnv1a64, normalized_tokens, trim_token};

/// Token-hash bag of words: every token adds 1 to coordinate `fnv(token) % dim`,
/// and the result is L2-normalized. Lexical overlap becomes cosine similarity.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut any = false;
        for tok in normalized_tokens(text) {
            v[self.slot(&tok)] += 1.0;
            any = true;
        }
        if !any {
            // all punctuation: hash the raw text so the vector is never zero
            v[self.slot(text.trim())] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    /// Coordinate a normalized token lands in.
    pub fn slot(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Embedder for HashEmbedder {
    fn identifier(&self) -> String {
        format!("hash-bow-{}", self.dim)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        check_embed_input(texts)?;
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "did", "do", "does", "for", "from", "had",
    "has", "have", "he", "her", "his", "how", "in", "is", "it", "its", "of", "on", "or", "she",
    "that", "the", "their", "them", "they", "this", "to", "was", "were", "what", "when", "where",
    "which", "who", "whom", "whose", "why", "with",
];

fn is_stopword(lower: &str) -> bool {
    STOPWORDS.contains(&lower)
}

/// Capitalized non-stopword tokens, in first-occurrence order.
pub(crate) fn capitalized(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for raw in text.split_whitespace() {
        let tok = trim_token(raw);
        let starts_upper = tok.chars().next().is_some_and(char::is_uppercase);
        if starts_upper && !is_stopword(&tok.to_lowercase()) && !out.iter().any(|t| t == tok) {
            out.push(tok.to_string());
        }
    }
    out
}

/// Lowercased non-stopword tokens that are not capitalized names, in order.
fn ordered_content_words(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for raw in text.split_whitespace() {
        let tok = trim_token(raw);
        if tok.is_empty() || tok.chars().next().is_some_and(char::is_uppercase) {
            continue;
        }
        let lower = tok.to_lowercase();
        if !is_stopword(&lower) && !out.contains(&lower) {
            out.push(lower);
        }
    }
    out
}

pub(crate) fn content_words(text: &str) -> BTreeSet<String> {
    ordered_content_words(text).into_iter().collect()
}

/// Bridge entities ordered for extraction: names the question does not
/// already mention first, then the rest.
fn bridge_entities(question: &str, bridge: &str) -> Vec<String> {
    let q = capitalized(question);
    let b = capitalized(bridge);
    let (fresh, seen): (Vec<_>, Vec<_>) = b.into_iter().partition(|e| !q.contains(e));
    fresh.into_iter().chain(seen).collect()
}

/// Judge rule used by [`RuleChat`].
///
/// * 10 when the candidate names an entity the bridge introduces (a
///   capitalized bridge token absent from the question),
/// * otherwise 7 plus content-word overlap (capped at 9) when it names an
///   entity from the question,
/// * otherwise the content-word overlap with the question, capped at 6.
pub fn rule_judge_score(question: &str, bridge: Option<&str>, candidate: &str) -> u8 {
    let q_caps = capitalized(question);
    let linked: Vec<String> = bridge
        .map(|b| {
            capitalized(b)
                .into_iter()
                .filter(|e| !q_caps.contains(e))
                .collect()
        })
        .unwrap_or_default();
    let c_caps = capitalized(candidate);
    if c_caps.iter().any(|e| linked.contains(e)) {
        return 10;
    }
    let overlap = content_words(candidate)
        .intersection(&content_words(question))
        .count();
    if c_caps.iter().any(|e| q_caps.contains(e)) {
        (7 + overlap).min(9) as u8
    } else {
        overlap.min(6) as u8
    }
}

fn line_after<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(label))
}

fn block_between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    let to = rest.find(end).unwrap_or(rest.len());
    Some(&rest[..to])
}

/// Deterministic chat backend that answers each prompt kind with a fixed rule.
///
/// * `svo`: `"<bridge entity> <question word>"` for the first N question content words,
/// * `entities`: the first two bridge entities (fresh names first), repeated if only one,
/// * `judge`: [`rule_judge_score`] for every numbered candidate.
#[derive(Debug, Clone)]
pub struct RuleChat {
    budget: usize,
}

impl Default for RuleChat {
    fn default() -> Self {
        Self {
            budget: DEFAULT_INPUT_BUDGET,
        }
    }
}

impl RuleChat {
    pub fn with_budget(budget: usize) -> Self {
        Self { budget }
    }

    fn svo(user: &str) -> Result<String, BackendError> {
        let question = line_after(user, QUESTION_LABEL).unwrap_or_default();
        let bridge = line_after(user, FIRST_HOP_LABEL).unwrap_or_default();
        let n = user
            .split("Write ")
            .nth(1)
            .and_then(|s| s.split_whitespace().next())
            .and_then(|s| s.parse::<usize>().ok())
            .unwrap_or(3);
        let anchor = bridge_entities(question, bridge)
            .into_iter()
            .next()
            .or_else(|| ordered_content_words(bridge).into_iter().next())
            .unwrap_or_else(|| "passage".into());
        let mut words = ordered_content_words(question);
        if words.is_empty() {
            words.push("related".into());
        }
        let queries: Vec<String> = (0..n)
            .map(|i| format!("{anchor} {}", words[i % words.len()]))
            .collect();
        Ok(serde_json::json!({ "queries": queries }).to_string())
    }

    fn entities(user: &str) -> Result<String, BackendError> {
        let question = line_after(user, QUESTION_LABEL).unwrap_or_default();
        let bridge = block_between(user, ENTITY_BRIDGE_LABEL, "\n\n").unwrap_or_default();
        let mut ents = bridge_entities(question, bridge);
        if ents.is_empty() {
            ents = ordered_content_words(bridge);
        }
        let e1 = ents.first().cloned().unwrap_or_else(|| "unknown".into());
        let e2 = ents.get(1).cloned().unwrap_or_else(|| e1.clone());
        Ok(format!("{e1} | {e2}"))
    }

    fn judge(user: &str) -> Result<String, BackendError> {
        let question = line_after(user, QUERY_LABEL).unwrap_or_default();
        let bridge = block_between(user, JUDGE_BRIDGE_LABEL, CANDIDATES_HEADER);
        let listing = user
            .find(CANDIDATES_HEADER)
            .map(|i| &user[i + CANDIDATES_HEADER.len()..])
            .unwrap_or_default();
        let mut scores = Vec::new();
        for line in listing.lines() {
            let Some(rest) = line.strip_prefix('[') else { continue };
            let Some(close) = rest.find("] ") else { continue };
            let Ok(index) = rest[..close].parse::<usize>() else { continue };
            let text = &rest[close + 2..];
            let score = rule_judge_score(question, bridge, text);
            scores.push(serde_json::json!({ "index": index, "score": score }));
        }
        Ok(serde_json::Value::Array(scores).to_string())
    }
}

impl ChatModel for RuleChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.validate(self.budget)?;
        match PromptKind::detect(&req.system) {
            Some(PromptKind::Svo) => Self::svo(&req.user),
            Some(PromptKind::Entities) => Self::entities(&req.user),
            Some(PromptKind::Judge) => Self::judge(&req.user),
            None => Err(BackendError::InvalidInput(
                "rule backend needs a [kind:...] sentinel in the system message".into(),
            )),
        }
    }
}

/// Replays scripted responses per prompt kind. Each kind's queue is consumed in
/// order; the last entry repeats once the queue runs dry.
/// Queued replies and the position of the next one.
type Script = (Vec<Result<String, BackendError>>, usize);

#[derive(Debug, Default)]
pub struct ScriptedChat {
    scripts: Mutex<HashMap<PromptKind, Script>>,
    budget: Option<usize>,
}

impl ScriptedChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn reply(self, kind: PromptKind, text: impl Into<String>) -> Self {
        self.push(kind, Ok(text.into()))
    }

    pub fn fail(self, kind: PromptKind, err: BackendError) -> Self {
        self.push(kind, Err(err))
    }

    fn push(self, kind: PromptKind, item: Result<String, BackendError>) -> Self {
        self.scripts
            .lock()
            .unwrap()
            .entry(kind)
            .or_insert_with(|| (Vec::new(), 0))
            .0
            .push(item);
        self
    }
}

impl ChatModel for ScriptedChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.validate(self.budget.unwrap_or(DEFAULT_INPUT_BUDGET))?;
        let kind = PromptKind::detect(&req.system)
            .ok_or_else(|| BackendError::InvalidInput("missing prompt-kind sentinel".into()))?;
        let mut scripts = self.scripts.lock().unwrap();
        let (items, next) = scripts
            .get_mut(&kind)
            .ok_or_else(|| BackendError::InvalidInput(format!("no script for `{}`", kind.tag())))?;
        let item = items[(*next).min(items.len() - 1)].clone();
        *next += 1;
        item
    }
}
