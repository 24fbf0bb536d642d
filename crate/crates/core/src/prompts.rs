//! Prompt templates for the three per-query model calls.
//!
//! Each system message starts with a `[kind:<name>]` sentinel so scripted and
//! rule-based backends can dispatch without guessing from free text.

use crate::backend::ChatRequest;
use crate::text::single_line;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Svo,
    Entities,
    Judge,
}

impl PromptKind {
    pub fn tag(self) -> &'static str {
        match self {
            PromptKind::Svo => "svo",
            PromptKind::Entities => "entities",
            PromptKind::Judge => "judge",
        }
    }

    pub fn sentinel(self) -> String {
        format!("[kind:{}]", self.tag())
    }

    pub fn detect(system: &str) -> Option<Self> {
        let rest = system.trim_start().strip_prefix("[kind:")?;
        let tag = &rest[..rest.find(']')?];
        [PromptKind::Svo, PromptKind::Entities, PromptKind::Judge]
            .into_iter()
            .find(|k| k.tag() == tag)
    }
}

pub const QUESTION_LABEL: &str = "Question: ";
pub const FIRST_HOP_LABEL: &str = "First-hop passage: ";
pub const ENTITY_BRIDGE_LABEL: &str = "Bridge passage:\n";
pub const QUERY_LABEL: &str = "Query: ";
pub const ENTITY1_LABEL: &str = "Bridge entity 1: ";
pub const ENTITY2_LABEL: &str = "Bridge entity 2: ";
pub const JUDGE_BRIDGE_LABEL: &str = "Bridge passage:\n";
pub const CANDIDATES_HEADER: &str = "\n\nCandidate passages:\n";

pub const SVO_MAX_OUTPUT: u32 = 256;
pub const ENTITY_MAX_OUTPUT: u32 = 64;
pub const JUDGE_MAX_OUTPUT: u32 = 1024;

pub fn svo_request(question: &str, bridge_text: &str, n: usize) -> ChatRequest {
    let system = format!(
        "{} You write search queries that find the second piece of evidence for a two-step question.",
        PromptKind::Svo.sentinel()
    );
    let slots = vec!["\"...\""; n].join(", ");
    let user = format!(
        "{QUESTION_LABEL}{}\n{FIRST_HOP_LABEL}{}\n\n\
         Write {n} search queries, each a short subject-verb-object statement, that would \
         find the passage holding the remaining fact. Answer with this JSON and nothing \
         else:\n{{\"queries\": [{slots}]}}",
        single_line(question),
        single_line(bridge_text),
    );
    ChatRequest::new(system, user, SVO_MAX_OUTPUT)
}

pub fn entity_request(question: &str, bridge_text: &str) -> ChatRequest {
    let system = format!(
        "{} You pick out the entities a two-step question still needs.",
        PromptKind::Entities.sentinel()
    );
    let user = format!(
        "{QUESTION_LABEL}{}\n\n{ENTITY_BRIDGE_LABEL}{}\n\n\
         The passage above resolves the first step of the question. Name the two entities \
         the answer most likely depends on.\n\n\
         Answer on one line as two short names joined by \" | \", for example \
         \"Ada Lovelace | 1843\", with no other text. If there is only one, give it twice, \
         as in \"Ada Lovelace | Ada Lovelace\".",
        single_line(question),
        single_line(bridge_text),
    );
    ChatRequest::new(system, user, ENTITY_MAX_OUTPUT)
}

/// Bridge context shown to a conditioned judge.
#[derive(Debug, Clone, Copy)]
pub struct JudgeContext<'a> {
    pub entity1: &'a str,
    pub entity2: &'a str,
    pub bridge: &'a str,
}

pub fn judge_request(question: &str, context: Option<JudgeContext<'_>>, candidates: &[String]) -> ChatRequest {
    let sentinel = PromptKind::Judge.sentinel();
    let system = match context {
        Some(_) => format!(
            "{sentinel} You rate evidence for two-step questions. You see the question, the \
             passage that settles its first step, and numbered candidates. Rate each candidate \
             from 0 to 10 by how well it supplies the second step, read in light of that \
             first-step passage."
        ),
        None => format!(
            "{sentinel} You rate evidence for two-step questions. You see the question and \
             numbered candidates. Rate each candidate from 0 to 10 by how much it helps \
             answer the question."
        ),
    };
    let mut user = format!("{QUERY_LABEL}{}", single_line(question));
    if let Some(ctx) = context {
        user.push_str(&format!(
            "\n{ENTITY1_LABEL}{}\n{ENTITY2_LABEL}{}\n{JUDGE_BRIDGE_LABEL}{}",
            single_line(ctx.entity1),
            single_line(ctx.entity2),
            ctx.bridge.trim(),
        ));
    }
    user.push_str(CANDIDATES_HEADER);
    for (i, c) in candidates.iter().enumerate() {
        user.push_str(&format!("[{}] {}\n", i + 1, single_line(c)));
    }
    user.push_str(
        "\nRate every candidate. Answer with a JSON array only, one object per candidate, \
         like [{\"index\": 1, \"score\": 7}, {\"index\": 2, \"score\": 0}].",
    );
    ChatRequest::new(system, user, JUDGE_MAX_OUTPUT)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentinels_round_trip() {
        for k in [PromptKind::Svo, PromptKind::Entities, PromptKind::Judge] {
            assert_eq!(PromptKind::detect(&format!("{} hi", k.sentinel())), Some(k));
        }
        assert_eq!(PromptKind::detect("no sentinel"), None);
        assert_eq!(PromptKind::detect("[kind:other] x"), None);
    }

    #[test]
    fn svo_prompt_asks_for_n_queries() {
        let r = svo_request("Who?", "Bridge\ntext", 3);
        assert!(r.user.contains("Write 3 search queries"));
        assert!(r.user.contains("First-hop passage: Bridge text"));
        assert!(r.user.ends_with("{\"queries\": [\"...\", \"...\", \"...\"]}"));
    }

    #[test]
    fn two_way_judge_has_no_bridge_slots() {
        let r = judge_request("Q?", None, &["a".into(), "b".into()]);
        assert!(!r.user.contains("Bridge"));
        assert!(r.user.contains("[1] a\n[2] b\n"));
    }
}
