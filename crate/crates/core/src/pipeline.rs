//! Hop-1 bridge selection, SVO expansion, dual-entity retrieval and pool assembly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backend::{ChatModel, Embedder};
use crate::corpus::{hit_order, RankedHit, VectorIndex};
use crate::error::{Error, Result};
use crate::prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Svo,
    E1,
    E2,
}

/// Top hop-1 passage plus the full hop-1 list it was taken from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bridge {
    pub passage_id: String,
    pub score: f64,
    pub hop1_hits: Vec<RankedHit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SvoQueries(Vec<String>);

impl SvoQueries {
    /// Exactly `n` non-empty queries.
    pub fn new(queries: Vec<String>, n: usize) -> Result<Self> {
        if queries.len() != n || queries.iter().any(|q| q.trim().is_empty()) {
            return Err(Error::InvalidArgument(format!(
                "expected {n} non-empty SVO queries, got {queries:?}"
            )));
        }
        Ok(Self(queries))
    }

    pub fn queries(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Newline-joined form used when the queries stand in for the bridge text.
    pub fn joined(&self) -> String {
        self.0.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPair {
    pub e1: String,
    pub e2: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub passage_id: String,
    /// Assembly score: maximum similarity over the contributing retrievals.
    pub score: f64,
    /// Merged SVO cosine; present iff `sources` contains [`Source::Svo`].
    pub svo_score: Option<f64>,
    pub sources: BTreeSet<Source>,
    /// 1-based position after assembly (0 before).
    pub pool_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidatePool {
    entries: Vec<PoolEntry>,
}

impl CandidatePool {
    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.passage_id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&PoolEntry> {
        self.entries.iter().find(|e| e.passage_id == id)
    }
}

pub fn select_bridge(
    index: &dyn VectorIndex,
    embedder: &dyn Embedder,
    question: &str,
    k1: usize,
) -> Result<Bridge> {
    let vector = embed_one(embedder, question)?;
    let hits = index.search(&vector, k1)?;
    let top = hits.first().ok_or(Error::EmptyCorpus)?;
    Ok(Bridge {
        passage_id: top.passage_id.clone(),
        score: top.score,
        hop1_hits: hits,
    })
}

fn embed_one(embedder: &dyn Embedder, text: &str) -> Result<Vec<f64>> {
    let mut v = embedder.embed_texts(&[text.to_string()])?;
    Ok(v.pop().expect("embedder returns one vector per input"))
}

/// Pulls the outermost `open`..`close` span out of free-form model output.
pub(crate) fn json_span(raw: &str, open: char, close: char) -> Option<&str> {
    let start = raw.find(open)?;
    let end = raw.rfind(close)?;
    (end > start).then(|| &raw[start..=end])
}

fn parse_svo(raw: &str, n: usize) -> std::result::Result<(Vec<String>, Option<String>), String> {
    let span = json_span(raw, '{', '}').ok_or("no JSON object in completion")?;
    let v: serde_json::Value = serde_json::from_str(span).map_err(|e| e.to_string())?;
    let items = v
        .get("queries")
        .and_then(|q| q.as_array())
        .ok_or("missing `queries` array")?;
    let mut queries: Vec<String> = items
        .iter()
        .filter_map(|q| q.as_str())
        .map(|q| q.trim().to_string())
        .filter(|q| !q.is_empty())
        .collect();
    if queries.len() < n {
        return Err(format!("expected {n} queries, got {}", queries.len()));
    }
    let note = (queries.len() > n).then(|| format!("svo: truncated {} queries to {n}", queries.len()));
    queries.truncate(n);
    Ok((queries, note))
}

/// Asks the model for `n` SVO queries. A malformed or short answer is retried
/// once; extra queries are truncated with a warning.
pub fn generate_svo_queries(
    chat: &dyn ChatModel,
    question: &str,
    bridge_text: &str,
    n: usize,
) -> Result<(SvoQueries, Vec<String>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let req = prompts::svo_request(question, bridge_text, n);
    let mut warnings = Vec::new();
    for attempt in 0..2 {
        let raw = chat.chat(&req)?;
        match parse_svo(&raw, n) {
            Ok((queries, note)) => {
                warnings.extend(note);
                return Ok((SvoQueries::new(queries, n)?, warnings));
            }
            Err(why) if attempt == 0 => warnings.push(format!("svo: retrying after: {why}")),
            Err(why) => return Err(Error::ModelOutput(format!("svo generation: {why}"))),
        }
    }
    unreachable!("loop returns on the second attempt")
}

/// Merges ranked lists by per-passage maximum score and keeps the top `cap`.
pub fn union_max(lists: &[Vec<RankedHit>], cap: usize) -> Vec<RankedHit> {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for hit in lists.iter().flatten() {
        best.entry(&hit.passage_id)
            .and_modify(|s| *s = s.max(hit.score))
            .or_insert(hit.score);
    }
    let mut merged: Vec<RankedHit> = best
        .into_iter()
        .map(|(id, score)| RankedHit {
            passage_id: id.to_string(),
            score,
        })
        .collect();
    merged.sort_by(hit_order);
    merged.truncate(cap);
    merged
}

/// One retrieval pass per SVO query (top-`k2` each), merged by `union_max`.
pub fn svo_retrieve(
    index: &dyn VectorIndex,
    embedder: &dyn Embedder,
    svo: &SvoQueries,
    k2: usize,
    cap: usize,
) -> Result<Vec<PoolEntry>> {
    let vectors = embedder.embed_texts(svo.queries())?;
    let lists = vectors
        .iter()
        .map(|v| index.search(v, k2))
        .collect::<Result<Vec<_>>>()?;
    Ok(union_max(&lists, cap)
        .into_iter()
        .map(|h| PoolEntry {
            passage_id: h.passage_id,
            score: h.score,
            svo_score: Some(h.score),
            sources: BTreeSet::from([Source::Svo]),
            pool_rank: 0,
        })
        .collect())
}

fn clean_entity(s: &str) -> String {
    s.trim().trim_matches(|c| c == '"' || c == '\'').trim().to_string()
}

fn parse_entities(raw: &str) -> std::result::Result<(EntityPair, Option<String>), String> {
    let line = raw
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or("empty completion")?;
    let line = line.trim_matches('"');
    let mut parts: Vec<String> = line.split(" | ").map(clean_entity).collect();
    if parts.len() < 2 && line.contains('|') {
        parts = line.split('|').map(clean_entity).collect();
    }
    parts.retain(|p| !p.is_empty());
    match parts.len() {
        0 | 1 => Err(format!("expected `e1 | e2`, got `{line}`")),
        n => {
            let note = (n > 2).then(|| format!("entities: kept first two of {n} parts"));
            Ok((
                EntityPair {
                    e1: parts[0].clone(),
                    e2: parts[1].clone(),
                },
                note,
            ))
        }
    }
}

/// Asks the model for two entities separated by `" | "`, retrying once on a
/// reply without two parts.
pub fn extract_entities(
    chat: &dyn ChatModel,
    question: &str,
    bridge_text: &str,
) -> Result<(EntityPair, Vec<String>)> {
    let req = prompts::entity_request(question, bridge_text);
    let mut warnings = Vec::new();
    for attempt in 0..2 {
        let raw = chat.chat(&req)?;
        match parse_entities(&raw) {
            Ok((pair, note)) => {
                warnings.extend(note);
                return Ok((pair, warnings));
            }
            Err(why) if attempt == 0 => warnings.push(format!("entities: retrying after: {why}")),
            Err(why) => return Err(Error::ModelOutput(format!("entity extraction: {why}"))),
        }
    }
    unreachable!("loop returns on the second attempt")
}

/// Embeds the raw entity string and retrieves its top-`k`.
pub fn entity_retrieve(
    index: &dyn VectorIndex,
    embedder: &dyn Embedder,
    entity: &str,
    k: usize,
    source: Source,
) -> Result<Vec<PoolEntry>> {
    if entity.trim().is_empty() {
        return Err(Error::InvalidArgument("empty entity".into()));
    }
    let v = embed_one(embedder, entity)?;
    Ok(index
        .search(&v, k)?
        .into_iter()
        .map(|h| PoolEntry {
            passage_id: h.passage_id,
            score: h.score,
            svo_score: None,
            sources: BTreeSet::from([source]),
            pool_rank: 0,
        })
        .collect())
}

/// Union of the three source lists, deduplicated by passage id, ranked by the
/// maximum contributing score (ties by id) and truncated to `cap`.
pub fn assemble_pool(
    svo: &[PoolEntry],
    e1: &[PoolEntry],
    e2: &[PoolEntry],
    cap: usize,
) -> Result<CandidatePool> {
    if svo.is_empty() && e1.is_empty() && e2.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut merged: BTreeMap<&str, PoolEntry> = BTreeMap::new();
    for entry in svo.iter().chain(e1).chain(e2) {
        merged
            .entry(&entry.passage_id)
            .and_modify(|m| {
                m.score = m.score.max(entry.score);
                m.sources.extend(entry.sources.iter().copied());
                m.svo_score = match (m.svo_score, entry.svo_score) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    (a, b) => a.or(b),
                };
            })
            .or_insert_with(|| entry.clone());
    }
    let mut entries: Vec<PoolEntry> = merged.into_values().collect();
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.passage_id.cmp(&b.passage_id))
    });
    entries.truncate(cap);
    for (i, e) in entries.iter_mut().enumerate() {
        e.pool_rank = i + 1;
    }
    Ok(CandidatePool { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::backend::{BackendError, HashEmbedder, ScriptedChat};
    use crate::corpus::{ingest_corpus, Corpus, PassageRecord};
    use crate::prompts::PromptKind;

    fn hit(id: &str, score: f64) -> RankedHit {
        RankedHit {
            passage_id: id.into(),
            score,
        }
    }

    fn entry(id: &str, score: f64, source: Source) -> PoolEntry {
        PoolEntry {
            passage_id: id.into(),
            score,
            svo_score: (source == Source::Svo).then_some(score),
            sources: BTreeSet::from([source]),
            pool_rank: 0,
        }
    }

    fn world(texts: &[(&str, &str)]) -> (Corpus, HashEmbedder) {
        let emb = HashEmbedder::new(512);
        let (mut c, _) = ingest_corpus(
            texts.iter().map(|(id, t)| PassageRecord {
                id: (*id).into(),
                title: String::new(),
                text: (*t).into(),
            }),
            true,
        )
        .unwrap();
        c.embed_missing(&emb, 16).unwrap();
        (c, emb)
    }

    #[test]
    fn verbatim_question_passage_is_the_bridge() {
        let (c, emb) = world(&[
            ("p1", "who directed the film fenmoor"),
            ("p2", "a novel about ships"),
            ("p3", "rivers of the north"),
        ]);
        let b = select_bridge(&c, &emb, "who directed the film fenmoor", 5).unwrap();
        assert_eq!(b.passage_id, "p1");
        assert!((b.score - 1.0).abs() < 1e-12);
        assert_eq!(b.hop1_hits.len(), 3);
        assert_eq!(b.hop1_hits[0].passage_id, b.passage_id);
    }

    #[test]
    fn bridge_ties_go_to_lower_id() {
        let (c, emb) = world(&[("b", "alpha beta"), ("a", "beta alpha"), ("c", "gamma")]);
        assert_eq!(select_bridge(&c, &emb, "alpha beta", 2).unwrap().passage_id, "a");
    }

    #[test]
    fn svo_parse_verbatim_truncate_and_shortage() {
        let chat = ScriptedChat::new().reply(
            PromptKind::Svo,
            r#"{"queries":["A born in B","C directed D","E spouse F"]}"#,
        );
        let (q, w) = generate_svo_queries(&chat, "q", "b", 3).unwrap();
        assert_eq!(q.queries(), ["A born in B", "C directed D", "E spouse F"]);
        assert!(w.is_empty());

        let chat = ScriptedChat::new().reply(PromptKind::Svo, r#"{"queries":["a","b","c","d"]}"#);
        let (q, w) = generate_svo_queries(&chat, "q", "b", 3).unwrap();
        assert_eq!(q.queries(), ["a", "b", "c"]);
        assert_eq!(w.len(), 1);

        let chat = ScriptedChat::new().reply(PromptKind::Svo, r#"{"queries":["a","b"]}"#);
        assert!(matches!(
            generate_svo_queries(&chat, "q", "b", 3),
            Err(Error::ModelOutput(_))
        ));
    }

    #[test]
    fn svo_malformed_then_good_is_repaired() {
        let chat = ScriptedChat::new()
            .reply(PromptKind::Svo, "sure! here you go")
            .reply(PromptKind::Svo, "```json\n{\"queries\": [\"x\", \"y\", \"z\"]}\n```");
        let (q, w) = generate_svo_queries(&chat, "q", "b", 3).unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn transport_errors_are_not_retried_as_parse_errors() {
        let chat = ScriptedChat::new().fail(PromptKind::Svo, BackendError::Timeout { attempts: 3 });
        assert!(matches!(
            generate_svo_queries(&chat, "q", "b", 3),
            Err(Error::Backend(BackendError::Timeout { .. }))
        ));
    }

    #[test]
    fn union_max_examples() {
        let merged = union_max(&[vec![hit("x", 0.4)], vec![hit("x", 0.7)]], 15);
        assert_eq!(merged, vec![hit("x", 0.7)]);

        let lists: Vec<Vec<RankedHit>> = (0..3)
            .map(|q| (0..10).map(|i| hit(&format!("q{q}-{i:02}"), (q * 10 + i) as f64 / 100.0)).collect())
            .collect();
        let merged = union_max(&lists, 15);
        assert_eq!(merged.len(), 15);
        assert_eq!(merged[0].passage_id, "q2-09");
        assert!(merged.iter().all(|h| h.score >= 0.15));

        let single: Vec<RankedHit> = (0..10).map(|i| hit(&format!("p{i}"), 1.0 - i as f64 / 10.0)).collect();
        assert_eq!(union_max(std::slice::from_ref(&single), 15), single);
    }

    #[test]
    fn entity_parsing() {
        let (p, w) = parse_entities("Ada Lovelace | Charles Babbage").unwrap();
        assert_eq!((p.e1.as_str(), p.e2.as_str()), ("Ada Lovelace", "Charles Babbage"));
        assert!(w.is_none());
        let (p, _) = parse_entities("Hampstead | Hampstead").unwrap();
        assert_eq!(p.e1, p.e2);
        let (p, w) = parse_entities("a | b | c").unwrap();
        assert_eq!((p.e1.as_str(), p.e2.as_str()), ("a", "b"));
        assert!(w.is_some());
        assert!(parse_entities("just one").is_err());
        assert!(parse_entities("").is_err());
    }

    #[test]
    fn entity_retry_then_error() {
        let chat = ScriptedChat::new().reply(PromptKind::Entities, "only one");
        assert!(matches!(extract_entities(&chat, "q", "b"), Err(Error::ModelOutput(_))));
        let chat = ScriptedChat::new()
            .reply(PromptKind::Entities, "only one")
            .reply(PromptKind::Entities, "x | y");
        assert_eq!(extract_entities(&chat, "q", "b").unwrap().0.e2, "y");
    }

    #[test]
    fn entity_retrieval_examples() {
        let (c, emb) = world(&[("p1", "Fenmoor castle"), ("p2", "river delta"), ("p3", "old mill")]);
        let hits = entity_retrieve(&c, &emb, "Fenmoor castle", 5, Source::E1).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].passage_id, "p1");
        assert!(hits.iter().all(|h| h.sources == BTreeSet::from([Source::E1]) && h.svo_score.is_none()));
        let again = entity_retrieve(&c, &emb, "Fenmoor castle", 5, Source::E1).unwrap();
        assert_eq!(hits, again);
    }

    #[test]
    fn pool_merges_sources_and_scores() {
        let pool = assemble_pool(&[entry("x", 0.6, Source::Svo)], &[entry("x", 0.8, Source::E1)], &[], 20).unwrap();
        assert_eq!(pool.len(), 1);
        let e = &pool.entries()[0];
        assert_eq!(e.score, 0.8);
        assert_eq!(e.svo_score, Some(0.6));
        assert_eq!(e.sources, BTreeSet::from([Source::Svo, Source::E1]));
        assert_eq!(e.pool_rank, 1);
    }

    #[test]
    fn pool_size_examples() {
        let mk = |prefix: &str, n: usize, s: Source| -> Vec<PoolEntry> {
            (0..n).map(|i| entry(&format!("{prefix}{i:02}"), 0.5 + i as f64 / 100.0, s)).collect()
        };
        let pool = assemble_pool(&mk("s", 15, Source::Svo), &mk("a", 5, Source::E1), &mk("b", 5, Source::E2), 20).unwrap();
        assert_eq!(pool.len(), 20);
        let pool = assemble_pool(&mk("s", 6, Source::Svo), &mk("a", 2, Source::E1), &mk("b", 2, Source::E2), 20).unwrap();
        assert_eq!(pool.len(), 10);
        assert!(matches!(assemble_pool(&[], &[], &[], 20), Err(Error::EmptyPool)));
    }

    #[test]
    fn same_entity_twice_collapses() {
        let (c, emb) = world(&[("p1", "Fenmoor castle"), ("p2", "castle walls"), ("p3", "river mouth")]);
        let svo = svo_retrieve(&c, &emb, &SvoQueries::new(vec!["river".into(), "walls".into(), "mouth".into()], 3).unwrap(), 10, 15).unwrap();
        let e1 = entity_retrieve(&c, &emb, "Fenmoor", 5, Source::E1).unwrap();
        let e2 = entity_retrieve(&c, &emb, "Fenmoor", 5, Source::E2).unwrap();
        let both = assemble_pool(&svo, &e1, &e2, 20).unwrap();
        let alone = assemble_pool(&svo, &e1, &[], 20).unwrap();
        assert_eq!(both.ids().collect::<Vec<_>>(), alone.ids().collect::<Vec<_>>());
        for (a, b) in both.entries().iter().zip(alone.entries()) {
            assert_eq!((a.score, a.svo_score, a.pool_rank), (b.score, b.svo_score, b.pool_rank));
        }
    }

    fn hits_strategy() -> impl Strategy<Value = Vec<Vec<RankedHit>>> {
        let hit = (0u8..20, -10i8..=10).prop_map(|(i, s)| hit(&format!("p{i:02}"), f64::from(s) / 10.0));
        prop::collection::vec(prop::collection::vec(hit, 0..10), 1..4)
    }

    fn entries(hits: &[RankedHit], source: Source) -> Vec<PoolEntry> {
        let mut seen = BTreeSet::new();
        hits.iter()
            .filter(|h| seen.insert(h.passage_id.clone()))
            .map(|h| entry(&h.passage_id, h.score, source))
            .collect()
    }

    proptest! {
        #[test]
        fn union_max_matches_group_by(lists in hits_strategy(), cap in 1usize..16) {
            let mut best: std::collections::BTreeMap<String, f64> = Default::default();
            for h in lists.iter().flatten() {
                let e = best.entry(h.passage_id.clone()).or_insert(f64::NEG_INFINITY);
                *e = e.max(h.score);
            }
            let mut oracle: Vec<RankedHit> = best.into_iter().map(|(id, s)| hit(&id, s)).collect();
            oracle.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then_with(|| a.passage_id.cmp(&b.passage_id)));
            oracle.truncate(cap);
            prop_assert_eq!(union_max(&lists, cap), oracle);
        }

        #[test]
        fn pool_is_capped_unique_sorted_and_closed(lists in hits_strategy(), cap in 1usize..25) {
            let svo = entries(&lists[0], Source::Svo);
            let e1 = entries(lists.get(1).map_or(&[][..], |l| &l[..]), Source::E1);
            let e2 = entries(lists.get(2).map_or(&[][..], |l| &l[..]), Source::E2);
            prop_assume!(!(svo.is_empty() && e1.is_empty() && e2.is_empty()));
            let pool = assemble_pool(&svo, &e1, &e2, cap).unwrap();
            prop_assert!(pool.len() <= cap);
            let ids: BTreeSet<&str> = pool.ids().collect();
            prop_assert_eq!(ids.len(), pool.len());
            for (i, e) in pool.entries().iter().enumerate() {
                prop_assert_eq!(e.pool_rank, i + 1);
                prop_assert!(!e.sources.is_empty());
                prop_assert_eq!(e.svo_score.is_some(), e.sources.contains(&Source::Svo));
                for (s, list) in [(Source::Svo, &svo), (Source::E1, &e1), (Source::E2, &e2)] {
                    let member = list.iter().any(|x| x.passage_id == e.passage_id);
                    prop_assert_eq!(member, e.sources.contains(&s));
                }
            }
            for w in pool.entries().windows(2) {
                prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].passage_id < w[1].passage_id));
            }
        }

        #[test]
        fn bridge_is_top_one(words in prop::collection::vec(prop::sample::select(vec!["film", "river", "novel", "song", "Fenmoor", "castle"]), 1..5)) {
            let (c, emb) = world(&[
                ("p1", "Fenmoor is a film"),
                ("p2", "a river near the castle"),
                ("p3", "a novel and a song"),
                ("p4", "castle film novel"),
            ]);
            let question = words.join(" ");
            let bridge = select_bridge(&c, &emb, &question, 5).unwrap();
            let top = crate::corpus::top_k(&c, &emb.embed_one(&question), 1).unwrap();
            prop_assert_eq!(&bridge.passage_id, &top[0].passage_id);
            prop_assert_eq!(bridge.score, top[0].score);
        }
    }
}
