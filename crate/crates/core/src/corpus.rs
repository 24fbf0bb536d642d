//! Passage corpora, query sets, and exact cosine top-k retrieval.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::Embedder;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
    pub embedding: Option<Vec<f64>>,
}

impl Passage {
    /// Text that gets embedded and shown to the judge: title line, then body.
    pub fn content(&self) -> String {
        if self.title.trim().is_empty() {
            self.text.clone()
        } else {
            format!("{}\n{}", self.title, self.text)
        }
    }
}

/// One line of a corpus JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub accepted: usize,
    pub rejected_empty: usize,
    pub deduplicated: usize,
    pub repeated_ids: usize,
}

/// Ordered passage collection with a corpus-wide embedding dimension.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
    dim: Option<usize>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Embedding dimension, fixed by the first embedding stored.
    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn is_embedded(&self) -> bool {
        self.passages.iter().all(|p| p.embedding.is_some())
    }

    pub fn embedding(&self, id: &str) -> Result<&[f64]> {
        self.get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown passage `{id}`")))?
            .embedding
            .as_deref()
            .ok_or_else(|| Error::NotEmbedded(id.to_string()))
    }

    pub fn set_embedding(&mut self, id: &str, vector: Vec<f64>) -> Result<()> {
        let idx = *self
            .by_id
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown passage `{id}`")))?;
        self.check_dim(vector.len())?;
        self.dim = Some(vector.len());
        self.passages[idx].embedding = Some(vector);
        Ok(())
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got == 0 {
            return Err(Error::InvalidArgument("embedding of length 0".into()));
        }
        match self.dim {
            Some(expected) if expected != got => Err(Error::Dimension { expected, got }),
            _ => Ok(()),
        }
    }

    /// Embeds every passage that has no vector yet, `batch` texts per call.
    /// Returns the number of passages embedded.
    pub fn embed_missing(&mut self, embedder: &dyn Embedder, batch: usize) -> Result<usize> {
        let pending: Vec<usize> = (0..self.passages.len())
            .filter(|&i| self.passages[i].embedding.is_none())
            .collect();
        for chunk in pending.chunks(batch.max(1)) {
            let texts: Vec<String> = chunk.iter().map(|&i| self.passages[i].content()).collect();
            let vectors = embedder.embed_texts(&texts)?;
            for (&i, v) in chunk.iter().zip(vectors) {
                self.check_dim(v.len())?;
                self.dim = Some(v.len());
                self.passages[i].embedding = Some(v);
            }
        }
        Ok(pending.len())
    }
}

/// Builds a corpus from raw records.
///
/// Repeated ids with identical text are skipped; with differing text they are a
/// hard error. Empty texts are rejected and counted. With `dedup`, a record whose
/// whitespace-trimmed text equals an earlier one is dropped (first occurrence wins).
pub fn ingest_corpus<I>(records: I, dedup: bool) -> Result<(Corpus, IngestStats)>
where
    I: IntoIterator<Item = PassageRecord>,
{
    let mut corpus = Corpus::default();
    let mut stats = IngestStats::default();
    let mut seen_text: HashMap<String, ()> = HashMap::new();

    for rec in records {
        if rec.id.is_empty() {
            return Err(Error::InvalidArgument("passage record with empty id".into()));
        }
        if rec.text.trim().is_empty() {
            stats.rejected_empty += 1;
            continue;
        }
        if let Some(&i) = corpus.by_id.get(&rec.id) {
            if corpus.passages[i].text != rec.text {
                return Err(Error::DuplicateId(rec.id));
            }
            stats.repeated_ids += 1;
            continue;
        }
        let norm = rec.text.trim();
        if dedup {
            if seen_text.contains_key(norm) {
                stats.deduplicated += 1;
                continue;
            }
            seen_text.insert(norm.to_string(), ());
        }
        corpus.by_id.insert(rec.id.clone(), corpus.passages.len());
        corpus.passages.push(Passage {
            id: rec.id,
            title: rec.title,
            text: rec.text,
            embedding: None,
        });
        stats.accepted += 1;
    }
    if stats.rejected_empty > 0 {
        log::warn!("rejected {} passage(s) with empty text", stats.rejected_empty);
    }
    Ok((corpus, stats))
}

pub fn read_passage_records(path: &Path) -> Result<Vec<PassageRecord>> {
    read_jsonl(path)
}

/// Loads and ingests a corpus JSONL file.
pub fn load_corpus(path: &Path, dedup: bool) -> Result<(Corpus, IngestStats)> {
    ingest_corpus(read_passage_records(path)?, dedup)
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let records: Vec<PassageRecord> = corpus
        .passages()
        .iter()
        .map(|p| PassageRecord {
            id: p.id.clone(),
            title: p.title.clone(),
            text: p.text.clone(),
        })
        .collect();
    write_jsonl(path, &records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subtype {
    BridgeComparison,
    Compositional,
    Comparison,
    Inference,
    Unknown,
}

impl Subtype {
    pub const ALL: [Subtype; 5] = [
        Subtype::BridgeComparison,
        Subtype::Compositional,
        Subtype::Comparison,
        Subtype::Inference,
        Subtype::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subtype::BridgeComparison => "bridge_comparison",
            Subtype::Compositional => "compositional",
            Subtype::Comparison => "comparison",
            Subtype::Inference => "inference",
            Subtype::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subtype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Subtype::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

impl Serialize for Subtype {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Subtype {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().unwrap_or(Subtype::Unknown))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub question: String,
    pub gold_ids: Vec<String>,
    #[serde(default = "unknown_subtype")]
    pub subtype: Subtype,
}

fn unknown_subtype() -> Subtype {
    Subtype::Unknown
}

impl QueryRecord {
    pub fn gold_set(&self) -> BTreeSet<&str> {
        self.gold_ids.iter().map(String::as_str).collect()
    }
}

#[derive(Deserialize)]
struct RawQuery {
    id: String,
    question: String,
    gold_ids: Option<Vec<String>>,
    subtype: Option<String>,
}

/// Loads a query JSONL file. When `corpus` is given, every gold id must resolve.
/// Unknown subtype labels become [`Subtype::Unknown`] with a logged warning.
pub fn load_queryset(path: &Path, corpus: Option<&Corpus>) -> Result<Vec<QueryRecord>> {
    let raws: Vec<(usize, RawQuery)> = read_jsonl_numbered(path)?;
    let mut out = Vec::with_capacity(raws.len());
    for (line, raw) in raws {
        let gold_ids = match raw.gold_ids {
            Some(g) if !g.is_empty() => {
                let mut uniq = Vec::with_capacity(g.len());
                for id in g {
                    if !uniq.contains(&id) {
                        uniq.push(id);
                    }
                }
                uniq
            }
            _ => {
                return Err(Error::Decode {
                    path: path.to_path_buf(),
                    line,
                    message: format!("query `{}` has no gold_ids", raw.id),
                })
            }
        };
        let subtype = match raw.subtype.as_deref() {
            None => Subtype::Unknown,
            Some(s) => s.parse().unwrap_or_else(|bad: String| {
                log::warn!("query `{}`: unknown subtype `{bad}` mapped to unknown", raw.id);
                Subtype::Unknown
            }),
        };
        if let Some(c) = corpus {
            if let Some(g) = gold_ids.iter().find(|g| !c.contains(g)) {
                return Err(Error::UnresolvedGold {
                    query: raw.id,
                    gold: g.clone(),
                });
            }
        }
        out.push(QueryRecord {
            id: raw.id,
            question: raw.question,
            gold_ids,
            subtype,
        });
    }
    Ok(out)
}

pub fn write_queryset(path: &Path, queries: &[QueryRecord]) -> Result<()> {
    write_jsonl(path, queries)
}

/// Cosine similarity. Zero-norm inputs are an error rather than a silent 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    // sqrt(nu * nv) keeps cosine(u, u) at exactly 1.0.
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub passage_id: String,
    pub score: f64,
}

/// Score descending, then passage id ascending.
pub fn hit_order(a: &RankedHit, b: &RankedHit) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.passage_id.cmp(&b.passage_id))
}

/// Exact brute-force top-k by cosine. `k` larger than the corpus returns the
/// full ranking.
pub fn top_k(corpus: &Corpus, query: &[f64], k: usize) -> Result<Vec<RankedHit>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut hits = Vec::with_capacity(corpus.len());
    for p in corpus.passages() {
        let emb = p
            .embedding
            .as_deref()
            .ok_or_else(|| Error::NotEmbedded(p.id.clone()))?;
        hits.push(RankedHit {
            passage_id: p.id.clone(),
            score: cosine(query, emb)?,
        });
    }
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, hit_order);
        hits.truncate(k);
    }
    hits.sort_by(hit_order);
    Ok(hits)
}

/// A searchable passage index. The corpus itself is the exact implementation;
/// wrappers can count or reroute searches.
pub trait VectorIndex: Send + Sync {
    fn search(&self, query: &[f64], k: usize) -> Result<Vec<RankedHit>>;
}

impl VectorIndex for Corpus {
    fn search(&self, query: &[f64], k: usize) -> Result<Vec<RankedHit>> {
        top_k(self, query, k)
    }
}

// ---- embedding cache -------------------------------------------------------

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CacheHeader {
    format: String,
    dim: usize,
    embedder: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRow {
    id: String,
    vector: Vec<f64>,
}

const CACHE_FORMAT: &str = "chainjudge.embeddings/v1";

/// Writes the embedding sidecar: a header line, then one `{id, vector}` per passage.
pub fn save_embedding_cache(path: &Path, corpus: &Corpus, embedder_id: &str) -> Result<()> {
    let dim = corpus
        .dim()
        .ok_or_else(|| Error::InvalidArgument("corpus has no embeddings to cache".into()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = CacheHeader {
        format: CACHE_FORMAT.into(),
        dim,
        embedder: embedder_id.into(),
    };
    let mut emit = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    emit(serde_json::to_string(&header).expect("header serializes"))?;
    for p in corpus.passages() {
        if let Some(v) = &p.embedding {
            let row = CacheRow {
                id: p.id.clone(),
                vector: v.clone(),
            };
            emit(serde_json::to_string(&row).expect("row serializes"))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads cached vectors into `corpus`. A header whose dimension or embedder
/// differs from the expected one invalidates the whole cache (returns 0).
/// Rows for ids not in the corpus are ignored.
pub fn load_embedding_cache(
    path: &Path,
    corpus: &mut Corpus,
    embedder_id: &str,
    expected_dim: Option<usize>,
) -> Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header: CacheHeader = match lines.next() {
        Some(line) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            decode_line(path, 1, &line)?
        }
        None => return Ok(0),
    };
    if header.format != CACHE_FORMAT
        || header.embedder != embedder_id
        || expected_dim.is_some_and(|d| d != header.dim)
    {
        log::info!("embedding cache {} is stale; ignoring", path.display());
        return Ok(0);
    }
    let mut loaded = 0;
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: CacheRow = decode_line(path, i + 2, &line)?;
        if row.vector.len() != header.dim {
            return Err(Error::Dimension {
                expected: header.dim,
                got: row.vector.len(),
            });
        }
        if corpus.contains(&row.id) {
            corpus.set_embedding(&row.id, row.vector)?;
            loaded += 1;
        }
    }
    Ok(loaded)
}

// ---- JSONL helpers ---------------------------------------------------------

pub(crate) fn decode_line<T: serde::de::DeserializeOwned>(
    path: &Path,
    line: usize,
    text: &str,
) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    })
}

pub(crate) fn read_jsonl_numbered<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, decode_line(path, i + 1, &line)?));
    }
    Ok(out)
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    Ok(read_jsonl_numbered(path)?
        .into_iter()
        .map(|(_, v)| v)
        .collect())
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
