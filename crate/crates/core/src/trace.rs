//! Per-query decision record, persisted as JSONL.
//!
//! Besides the ids the pipeline decided on, a trace stores the raw judge
//! scores and merged SVO scores, so fusion can be recomputed offline for any
//! `alpha` without new model calls. Floats are written in shortest
//! round-trip form, so a read-back trace is bit-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::decode_line;
use crate::error::{Error, Result};
use crate::fusion::{fuse_and_rank, svo_scores_with_floor, FusedRanking};
use crate::judge::{JudgeCondition, JudgeVerdict};
use crate::pipeline::{Bridge, CandidatePool, EntityPair, SvoQueries};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub schema_version: u32,
    pub query_id: String,
    pub question: String,
    pub condition: JudgeCondition,
    pub config_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge: Option<Bridge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svo_queries: Option<SvoQueries>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<EntityPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<CandidatePool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusedRanking>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_at_5: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Set when a stage failed; the fields above hold whatever was finished.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RetrievalTrace {
    pub fn new(query_id: &str, question: &str, condition: JudgeCondition, fingerprint: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            query_id: query_id.into(),
            question: question.into(),
            condition,
            config_fingerprint: fingerprint.into(),
            bridge: None,
            svo_queries: None,
            entities: None,
            pool: None,
            judge: None,
            fusion: None,
            r_at_5: None,
            warnings: Vec::new(),
            error: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    /// Final ranking; empty for a failed query.
    pub fn top5(&self) -> &[String] {
        self.fusion.as_ref().map_or(&[], |f| &f.top5)
    }

    pub fn alpha(&self) -> Option<f64> {
        self.fusion.as_ref().map(|f| f.alpha)
    }

    /// Recomputes PIT and fusion from the stored raw scores.
    pub fn refuse(&self, alpha: f64) -> Result<FusedRanking> {
        let pool = self
            .pool
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("trace `{}` has no pool", self.query_id)))?;
        if self.condition.uses_judge() && self.judge.is_none() {
            return Err(Error::InvalidArgument(format!("trace `{}` has no judge scores", self.query_id)));
        }
        fuse_and_rank(self.judge.as_ref().map(|j| &j.scores), &svo_scores_with_floor(pool), alpha)
    }

    /// True when re-fusing at the stored alpha reproduces the stored ranking.
    pub fn refusion_holds(&self) -> Result<bool> {
        match &self.fusion {
            None => Ok(true),
            Some(f) => Ok(&self.refuse(f.alpha)? == f),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

pub fn parse_trace_line(path: &Path, line: usize, text: &str) -> Result<RetrievalTrace> {
    let value: serde_json::Value = decode_line(path, line, text)?;
    let found = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Decode {
            path: path.to_path_buf(),
            line,
            message: "missing schema_version".into(),
        })?;
    if found != u64::from(SCHEMA_VERSION) {
        return Err(Error::SchemaVersion {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    })
}

pub fn read_traces(path: &Path) -> Result<Vec<RetrievalTrace>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(parse_trace_line(path, i + 1, &line)?);
        }
    }
    Ok(out)
}

pub fn write_traces(path: &Path, traces: &[RetrievalTrace]) -> Result<()> {
    let writer = TraceWriter::create(path)?;
    for t in traces {
        writer.append(t)?;
    }
    writer.finish()
}

/// Single serialized writer shared by worker threads.
pub struct TraceWriter {
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn append(&self, trace: &RetrievalTrace) -> Result<()> {
        let mut out = self.out.lock().expect("trace writer poisoned");
        writeln!(out, "{}", trace.to_line()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(self) -> Result<()> {
        let mut out = self.out.into_inner().expect("trace writer poisoned");
        out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::RankedHit;
    use crate::pipeline::{assemble_pool, PoolEntry, Source};
    use std::collections::{BTreeMap, BTreeSet};

    pub(crate) fn sample() -> RetrievalTrace {
        let entry = |id: &str, s: f64, src: Source| PoolEntry {
            passage_id: id.into(),
            score: s,
            svo_score: (src == Source::Svo).then_some(s),
            sources: BTreeSet::from([src]),
            pool_rank: 0,
        };
        let pool = assemble_pool(
            &[entry("a", 0.1 + 0.2, Source::Svo), entry("b", 1.0 / 3.0, Source::Svo)],
            &[entry("c", 0.7, Source::E1)],
            &[],
            20,
        )
        .unwrap();
        let scores = BTreeMap::from([("a".to_string(), 3u8), ("b".to_string(), 9), ("c".to_string(), 9)]);
        let mut t = RetrievalTrace::new("q1", "Who?", JudgeCondition::Tripartite, "00");
        t.bridge = Some(Bridge {
            passage_id: "a".into(),
            score: 0.812_345_678_901_234_5,
            hop1_hits: vec![RankedHit {
                passage_id: "a".into(),
                score: 0.812_345_678_901_234_5,
            }],
        });
        t.svo_queries = Some(SvoQueries::new(vec!["x".into(), "y".into(), "z".into()], 3).unwrap());
        t.entities = Some(EntityPair {
            e1: "E".into(),
            e2: "F".into(),
        });
        t.fusion = Some(fuse_and_rank(Some(&scores), &svo_scores_with_floor(&pool), 0.1).unwrap());
        t.judge = Some(JudgeVerdict {
            condition: JudgeCondition::Tripartite,
            scores,
            raw_response: "[]".into(),
            warnings: vec![],
            bridge_slot_passage: None,
        });
        t.pool = Some(pool);
        t.r_at_5 = Some(0.5);
        t
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let t = sample();
        write_traces(&path, std::slice::from_ref(&t)).unwrap();
        let back = read_traces(&path).unwrap();
        assert_eq!(back, vec![t.clone()]);
        assert_eq!(back[0].to_line(), t.to_line());
    }

    #[test]
    fn refusion_reproduces_and_moves_with_alpha() {
        let t = sample();
        assert!(t.refusion_holds().unwrap());
        assert_eq!(t.top5(), ["b", "c", "a"]);
        // at alpha=1 only the SVO percentile counts, and c sits at the floor
        assert_eq!(t.refuse(1.0).unwrap().top5, ["b", "a", "c"]);
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let line = sample().to_line();
        std::fs::write(&path, format!("{line}\n{}\n", &line[..line.len() / 2])).unwrap();
        match read_traces(&path) {
            Err(Error::Decode { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let line = sample().to_line().replace("\"schema_version\":1", "\"schema_version\":7");
        std::fs::write(&path, line).unwrap();
        let err = read_traces(&path).unwrap_err();
        assert!(matches!(err, Error::SchemaVersion { found: 7, expected: 1 }));
        assert!(err.to_string().contains('7') && err.to_string().contains('1'));
    }
}
