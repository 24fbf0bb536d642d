//! End-to-end per-query execution and batch scheduling.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use crate::backend::{ChatModel, Embedder};
use crate::config::RunConfig;
use crate::corpus::{Corpus, QueryRecord, VectorIndex};
use crate::error::{Error, Result};
use crate::eval::recall_at_k;
use crate::fusion::{fuse_and_rank, svo_scores_with_floor, TOP_K};
use crate::judge::{judge_pool, JudgeCondition, JudgeInput};
use crate::pipeline::{
    assemble_pool, entity_retrieve, extract_entities, generate_svo_queries, select_bridge, svo_retrieve, Source,
};
use crate::trace::RetrievalTrace;

/// Backends plus corpus: everything needed to run a query.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub config: &'a RunConfig,
    pub corpus: &'a Corpus,
    pub index: &'a dyn VectorIndex,
    pub embedder: &'a dyn Embedder,
    pub chat: &'a dyn ChatModel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchSummary {
    pub queries: usize,
    pub errored: usize,
}

impl<'a> Engine<'a> {
    /// Searches the corpus directly with exact cosine.
    pub fn new(config: &'a RunConfig, corpus: &'a Corpus, embedder: &'a dyn Embedder, chat: &'a dyn ChatModel) -> Self {
        Self {
            config,
            corpus,
            index: corpus,
            embedder,
            chat,
        }
    }

    pub fn with_index(mut self, index: &'a dyn VectorIndex) -> Self {
        self.index = index;
        self
    }

    /// Runs every stage for one query. Failures are recorded in the trace's
    /// `error` field next to whatever stages completed.
    pub fn run_pipeline(&self, query: &QueryRecord) -> RetrievalTrace {
        let mut trace = RetrievalTrace::new(
            &query.id,
            &query.question,
            self.config.condition,
            &self.config.fingerprint(),
        );
        if let Err(e) = self.stages(query, &mut trace) {
            trace.error = Some(e.to_string());
        }
        trace
    }

    fn passage_text(&self, id: &str) -> Result<String> {
        self.corpus
            .get(id)
            .map(|p| p.content())
            .ok_or_else(|| Error::InvalidArgument(format!("index returned unknown passage `{id}`")))
    }

    fn stages(&self, query: &QueryRecord, trace: &mut RetrievalTrace) -> Result<()> {
        let cfg = self.config;
        let bridge = select_bridge(self.index, self.embedder, &query.question, cfg.k1)?;
        let bridge_text = self.passage_text(&bridge.passage_id)?;
        trace.bridge = Some(bridge.clone());

        let (svo, notes) = generate_svo_queries(self.chat, &query.question, &bridge_text, cfg.n_svo)?;
        trace.warnings.extend(notes);
        trace.svo_queries = Some(svo.clone());
        let svo_entries = svo_retrieve(self.index, self.embedder, &svo, cfg.k2, cfg.svo_cap)?;

        let (entities, notes) = extract_entities(self.chat, &query.question, &bridge_text)?;
        trace.warnings.extend(notes);
        trace.entities = Some(entities.clone());
        let e1 = entity_retrieve(self.index, self.embedder, &entities.e1, cfg.entity_k, Source::E1)?;
        let e2 = entity_retrieve(self.index, self.embedder, &entities.e2, cfg.entity_k, Source::E2)?;

        let pool = assemble_pool(&svo_entries, &e1, &e2, cfg.pool_cap)?;
        trace.pool = Some(pool.clone());

        let input = JudgeInput {
            question: &query.question,
            bridge_id: &bridge.passage_id,
            entities: &entities,
            svo: &svo,
            pool: &pool,
            corpus: self.corpus,
        };
        let verdict = judge_pool(self.chat, &input, cfg.condition, cfg.chat.max_input_tokens)?;
        trace.judge = verdict;
        let fusion = fuse_and_rank(trace.judge.as_ref().map(|v| &v.scores), &svo_scores_with_floor(&pool), cfg.alpha)?;
        trace.r_at_5 = recall(&fusion.top5, query);
        trace.fusion = Some(fusion);
        Ok(())
    }

    /// Runs `queries` on a bounded worker pool. `sink` sees traces in input
    /// order on the calling thread, so it can write them without locking.
    pub fn run_batch(&self, queries: &[QueryRecord], sink: impl FnMut(RetrievalTrace) -> Result<()>) -> Result<BatchSummary> {
        ordered_map(queries, self.config.workers, |q| self.run_pipeline(q), sink)
    }

    /// Re-judges a stored trace under `condition`, keeping its pool,
    /// entities, SVO queries and alpha.
    pub fn rejudge(&self, trace: &RetrievalTrace, condition: JudgeCondition, query: Option<&QueryRecord>) -> RetrievalTrace {
        rejudge_trace(self.chat, self.corpus, trace, condition, self.config.chat.max_input_tokens, self.config.alpha, query)
    }

    pub fn rejudge_batch(
        &self,
        traces: &[RetrievalTrace],
        condition: JudgeCondition,
        queries: &[QueryRecord],
        sink: impl FnMut(RetrievalTrace) -> Result<()>,
    ) -> Result<BatchSummary> {
        rejudge_batch(self.config, self.corpus, self.chat, traces, condition, queries, sink)
    }
}

/// Re-judges stored traces on the worker pool, in input order. Needs only
/// passage text and a chat model.
pub fn rejudge_batch(
    config: &RunConfig,
    corpus: &Corpus,
    chat: &dyn ChatModel,
    traces: &[RetrievalTrace],
    condition: JudgeCondition,
    queries: &[QueryRecord],
    sink: impl FnMut(RetrievalTrace) -> Result<()>,
) -> Result<BatchSummary> {
    let by_id: BTreeMap<&str, &QueryRecord> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let budget = config.chat.max_input_tokens;
    ordered_map(
        traces,
        config.workers,
        |t| rejudge_trace(chat, corpus, t, condition, budget, config.alpha, by_id.get(t.query_id.as_str()).copied()),
        sink,
    )
}

fn recall(top5: &[String], query: &QueryRecord) -> Option<f64> {
    recall_at_k(top5, &query.gold_set(), TOP_K).ok()
}

/// Ablation helper: only the judge call (and hence fusion) changes. A trace
/// that failed before its pool was built is passed through with its error.
pub fn rejudge_trace(
    chat: &dyn ChatModel,
    corpus: &Corpus,
    trace: &RetrievalTrace,
    condition: JudgeCondition,
    budget: usize,
    default_alpha: f64,
    query: Option<&QueryRecord>,
) -> RetrievalTrace {
    let mut out = trace.clone();
    out.condition = condition;
    out.judge = None;
    out.fusion = None;
    out.r_at_5 = None;
    let result = (|| -> Result<()> {
        let (Some(bridge), Some(svo), Some(entities), Some(pool)) =
            (&trace.bridge, &trace.svo_queries, &trace.entities, &trace.pool)
        else {
            return Err(Error::InvalidArgument(format!(
                "trace `{}` is incomplete: {}",
                trace.query_id,
                trace.error.as_deref().unwrap_or("missing stages")
            )));
        };
        let input = JudgeInput {
            question: &trace.question,
            bridge_id: &bridge.passage_id,
            entities,
            svo,
            pool,
            corpus,
        };
        out.judge = judge_pool(chat, &input, condition, budget)?;
        let alpha = trace.alpha().unwrap_or(default_alpha);
        let fusion = fuse_and_rank(out.judge.as_ref().map(|v| &v.scores), &svo_scores_with_floor(pool), alpha)?;
        out.r_at_5 = query.and_then(|q| recall(&fusion.top5, q));
        out.fusion = Some(fusion);
        Ok(())
    })();
    out.error = result.err().map(|e| e.to_string());
    out
}

/// Maps `f` over `items` with `workers` threads and feeds results to `sink`
/// in input order.
fn ordered_map<T: Sync>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> RetrievalTrace + Sync,
    mut sink: impl FnMut(RetrievalTrace) -> Result<()>,
) -> Result<BatchSummary> {
    let next = AtomicUsize::new(0);
    let mut summary = BatchSummary::default();
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, RetrievalTrace)>();
        for _ in 0..workers.max(1).min(items.len().max(1)) {
            let tx = tx.clone();
            let (next, f) = (&next, &f);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                if tx.send((i, f(item))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<usize, RetrievalTrace> = BTreeMap::new();
        let mut emit = 0usize;
        for (i, trace) in rx {
            pending.insert(i, trace);
            while let Some(trace) = pending.remove(&emit) {
                summary.queries += 1;
                summary.errored += usize::from(!trace.is_ok());
                if let Err(e) = sink(trace) {
                    // stop handing out work; workers drain and exit
                    next.store(items.len(), Ordering::SeqCst);
                    return Err(e);
                }
                emit += 1;
            }
        }
        Ok(())
    })?;
    Ok(summary)
}
