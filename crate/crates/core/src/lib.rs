//! Training-free, graph-free multi-hop passage retrieval.
//!
//! A query is answered in three stages:
//!
//! 1. hop-1 dense retrieval picks a *bridge* passage,
//! 2. the bridge conditions subject-verb-object query expansion and a
//!    dual-entity lookup, which together assemble a candidate pool,
//! 3. an LLM judge scores every pool member against the question *and* the
//!    bridge, and percentile-rank fusion with the expansion similarity
//!    produces the final top-5.
//!
//! Every intermediate decision lands in a [`trace::RetrievalTrace`], so
//! evaluation, fusion-weight tuning and the mechanism experiments in
//! [`mechanism`] run offline over cached traces.

pub mod backend;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod judge;
pub mod mechanism;
pub mod pipeline;
pub mod prompts;
pub mod runner;
pub mod stats;
pub mod synth;
pub mod text;
pub mod trace;

pub use backend::{BackendConfig, BackendError, ChatModel, ChatRequest, Embedder};
pub use config::RunConfig;
pub use corpus::{cosine, top_k, Corpus, Passage, QueryRecord, RankedHit, Subtype, VectorIndex};
pub use error::{Error, Result};
pub use fusion::{fuse_and_rank, pit_rank, FusedRanking};
pub use judge::{JudgeCondition, JudgeVerdict, SubstituteSource};
pub use pipeline::{Bridge, CandidatePool, EntityPair, PoolEntry, Source, SvoQueries};
pub use runner::Engine;
pub use trace::RetrievalTrace;
