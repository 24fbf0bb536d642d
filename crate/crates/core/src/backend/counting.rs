//! Instrumented wrappers that count calls without changing behavior.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::{BackendError, ChatModel, ChatRequest, Embedder};
use crate::corpus::{RankedHit, VectorIndex};
use crate::error::Result;

pub struct CountingChat<C> {
    inner: C,
    calls: AtomicUsize,
}

impl<C: ChatModel> CountingChat<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<C: ChatModel> ChatModel for CountingChat<C> {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.chat(req)
    }
}

/// Counts embedding calls and the number of texts embedded.
pub struct CountingEmbedder<E> {
    inner: E,
    calls: AtomicUsize,
    texts: AtomicUsize,
}

impl<E: Embedder> CountingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            texts: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn texts(&self) -> usize {
        self.texts.load(Ordering::SeqCst)
    }
}

impl<E: Embedder> Embedder for CountingEmbedder<E> {
    fn identifier(&self) -> String {
        self.inner.identifier()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.texts.fetch_add(texts.len(), Ordering::SeqCst);
        self.inner.embed_texts(texts)
    }
}

/// Counts retrieval passes (searches) against an index.
pub struct CountingIndex<'a, I: ?Sized> {
    inner: &'a I,
    searches: AtomicUsize,
}

impl<'a, I: VectorIndex + ?Sized> CountingIndex<'a, I> {
    pub fn new(inner: &'a I) -> Self {
        Self {
            inner,
            searches: AtomicUsize::new(0),
        }
    }

    pub fn searches(&self) -> usize {
        self.searches.load(Ordering::SeqCst)
    }
}

impl<I: VectorIndex + ?Sized> VectorIndex for CountingIndex<'_, I> {
    fn search(&self, query: &[f64], k: usize) -> Result<Vec<RankedHit>> {
        self.searches.fetch_add(1, Ordering::SeqCst);
        self.inner.search(query, k)
    }
}
