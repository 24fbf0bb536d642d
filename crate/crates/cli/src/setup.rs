//! Configuration layering, backend construction and corpus preparation.

use std::path::{Path, PathBuf};

use chainjudge_core::backend::{HashEmbedder, HttpEmbedder, OpenAiChat, RuleChat};
use chainjudge_core::corpus::{load_corpus, load_embedding_cache, load_queryset, save_embedding_cache};
use chainjudge_core::{ChatModel, Corpus, Embedder, QueryRecord, RunConfig};
use clap::Args;

use crate::Failure;

/// Flags shared by every verb that touches configuration or backends.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON file with run settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Use the deterministic in-process backends instead of HTTP servers.
    #[arg(long, global = true)]
    pub mock: bool,

    /// Queries processed concurrently.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[arg(long, global = true, env = "CHAINJUDGE_EMBED_URL")]
    pub embed_url: Option<String>,

    #[arg(long, global = true, env = "CHAINJUDGE_EMBED_MODEL")]
    pub embed_model: Option<String>,

    #[arg(long, global = true, env = "CHAINJUDGE_CHAT_URL")]
    pub chat_url: Option<String>,

    #[arg(long, global = true, env = "CHAINJUDGE_CHAT_MODEL")]
    pub chat_model: Option<String>,

    /// Bearer token sent to both servers.
    #[arg(long, global = true, env = "CHAINJUDGE_API_KEY", hide_env_values = true)]
    pub api_key: Option<String>,
}

impl ConfigArgs {
    /// Defaults, then the config file, then flags and environment.
    pub fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(url) = &self.embed_url {
            cfg.embedder.base_url = url.clone();
        }
        if let Some(m) = &self.embed_model {
            cfg.embedder.model_name = m.clone();
        }
        if let Some(url) = &self.chat_url {
            cfg.chat.base_url = url.clone();
        }
        if let Some(m) = &self.chat_model {
            cfg.chat.model_name = m.clone();
        }
        if let Some(key) = &self.api_key {
            cfg.embedder.api_key = Some(key.clone());
            cfg.chat.api_key = Some(key.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn embedder(&self, cfg: &RunConfig) -> Result<Box<dyn Embedder>, Failure> {
        if self.mock {
            return Ok(Box::new(HashEmbedder::new(cfg.mock_dim)));
        }
        if cfg.embedder.model_name.is_empty() {
            return Err(Failure::Config("no embedding model set (--embed-model or CHAINJUDGE_EMBED_MODEL)".into()));
        }
        let e = HttpEmbedder::new(cfg.embedder.clone()).map_err(|e| Failure::Config(e.to_string()))?;
        Ok(Box::new(e))
    }

    pub fn chat(&self, cfg: &RunConfig) -> Result<Box<dyn ChatModel>, Failure> {
        if self.mock {
            return Ok(Box::new(RuleChat::with_budget(cfg.chat.max_input_tokens)));
        }
        if cfg.chat.model_name.is_empty() {
            return Err(Failure::Config("no chat model set (--chat-model or CHAINJUDGE_CHAT_MODEL)".into()));
        }
        let c = OpenAiChat::new(cfg.chat.clone()).map_err(|e| Failure::Config(e.to_string()))?;
        Ok(Box::new(c))
    }
}

/// `corpus.jsonl` caches its vectors in `corpus.emb.jsonl` next to it.
pub fn default_cache_path(corpus: &Path) -> PathBuf {
    let stem = corpus.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    corpus.with_file_name(format!("{stem}.emb.jsonl"))
}

/// Loads a deduplicated corpus without embeddings.
pub fn corpus_text(path: &Path) -> Result<Corpus, Failure> {
    let (corpus, stats) = load_corpus(path, true)?;
    log::info!("loaded {} passages from {} ({stats:?})", corpus.len(), path.display());
    Ok(corpus)
}

/// Loads a corpus and fills in its vectors from the cache, embedding (and
/// caching) whatever is missing.
pub fn embedded_corpus(
    path: &Path,
    cache: Option<&Path>,
    embedder: &dyn Embedder,
    batch: usize,
) -> Result<Corpus, Failure> {
    let mut corpus = corpus_text(path)?;
    let cache = cache.map(Path::to_path_buf).unwrap_or_else(|| default_cache_path(path));
    let id = embedder.identifier();
    let cached = load_embedding_cache(&cache, &mut corpus, &id, None)?;
    let fresh = corpus.embed_missing(embedder, batch)?;
    log::info!("{cached} vectors from cache, {fresh} embedded");
    if fresh > 0 {
        save_embedding_cache(&cache, &corpus, &id)?;
    }
    Ok(corpus)
}

pub fn queries(path: &Path, corpus: Option<&Corpus>) -> Result<Vec<QueryRecord>, Failure> {
    Ok(load_queryset(path, corpus)?)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}
