//! Concept extraction through an external language-model service, with a
//! content-addressed on-disk cache and pluggable embedders.
//!
//! Wire format, one POST per text:
//!
//! ```text
//! request:  {"text": str, "schema": ["functions", "solutions", "applications"],
//!            "temperature": 0, "model": str, "prompt": str}
//! response: {"functions": [str], "solutions": [str], "applications": [str]}
//! ```
//!
//! The API key, if the service needs one, is read from the environment
//! variable named in the config and sent as a bearer token.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Category, Concept, ConceptSet, Embedding};

/// Bumped whenever [`PROMPT`] changes; part of the cache key.
pub const PROMPT_VERSION: &str = "fsa-v1";

pub const PROMPT: &str = "Read the title and abstract below. List, as short verb or noun phrases: \
the functions (what the invention or study aims to achieve), the solutions (the technical means \
used to achieve it) and the applications (the practical domains where it is used). Return JSON \
with the keys functions, solutions and applications, each a list of strings. Use an empty list \
when a category is not described.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub cache_dir: PathBuf,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    /// Concurrent requests in flight.
    pub concurrency: usize,
    pub timeout_secs: u64,
    /// Serve from the cache only; a miss is an error.
    pub offline: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            endpoint: "http://localhost:8080/extract".into(),
            model_name: "concept-extractor".into(),
            temperature: 0.0,
            max_retries: 3,
            cache_dir: PathBuf::from("cache/concepts"),
            api_key_env: "PATENT_SDG_API_KEY".into(),
            concurrency: 4,
            timeout_secs: 60,
            offline: true,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::config("extraction.temperature", "must be >= 0"));
        }
        if self.max_retries > 10 {
            return Err(Error::config("extraction.max_retries", "must be <= 10"));
        }
        if self.concurrency == 0 {
            return Err(Error::config("extraction.concurrency", "must be positive"));
        }
        Ok(())
    }
}

/// Concept phrases before embedding; also the service response body.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptTexts {
    pub functions: Vec<String>,
    pub solutions: Vec<String>,
    pub applications: Vec<String>,
}

impl ConceptTexts {
    pub fn get(&self, category: Category) -> &[String] {
        match category {
            Category::Function => &self.functions,
            Category::Solution => &self.solutions,
            Category::Application => &self.applications,
        }
    }

    fn cleaned(mut self) -> Self {
        for list in [&mut self.functions, &mut self.solutions, &mut self.applications] {
            list.iter_mut().for_each(|s| *s = s.trim().to_string());
            list.retain(|s| !s.is_empty());
        }
        self
    }
}

pub trait ConceptService: Sync {
    fn extract(&self, text: &str) -> Result<ConceptTexts>;
}

#[derive(Serialize)]
struct Request<'a> {
    text: &'a str,
    schema: [&'static str; 3],
    temperature: f64,
    model: &'a str,
    prompt: &'static str,
}

/// Blocking HTTP client for the extraction service.
pub struct HttpService {
    client: reqwest::blocking::Client,
    config: ExtractionConfig,
    api_key: Option<String>,
}

impl HttpService {
    pub fn new(config: &ExtractionConfig) -> Result<Self> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Extraction(format!("building HTTP client: {e}")))?;
        Ok(HttpService {
            client,
            config: config.clone(),
            api_key: std::env::var(&config.api_key_env).ok(),
        })
    }

    fn attempt(&self, text: &str) -> std::result::Result<String, String> {
        let body = Request {
            text,
            schema: ["functions", "solutions", "applications"],
            temperature: self.config.temperature,
            model: &self.config.model_name,
            prompt: PROMPT,
        };
        let mut req = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        let raw = resp.text().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("HTTP {status}: {raw}"));
        }
        Ok(raw)
    }
}

impl ConceptService for HttpService {
    fn extract(&self, text: &str) -> Result<ConceptTexts> {
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 << (attempt - 1).min(6)));
            }
            match self.attempt(text) {
                Ok(raw) => {
                    return serde_json::from_str::<ConceptTexts>(&raw)
                        .map(ConceptTexts::cleaned)
                        .map_err(|e| Error::MalformedResponse {
                            message: e.to_string(),
                            raw,
                        });
                }
                Err(e) => {
                    log::warn!("extraction attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(Error::Extraction(format!(
            "service failed after {} attempts: {last}",
            self.config.max_retries + 1
        )))
    }
}

/// Hex SHA-256 of text, model name and prompt version.
pub fn cache_key(text: &str, model_name: &str) -> String {
    let mut h = Sha256::new();
    for part in [text, model_name, PROMPT_VERSION] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes via a unique temporary file and a rename, so readers never see a
/// partial file and concurrent writers of the same content are harmless.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out"),
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

/// Cache-first extraction. Without a service, misses are errors.
pub struct Extractor<'a> {
    config: ExtractionConfig,
    service: Option<&'a dyn ConceptService>,
}

impl<'a> Extractor<'a> {
    pub fn new(config: &ExtractionConfig, service: Option<&'a dyn ConceptService>) -> Result<Self> {
        config.validate()?;
        Ok(Extractor {
            config: config.clone(),
            service: if config.offline { None } else { service },
        })
    }

    fn cache_path(&self, text: &str) -> PathBuf {
        self.config
            .cache_dir
            .join(format!("{}.json", cache_key(text, &self.config.model_name)))
    }

    pub fn cached(&self, text: &str) -> Result<Option<ConceptTexts>> {
        let path = self.cache_path(text);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| Error::MalformedResponse {
                message: format!("corrupt cache entry {}: {e}", path.display()),
                raw: String::from_utf8_lossy(&bytes).into_owned(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(format!("reading {}", path.display()), e)),
        }
    }

    /// Stores concepts for `text`, as if the service had returned them.
    pub fn store(&self, text: &str, concepts: &ConceptTexts) -> Result<()> {
        write_atomic(&self.cache_path(text), &serde_json::to_vec(concepts)?)
    }

    pub fn extract(&self, text: &str) -> Result<ConceptTexts> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot extract concepts from empty text"));
        }
        if let Some(hit) = self.cached(text)? {
            return Ok(hit);
        }
        let service = self.service.ok_or_else(|| {
            Error::Extraction(format!(
                "no cached concepts for text starting `{}` and extraction is offline",
                text.chars().take(40).collect::<String>()
            ))
        })?;
        let concepts = service.extract(text)?;
        self.store(text, &concepts)?;
        Ok(concepts)
    }

    /// Extracts every text with at most `concurrency` requests in flight.
    /// Results keep input order.
    pub fn extract_all(&self, texts: &[String]) -> Result<Vec<ConceptTexts>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.concurrency)
            .build()
            .map_err(|e| Error::Extraction(e.to_string()))?;
        pool.install(|| texts.par_iter().map(|t| self.extract(t)).collect())
    }
}

pub trait Embedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Serves precomputed embeddings keyed by exact concept text.
pub struct LookupEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct LookupRow {
    text: String,
    embedding: Vec<f64>,
}

impl LookupEmbedder {
    pub fn new(table: HashMap<String, Vec<f64>>) -> Result<Self> {
        let dim = table.values().next().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::invalid("embedding table is empty"));
        }
        if let Some((text, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::invalid(format!(
                "embedding for `{text}` has {} components, expected {dim}",
                v.len()
            )));
        }
        Ok(LookupEmbedder { dim, table })
    }

    /// Reads `{"text", "embedding"}` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<LookupRow> = crate::model::read_jsonl(path)?;
        Self::new(rows.into_iter().map(|r| (r.text, r.embedding)).collect())
    }
}

impl Embedder for LookupEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("no embedding for concept `{t}`")))
            })
            .collect()
    }
}

/// Signed feature hashing of lowercased tokens, for offline runs without an
/// encoder model. Texts sharing words get positive cosine.
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(HashEmbedder { dim })
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; self.dim];
                for token in crate::evaluation::tokenize(t) {
                    let digest = Sha256::digest(token.as_bytes());
                    let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
                    let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
                    v[(bucket % self.dim as u64) as usize] += sign;
                }
                if v.iter().all(|&x| x == 0.0) {
                    v[0] = 1.0;
                }
                v
            })
            .collect())
    }
}

/// Pairs every concept text with its embedding.
pub fn embed_concepts(texts: &ConceptTexts, embedder: &dyn Embedder, expected_dim: usize) -> Result<ConceptSet> {
    if embedder.dim() != expected_dim {
        return Err(Error::DimensionMismatch {
            expected: expected_dim,
            actual: embedder.dim(),
        });
    }
    let mut out = ConceptSet::default();
    for category in Category::ALL {
        let list = texts.get(category);
        if list.is_empty() {
            continue;
        }
        let vectors = embedder.embed(list)?;
        if vectors.len() != list.len() {
            return Err(Error::invalid("embedder returned the wrong number of vectors"));
        }
        for (text, v) in list.iter().zip(vectors) {
            if v.len() != expected_dim {
                return Err(Error::DimensionMismatch {
                    expected: expected_dim,
                    actual: v.len(),
                });
            }
            out.get_mut(category).push(Concept {
                text: text.clone(),
                embedding: Embedding::new(v)?,
            });
        }
    }
    Ok(out)
}
