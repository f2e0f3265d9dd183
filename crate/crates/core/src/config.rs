//! Application configuration: flat dotted keys in TOML syntax, overridable
//! with `--set key=value`. Precedence is flags > file > defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};
use toml::Value;

use crate::error::{Error, Result};
use crate::filter::FetchOptions;
use crate::index::{Bm25Params, IndexFields, IndexOptions};
use crate::pipeline::ReaderOptions;
use crate::reader::RetrievalConfig;
use crate::tokenize::TokenizerOptions;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Backend {
    Service,
    #[default]
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub corpus_path: PathBuf,
    pub index_path: PathBuf,
    pub index: IndexOptions,
    pub retrieval: RetrievalConfig,
    pub reader_backend: Backend,
    pub reader: ReaderOptions,
    pub service_url: String,
    pub service_timeout_ms: u64,
    pub service_batch_size: usize,
    pub citations_cache: PathBuf,
    pub citations_rate: f64,
    pub citations_api_url: String,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            corpus_path: PathBuf::from("data/corpus"),
            index_path: PathBuf::from("data/index.bin"),
            index: IndexOptions::default(),
            retrieval: RetrievalConfig::default(),
            reader_backend: Backend::Fallback,
            reader: ReaderOptions::default(),
            service_url: "http://127.0.0.1:8000".into(),
            service_timeout_ms: 30_000,
            service_batch_size: crate::service::DEFAULT_BATCH,
            citations_cache: PathBuf::from("data/citations.jsonl"),
            citations_rate: 1.0,
            citations_api_url: crate::filter::SEMANTIC_SCHOLAR_URL.into(),
        }
    }
}

fn bad(key: &str, value: &Value, expected: &str) -> Error {
    Error::Config(format!("{key}: expected {expected}, got {value}"))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| bad(key, v, "a string"))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(key, v, "a boolean"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, v, "a number")),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| bad(key, v, "a non-negative integer"))
}

fn is_unset(v: &Value) -> bool {
    v.as_str().is_some_and(|s| s == "none" || s.is_empty())
}

fn parse_enum<T: std::str::FromStr<Err = String>>(key: &str, v: &Value) -> Result<T> {
    as_str(key, v)?
        .parse()
        .map_err(|e: String| Error::Config(format!("{key}: {e}")))
}

impl AppConfig {
    pub const KEYS: &'static [&'static str] = &[
        "bm25.b",
        "bm25.k1",
        "citations.api_url",
        "citations.cache",
        "citations.rate",
        "corpus.path",
        "index.fields",
        "index.path",
        "index.stem",
        "index.stopwords",
        "reader.backend",
        "reader.max_evidence_tokens",
        "reader.min_confidence",
        "retrieval.filter_placement",
        "retrieval.min_citations",
        "retrieval.min_year",
        "retrieval.mode",
        "retrieval.pool_size",
        "retrieval.top_j",
        "retrieval.top_k",
        "retrieval.vote_scheme",
        "service.batch_size",
        "service.timeout_ms",
        "service.url",
    ];

    /// Defaults, then `file` (if any), then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            config.merge_toml(&text)?;
        }
        for item in overrides {
            config.apply_override(item)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &Value::Table(table), &mut flat);
        for (key, value) in flat {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// `key=value`, where value is a TOML literal or a bare string.
    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set(key.trim(), &value)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "corpus.path" => self.corpus_path = as_str(key, v)?.into(),
            "index.path" => self.index_path = as_str(key, v)?.into(),
            "index.fields" => self.index.fields = parse_enum::<IndexFields>(key, v)?,
            "index.stopwords" => self.index.tokenizer.stopwords = as_bool(key, v)?,
            "index.stem" => self.index.tokenizer.stem = as_bool(key, v)?,
            "bm25.k1" => self.index.params.k1 = as_f64(key, v)?,
            "bm25.b" => self.index.params.b = as_f64(key, v)?,
            "retrieval.mode" => self.retrieval.mode = parse_enum(key, v)?,
            "retrieval.top_k" => self.retrieval.top_k = as_usize(key, v)?,
            "retrieval.top_j" => self.retrieval.top_j = as_usize(key, v)?,
            "retrieval.pool_size" => self.retrieval.pool_size = as_usize(key, v)?,
            "retrieval.min_year" => {
                self.retrieval.filter.min_year = if is_unset(v) {
                    None
                } else {
                    Some(
                        v.as_integer()
                            .and_then(|i| i32::try_from(i).ok())
                            .ok_or_else(|| bad(key, v, "a year"))?,
                    )
                }
            }
            "retrieval.min_citations" => {
                self.retrieval.filter.min_citations = if is_unset(v) {
                    None
                } else {
                    Some(as_usize(key, v)? as u64)
                }
            }
            "retrieval.filter_placement" => self.retrieval.filter_placement = parse_enum(key, v)?,
            "retrieval.vote_scheme" => self.retrieval.vote_scheme = parse_enum(key, v)?,
            "reader.backend" => {
                self.reader_backend = match as_str(key, v)? {
                    "service" => Backend::Service,
                    "fallback" => Backend::Fallback,
                    other => {
                        return Err(Error::Config(format!(
                            "{key}: unknown backend {other:?} (expected service|fallback)"
                        )))
                    }
                }
            }
            "reader.min_confidence" => {
                self.reader.min_confidence = if is_unset(v) { None } else { Some(as_f64(key, v)?) }
            }
            "reader.max_evidence_tokens" => self.reader.max_evidence_tokens = as_usize(key, v)?,
            "service.url" => self.service_url = as_str(key, v)?.to_string(),
            "service.timeout_ms" => self.service_timeout_ms = as_usize(key, v)? as u64,
            "service.batch_size" => self.service_batch_size = as_usize(key, v)?,
            "citations.cache" => self.citations_cache = as_str(key, v)?.into(),
            "citations.rate" => self.citations_rate = as_f64(key, v)?,
            "citations.api_url" => self.citations_api_url = as_str(key, v)?.to_string(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.retrieval.validate()?;
        let Bm25Params { k1, b } = self.index.params;
        if !(k1.is_finite() && k1 >= 0.0) {
            return Err(Error::Config(format!("bm25.k1 must be >= 0, got {k1}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::Config(format!("bm25.b must be in [0, 1], got {b}")));
        }
        if let Some(c) = self.reader.min_confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config(format!("reader.min_confidence must be in [0, 1], got {c}")));
            }
        }
        if self.reader.max_evidence_tokens == 0 {
            return Err(Error::Config("reader.max_evidence_tokens must be at least 1".into()));
        }
        if self.service_batch_size == 0 {
            return Err(Error::Config("service.batch_size must be at least 1".into()));
        }
        if !(self.citations_rate.is_finite() && self.citations_rate >= 0.0) {
            return Err(Error::Config(format!("citations.rate must be >= 0, got {}", self.citations_rate)));
        }
        Ok(())
    }

    /// Sorted `key = value` lines; unset optional keys are omitted.
    pub fn to_canonical_toml(&self) -> String {
        let path = |p: &Path| Value::String(p.to_string_lossy().into_owned());
        let s = |x: &str| Value::String(x.to_string());
        let r = &self.retrieval;
        let mut entries: Vec<(&str, Value)> = vec![
            ("bm25.b", Value::Float(self.index.params.b)),
            ("bm25.k1", Value::Float(self.index.params.k1)),
            ("citations.api_url", s(&self.citations_api_url)),
            ("citations.cache", path(&self.citations_cache)),
            ("citations.rate", Value::Float(self.citations_rate)),
            ("corpus.path", path(&self.corpus_path)),
            (
                "index.fields",
                s(match self.index.fields {
                    IndexFields::TitleAbstract => "title_abstract",
                    IndexFields::Abstract => "abstract",
                }),
            ),
            ("index.path", path(&self.index_path)),
            ("index.stem", Value::Boolean(self.index.tokenizer.stem)),
            ("index.stopwords", Value::Boolean(self.index.tokenizer.stopwords)),
            (
                "reader.backend",
                s(match self.reader_backend {
                    Backend::Service => "service",
                    Backend::Fallback => "fallback",
                }),
            ),
            ("reader.max_evidence_tokens", Value::Integer(self.reader.max_evidence_tokens as i64)),
            (
                "retrieval.filter_placement",
                Value::try_from(r.filter_placement).expect("enum serializes"),
            ),
            ("retrieval.mode", Value::try_from(r.mode).expect("enum serializes")),
            ("retrieval.pool_size", Value::Integer(r.pool_size as i64)),
            ("retrieval.top_j", Value::Integer(r.top_j as i64)),
            ("retrieval.top_k", Value::Integer(r.top_k as i64)),
            ("retrieval.vote_scheme", Value::try_from(r.vote_scheme).expect("enum serializes")),
            ("service.batch_size", Value::Integer(self.service_batch_size as i64)),
            ("service.timeout_ms", Value::Integer(self.service_timeout_ms as i64)),
            ("service.url", s(&self.service_url)),
        ];
        if let Some(c) = self.reader.min_confidence {
            entries.push(("reader.min_confidence", Value::Float(c)));
        }
        if let Some(y) = r.filter.min_year {
            entries.push(("retrieval.min_year", Value::Integer(y as i64)));
        }
        if let Some(c) = r.filter.min_citations {
            entries.push(("retrieval.min_citations", Value::Integer(c as i64)));
        }
        entries.sort_by(|a, b| a.0.cmp(b.0));
        entries
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_toml().as_bytes()))
    }

    pub fn service_timeout(&self) -> Duration {
        Duration::from_millis(self.service_timeout_ms)
    }

    pub fn fetch_options(&self) -> FetchOptions {
        FetchOptions {
            rate: self.citations_rate,
            ..FetchOptions::default()
        }
    }

    pub fn tokenizer(&self) -> TokenizerOptions {
        self.index.tokenizer
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}
