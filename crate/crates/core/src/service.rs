//! Client for the inference service that hosts the neural sentence embedder
//! and NLI model.
//!
//! Wire contract (version 1, JSON over HTTP):
//!
//! * `POST /v1/embed` `{"texts": [..]}` -> `{"vectors": [[..]], "dim": d}`
//! * `POST /v1/nli` `{"pairs": [{"premise", "hypothesis"}]}` ->
//!   `{"scores": [{"refuted", "supported", "nei"}]}`
//! * `GET /v1/health` -> `{"status": "ok", "models": {"embed", "nli"}}`

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reader::{EntailmentScore, EntailmentScorer};
use crate::sentences::EmbeddingProvider;

pub const API_VERSION: &str = "v1";
pub const DEFAULT_BATCH: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
    pub dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NliPair {
    pub premise: String,
    pub hypothesis: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NliRequest {
    pub pairs: Vec<NliPair>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NliScore {
    pub refuted: f64,
    pub supported: f64,
    pub nei: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NliResponse {
    pub scores: Vec<NliScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(default)]
    pub models: Option<serde_json::Value>,
    #[serde(default)]
    pub error: Option<String>,
}

pub struct ServiceClient {
    base_url: String,
    batch_size: usize,
    agent: ureq::Agent,
}

impl std::fmt::Debug for ServiceClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceClient")
            .field("base_url", &self.base_url)
            .field("batch_size", &self.batch_size)
            .finish()
    }
}

impl ServiceClient {
    pub fn new(base_url: &str, timeout: Duration, batch_size: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            batch_size: batch_size.max(1),
            agent,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn url(&self, endpoint: &str) -> String {
        format!("{}/{API_VERSION}/{endpoint}", self.base_url)
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, endpoint: &str, body: &Req) -> Result<Resp> {
        let url = self.url(endpoint);
        let mut response = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| Error::Service(format!("POST {url}: {e}")))?;
        let status = response.status().as_u16();
        if status != 200 {
            let detail = response.body_mut().read_to_string().unwrap_or_default();
            return Err(Error::Service(format!("POST {url}: HTTP {status} {detail}")));
        }
        response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Service(format!("POST {url}: bad response: {e}")))
    }

    pub fn health(&self) -> Result<Health> {
        let url = self.url("health");
        let mut response = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| Error::Service(format!("GET {url}: {e}")))?;
        let status = response.status().as_u16();
        let health: Health = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Service(format!("GET {url}: bad response: {e}")))?;
        if status != 200 {
            return Err(Error::Service(format!(
                "service not ready (HTTP {status}, status {:?}{})",
                health.status,
                health.error.map(|e| format!(", error: {e}")).unwrap_or_default()
            )));
        }
        Ok(health)
    }
}

impl EmbeddingProvider for ServiceClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        let mut dim = None;
        for chunk in texts.chunks(self.batch_size) {
            let response: EmbedResponse = self.post(
                "embed",
                &EmbedRequest {
                    texts: chunk.to_vec(),
                },
            )?;
            if response.vectors.len() != chunk.len() {
                return Err(Error::Service(format!(
                    "embed returned {} vectors for {} texts",
                    response.vectors.len(),
                    chunk.len()
                )));
            }
            if response.vectors.iter().any(|v| v.len() != response.dim)
                || dim.is_some_and(|d| d != response.dim)
            {
                return Err(Error::Service("embed returned vectors of inconsistent dimension".into()));
            }
            dim = Some(response.dim);
            out.extend(response.vectors);
        }
        Ok(out)
    }
}

impl EntailmentScorer for ServiceClient {
    fn score(&self, premise: &str, hypothesis: &str) -> Result<EntailmentScore> {
        self.score_batch(&[(premise.to_string(), hypothesis.to_string())])?
            .pop()
            .ok_or_else(|| Error::Service("nli returned no scores".into()))
    }

    fn score_batch(&self, pairs: &[(String, String)]) -> Result<Vec<EntailmentScore>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(self.batch_size) {
            let request = NliRequest {
                pairs: chunk
                    .iter()
                    .map(|(p, h)| NliPair {
                        premise: p.clone(),
                        hypothesis: h.clone(),
                    })
                    .collect(),
            };
            let response: NliResponse = self.post("nli", &request)?;
            if response.scores.len() != chunk.len() {
                return Err(Error::Service(format!(
                    "nli returned {} scores for {} pairs",
                    response.scores.len(),
                    chunk.len()
                )));
            }
            for s in response.scores {
                out.push(
                    EntailmentScore::new(s.refuted, s.supported, s.nei)
                        .map_err(|e| Error::Service(format!("nli score invalid: {e}")))?,
                );
            }
        }
        Ok(out)
    }
}
