//! Mention encoders: turn a context with the mention wrapped in `[ENT]`
//! markers into a dense vector of the index dimensionality.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{join_url, HttpClient, HttpError, InflightLimit};
use crate::index::{EmbeddingMatrix, IndexError};
use crate::retry::RetryPolicy;

pub const ENT_MARKER: &str = "[ENT]";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("marked text must contain exactly two [ENT] markers, found {0}")]
    MarkerCount(usize),
    #[error("marked mention is empty")]
    EmptyMention,
    #[error("encoder transport failure: {0}")]
    Transport(String),
    #[error("encoder endpoint returned HTTP status {status}")]
    Status { status: u16 },
    #[error("encoder returned {got} values, expected dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("encoder returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("encoder returned a non-finite value")]
    NonFinite,
    #[error("malformed encoder response: {0}")]
    Protocol(String),
    #[error("no precomputed vector for key {0:?}")]
    MissingKey(String),
    #[error("batch element {index} failed: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<EncoderError>,
    },
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Index(#[from] IndexError),
}

impl From<HttpError> for EncoderError {
    fn from(e: HttpError) -> Self {
        match e {
            HttpError::Status { status, .. } => EncoderError::Status { status },
            HttpError::Decode(m) => EncoderError::Protocol(m),
            other => EncoderError::Transport(other.to_string()),
        }
    }
}

/// Context text with the mention delimited by two `[ENT]` markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedText {
    text: String,
    language: String,
    /// Lookup key for precomputed encoders (typically the mention id).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key: Option<String>,
}

impl MarkedText {
    pub fn new(text: impl Into<String>, language: impl Into<String>) -> Result<Self, EncoderError> {
        let text = text.into();
        let markers = text.matches(ENT_MARKER).count();
        if markers != 2 {
            return Err(EncoderError::MarkerCount(markers));
        }
        let marked = Self {
            text,
            language: language.into(),
            key: None,
        };
        if marked.mention().trim().is_empty() {
            return Err(EncoderError::EmptyMention);
        }
        Ok(marked)
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.key = Some(key.into());
        self
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn key(&self) -> Option<&str> {
        self.key.as_deref()
    }

    /// The substring between the two markers, untrimmed.
    pub fn mention(&self) -> &str {
        let first = self.text.find(ENT_MARKER).expect("validated");
        let rest = &self.text[first + ENT_MARKER.len()..];
        let second = rest.find(ENT_MARKER).expect("validated");
        &rest[..second]
    }
}

pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, marked: &MarkedText) -> Result<Vec<f32>, EncoderError>;

    /// Elementwise [`Encoder::encode`]; output order matches input order.
    fn encode_batch(&self, items: &[MarkedText]) -> Result<Vec<Vec<f32>>, EncoderError> {
        items
            .iter()
            .enumerate()
            .map(|(index, m)| {
                self.encode(m).map_err(|e| EncoderError::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

pub(crate) fn check_vector(v: &[f32], dim: usize) -> Result<(), EncoderError> {
    if v.len() != dim {
        return Err(EncoderError::DimMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EncoderError::NonFinite);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Http,
    Precomputed,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backend: EncoderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub dim: usize,
    /// Vector and key files for the precomputed backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vectors: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keys: Option<PathBuf>,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
}

fn default_inflight() -> usize {
    4
}

impl EncoderConfig {
    pub fn mock(dim: usize) -> Self {
        Self {
            backend: EncoderKind::Mock,
            endpoint: None,
            dim,
            vectors: None,
            keys: None,
            max_inflight: default_inflight(),
        }
    }

    pub fn http(endpoint: impl Into<String>, dim: usize) -> Self {
        Self {
            backend: EncoderKind::Http,
            endpoint: Some(endpoint.into()),
            ..Self::mock(dim)
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.dim == 0 {
            return Err(EncoderError::Config("dim must be at least 1".into()));
        }
        match self.backend {
            EncoderKind::Http if self.endpoint.is_none() => Err(EncoderError::Config(
                "http backend requires an endpoint".into(),
            )),
            EncoderKind::Precomputed if self.vectors.is_none() || self.keys.is_none() => Err(
                EncoderError::Config("precomputed backend requires vectors and keys files".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Encoder>, EncoderError> {
        self.validate()?;
        Ok(match self.backend {
            EncoderKind::Mock => Box::new(crate::mock::MockEncoder::new(self.dim)),
            EncoderKind::Http => Box::new(HttpEncoder::new(
                self.endpoint.as_deref().unwrap(),
                self.dim,
                self.max_inflight,
                RetryPolicy::default(),
            )?),
            EncoderKind::Precomputed => {
                let enc = PrecomputedEncoder::load(
                    self.vectors.as_deref().unwrap(),
                    self.keys.as_deref().unwrap(),
                )?;
                if enc.dim() != self.dim {
                    return Err(EncoderError::DimMismatch {
                        expected: self.dim,
                        got: enc.dim(),
                    });
                }
                Box::new(enc)
            }
        })
    }
}

#[derive(Debug, Serialize)]
struct EmbedItem<'a> {
    text: &'a str,
    language: &'a str,
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    items: Vec<EmbedItem<'a>>,
    dim: usize,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
    dim: usize,
}

/// Client for the `POST {endpoint}/embed` wire protocol.
pub struct HttpEncoder {
    url: String,
    dim: usize,
    client: HttpClient,
    inflight: InflightLimit,
    max_batch: usize,
}

impl HttpEncoder {
    pub fn new(
        endpoint: &str,
        dim: usize,
        max_inflight: usize,
        retry: RetryPolicy,
    ) -> Result<Self, EncoderError> {
        let client = HttpClient::new(Duration::from_secs(120), retry)?;
        Ok(Self {
            url: join_url(endpoint, "embed"),
            dim,
            client,
            inflight: InflightLimit::new(max_inflight),
            max_batch: 32,
        })
    }

    fn request(&self, items: &[MarkedText]) -> Result<Vec<Vec<f32>>, EncoderError> {
        let body = EmbedRequest {
            items: items
                .iter()
                .map(|m| EmbedItem {
                    text: m.text(),
                    language: m.language(),
                })
                .collect(),
            dim: self.dim,
        };
        let resp: EmbedResponse = {
            let _permit = self.inflight.acquire();
            self.client.post_json(&self.url, &body).0?
        };
        if resp.dim != self.dim {
            return Err(EncoderError::DimMismatch {
                expected: self.dim,
                got: resp.dim,
            });
        }
        if resp.vectors.len() != items.len() {
            return Err(EncoderError::CountMismatch {
                expected: items.len(),
                got: resp.vectors.len(),
            });
        }
        for v in &resp.vectors {
            check_vector(v, self.dim)?;
        }
        Ok(resp.vectors)
    }
}

impl Encoder for HttpEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, marked: &MarkedText) -> Result<Vec<f32>, EncoderError> {
        Ok(self.request(std::slice::from_ref(marked))?.remove(0))
    }

    fn encode_batch(&self, items: &[MarkedText]) -> Result<Vec<Vec<f32>>, EncoderError> {
        let mut out = Vec::with_capacity(items.len());
        for (chunk_no, chunk) in items.chunks(self.max_batch).enumerate() {
            let vectors = self.request(chunk).map_err(|e| EncoderError::Batch {
                index: chunk_no * self.max_batch,
                source: Box::new(e),
            })?;
            out.extend(vectors);
        }
        Ok(out)
    }
}

/// Serves vectors stored ahead of time, keyed by mention key (or the marked text
/// when no key is set). Key files use the ids-file format.
pub struct PrecomputedEncoder {
    matrix: EmbeddingMatrix,
    rows: HashMap<String, usize>,
}

impl PrecomputedEncoder {
    pub fn new(matrix: EmbeddingMatrix) -> Self {
        let rows = matrix
            .ids()
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();
        Self { matrix, rows }
    }

    pub fn load(vectors: &Path, keys: &Path) -> Result<Self, EncoderError> {
        Ok(Self::new(EmbeddingMatrix::load(vectors, keys)?))
    }
}

impl Encoder for PrecomputedEncoder {
    fn dim(&self) -> usize {
        self.matrix.dim()
    }

    fn encode(&self, marked: &MarkedText) -> Result<Vec<f32>, EncoderError> {
        let key = marked.key().unwrap_or(marked.text());
        let row = self
            .rows
            .get(key)
            .ok_or_else(|| EncoderError::MissingKey(key.to_string()))?;
        Ok(self.matrix.row(*row).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marked_text_validation() {
        let m = MarkedText::new("see [ENT] Paris [ENT] today", "fr").unwrap();
        assert_eq!(m.mention(), " Paris ");
        assert!(matches!(
            MarkedText::new("see Paris today", "fr"),
            Err(EncoderError::MarkerCount(0))
        ));
        assert!(matches!(
            MarkedText::new("[ENT] a [ENT] b [ENT]", "fr"),
            Err(EncoderError::MarkerCount(3))
        ));
        assert!(matches!(
            MarkedText::new("x [ENT]   [ENT] y", "fr"),
            Err(EncoderError::EmptyMention)
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::http("http://localhost:1", 8);
        cfg.endpoint = None;
        assert!(cfg.validate().is_err());
        assert!(EncoderConfig::mock(0).validate().is_err());
        let mut pre = EncoderConfig::mock(8);
        pre.backend = EncoderKind::Precomputed;
        assert!(pre.validate().is_err());
    }

    #[test]
    fn precomputed_returns_stored_rows() {
        let matrix = EmbeddingMatrix::new(
            vec!["m1".into(), "m2".into()],
            2,
            vec![0.25, -1.5, 3.0, 4.0],
        )
        .unwrap();
        let enc = PrecomputedEncoder::new(matrix);
        let a = MarkedText::new("[ENT] a [ENT]", "en")
            .unwrap()
            .with_key("m2");
        assert_eq!(enc.encode(&a).unwrap(), vec![3.0, 4.0]);

        let missing = MarkedText::new("[ENT] b [ENT]", "en")
            .unwrap()
            .with_key("m3");
        let batch = enc.encode_batch(&[a.clone(), missing]);
        match batch {
            Err(EncoderError::Batch { index, source }) => {
                assert_eq!(index, 1);
                assert!(matches!(*source, EncoderError::MissingKey(ref k) if k == "m3"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(enc.encode_batch(&[]).unwrap().is_empty());
    }
}
