//! Provenance record written next to every prediction file.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusManifest;
use crate::pipeline::{PipelineConfig, RunStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    /// `mock`, `precomputed` or a URL.
    pub encoder_endpoint: String,
    pub encoder_dim: usize,
    /// `mock:<script>` or a URL.
    pub chat_endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Effective configuration after flags, config file and defaults.
    pub config: PipelineConfig,
    pub backends: BackendInfo,
    pub corpus_path: String,
    pub corpus: CorpusManifest,
    pub kb_path: String,
    pub vectors_path: String,
    pub ids_path: String,
    pub predictions_path: String,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
    pub stats: RunStats,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
