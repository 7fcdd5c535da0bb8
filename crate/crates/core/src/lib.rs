//! Multilingual historical entity linking: dense candidate retrieval, KB
//! enrichment, threshold routing and LLM adjudication, plus calibration and
//! evaluation tooling.

pub mod calibration;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod http;
pub mod index;
pub mod kb;
pub mod llm;
pub mod manifest;
pub mod mock;
pub mod pipeline;
pub mod retry;

pub use corpus::{MentionQuery, PredictionRecord};
pub use encoder::{Encoder, EncoderConfig, MarkedText};
pub use index::{brute_force_search, EmbeddingMatrix, RetrievalHit, SelfCheck, VectorIndex};
pub use kb::{EnrichedCandidate, EntityRecord, KbStore};
pub use llm::{ChatBackend, Outcome, NIL};
pub use pipeline::{link_corpus, link_mention, LinkDecision, LinkerDeps, PipelineConfig, Route};
