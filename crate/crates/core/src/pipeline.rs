//! Retrieve, enrich, route and adjudicate, one mention at a time or over a
//! whole corpus with bounded parallelism.

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::MentionQuery;
use crate::encoder::{Encoder, EncoderError};
use crate::index::{IndexError, VectorIndex};
use crate::kb::{KbError, KbStore};
use crate::llm::{
    adjudicate_chain, adjudicate_single, AdjudicationError, AdjudicationRoute,
    BackendFailurePolicy, ChatBackend, ChatParams, Outcome, PromptContext,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Every mention goes to the LLM.
    #[default]
    Vanilla,
    /// Mentions whose top score reaches θ are linked to the top-1 candidate directly.
    Threshold,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// NIL prediction, then candidate selection.
    #[default]
    Chain,
    /// Candidate selection only.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub prompt_mode: PromptMode,
    /// Candidates retrieved per mention (K).
    pub block_size: usize,
    /// θ; required by the threshold variant. JSON accepts a number or "inf".
    #[serde(with = "theta_json")]
    pub threshold: Option<f64>,
    pub backend_failure_policy: BackendFailurePolicy,
    /// Mentions processed concurrently.
    pub max_inflight: usize,
    pub max_tokens: u32,
    pub temperature: f32,
    /// Language code to chat model identifier.
    pub chat_models: BTreeMap<String, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let chat = ChatParams::default();
        Self {
            variant: Variant::Vanilla,
            prompt_mode: PromptMode::Chain,
            block_size: 20,
            threshold: None,
            backend_failure_policy: BackendFailurePolicy::FallbackTop1,
            max_inflight: 4,
            max_tokens: chat.max_tokens,
            temperature: chat.temperature,
            chat_models: BTreeMap::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.block_size == 0 {
            return bad("block size K must be at least 1");
        }
        if self.max_inflight == 0 {
            return bad("max_inflight must be at least 1");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1");
        }
        match (self.variant, self.threshold) {
            (Variant::Threshold, None) => bad("the threshold variant requires θ"),
            // +∞ is allowed: it routes every mention to the LLM
            (Variant::Threshold, Some(t)) if t.is_nan() || t == f64::NEG_INFINITY => {
                bad("θ must be a number below +∞ or +∞ itself")
            }
            _ => Ok(()),
        }
    }

    pub fn chat_params(&self, language: &str) -> ChatParams {
        ChatParams {
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            model: self.chat_models.get(language).cloned(),
        }
    }

    fn is_easy(&self, top_score: f64) -> bool {
        match (self.variant, self.threshold) {
            (Variant::Threshold, Some(theta)) => top_score >= theta,
            _ => false,
        }
    }
}

/// θ as JSON: finite values are numbers, infinities are the strings "inf" and "-inf".
mod theta_json {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(theta: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match theta {
            None => s.serialize_none(),
            Some(t) if t.is_finite() => s.serialize_f64(*t),
            Some(t) if *t > 0.0 => s.serialize_str("inf"),
            Some(t) if *t < 0.0 => s.serialize_str("-inf"),
            Some(_) => s.serialize_str("nan"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(t)) => Ok(Some(t)),
            Some(Raw::Text(t)) => match t.trim().to_ascii_lowercase().as_str() {
                "inf" | "+inf" | "infinity" | "+infinity" => Ok(Some(f64::INFINITY)),
                "-inf" | "-infinity" => Ok(Some(f64::NEG_INFINITY)),
                other => Err(de::Error::custom(format!(
                    "θ must be a number or \"inf\", got {other:?}"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    EasyTop1,
    LlmChain,
    LlmSingle,
    BackendFallback,
    /// Retrieval returned nothing; NIL without an LLM call.
    NoCandidates,
}

impl Route {
    pub const ALL: [Route; 5] = [
        Route::EasyTop1,
        Route::LlmChain,
        Route::LlmSingle,
        Route::BackendFallback,
        Route::NoCandidates,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Route::EasyTop1 => "easy_top1",
            Route::LlmChain => "llm_chain",
            Route::LlmSingle => "llm_single",
            Route::BackendFallback => "backend_fallback",
            Route::NoCandidates => "no_candidates",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkDecision {
    pub mention_id: String,
    pub doc_id: String,
    pub outcome: Outcome,
    pub route: Route,
    /// Rank-1 score; `None` when retrieval returned nothing.
    pub top_score: Option<f64>,
    /// Score of the linked candidate.
    pub chosen_score: Option<f64>,
    pub candidates_considered: usize,
    pub chat_calls: usize,
    /// Adjudication outcome detail, when the LLM was consulted.
    pub llm_route: Option<AdjudicationRoute>,
    pub raw_replies: Vec<String>,
    pub error: Option<String>,
    pub gold_qid: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mentions: usize,
    pub routes: BTreeMap<Route, usize>,
    pub nil_predictions: usize,
    pub chat_calls: usize,
    pub wall_time_ms: u64,
}

impl RunStats {
    pub fn count(&self, route: Route) -> usize {
        self.routes.get(&route).copied().unwrap_or(0)
    }

    fn record(&mut self, d: &LinkDecision) {
        self.mentions += 1;
        *self.routes.entry(d.route).or_default() += 1;
        self.nil_predictions += usize::from(d.outcome.is_nil());
        self.chat_calls += d.chat_calls;
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("encoder dimension {encoder} does not match index dimension {index}")]
    DimMismatch { encoder: usize, index: usize },
    #[error("duplicate mention_id {0:?}")]
    DuplicateMention(String),
    #[error("mention {mention_id}: {source}")]
    Encoder {
        mention_id: String,
        #[source]
        source: EncoderError,
    },
    #[error("mention {mention_id}: {source}")]
    Index {
        mention_id: String,
        #[source]
        source: IndexError,
    },
    #[error("mention {mention_id}: {source}")]
    Kb {
        mention_id: String,
        #[source]
        source: KbError,
    },
    #[error("mention {mention_id}: {source}")]
    Adjudication {
        mention_id: String,
        #[source]
        source: AdjudicationError,
    },
}

/// Shared read-only backends for a run.
#[derive(Clone, Copy)]
pub struct LinkerDeps<'a> {
    pub encoder: &'a dyn Encoder,
    pub index: &'a VectorIndex,
    pub store: &'a KbStore,
    pub chat: &'a dyn ChatBackend,
}

impl LinkerDeps<'_> {
    fn check(&self) -> Result<(), PipelineError> {
        if self.encoder.dim() != self.index.dim() {
            return Err(PipelineError::DimMismatch {
                encoder: self.encoder.dim(),
                index: self.index.dim(),
            });
        }
        Ok(())
    }
}

fn link_checked(
    mention: &MentionQuery,
    config: &PipelineConfig,
    deps: LinkerDeps<'_>,
) -> Result<LinkDecision, PipelineError> {
    let id = || mention.mention_id.clone();
    let marked = mention.marked().map_err(|source| PipelineError::Encoder {
        mention_id: id(),
        source,
    })?;
    let query = deps
        .encoder
        .encode(&marked)
        .map_err(|source| PipelineError::Encoder {
            mention_id: id(),
            source,
        })?;
    let hits = deps
        .index
        .search(&query, config.block_size)
        .map_err(|source| PipelineError::Index {
            mention_id: id(),
            source,
        })?;

    let mut decision = LinkDecision {
        mention_id: id(),
        doc_id: mention.doc_id.clone(),
        outcome: Outcome::Nil,
        route: Route::NoCandidates,
        top_score: hits.first().map(|h| h.score),
        chosen_score: None,
        candidates_considered: hits.len(),
        chat_calls: 0,
        llm_route: None,
        raw_replies: Vec::new(),
        error: None,
        gold_qid: mention.gold_qid.clone(),
    };
    let Some(top) = hits.first() else {
        return Ok(decision);
    };
    if config.is_easy(top.score) {
        decision.outcome = Outcome::Linked(top.qid.clone());
        decision.route = Route::EasyTop1;
        decision.chosen_score = Some(top.score);
        return Ok(decision);
    }

    let candidates = deps
        .store
        .enrich(
            hits.iter().map(|h| (h.qid.as_str(), h.score)),
            &mention.language,
        )
        .map_err(|source| PipelineError::Kb {
            mention_id: id(),
            source,
        })?;
    let ctx = PromptContext {
        language: mention.language_name.clone(),
        document_date: mention.document_date.clone(),
        genre: mention.genre.clone(),
        annotated_text: marked,
        candidates,
        mention_id: Some(id()),
    };
    let params = config.chat_params(&mention.language);
    let adjudicate = match config.prompt_mode {
        PromptMode::Chain => adjudicate_chain,
        PromptMode::Single => adjudicate_single,
    };
    let result =
        adjudicate(&ctx, deps.chat, &params, config.backend_failure_policy).map_err(|source| {
            PipelineError::Adjudication {
                mention_id: id(),
                source,
            }
        })?;

    decision.route = match (result.route, config.prompt_mode) {
        (AdjudicationRoute::BackendFallback, _) => Route::BackendFallback,
        (_, PromptMode::Chain) => Route::LlmChain,
        (_, PromptMode::Single) => Route::LlmSingle,
    };
    decision.chosen_score = match &result.outcome {
        Outcome::Linked(q) => hits.iter().find(|h| &h.qid == q).map(|h| h.score),
        Outcome::Nil => None,
    };
    decision.outcome = result.outcome;
    decision.chat_calls = result.calls;
    decision.llm_route = Some(result.route);
    decision.raw_replies = result.raw_replies;
    decision.error = result.error;
    Ok(decision)
}

/// Links one mention.
pub fn link_mention(
    mention: &MentionQuery,
    config: &PipelineConfig,
    deps: LinkerDeps<'_>,
) -> Result<LinkDecision, PipelineError> {
    config.validate()?;
    deps.check()?;
    link_checked(mention, config, deps)
}

/// Links every mention with up to `max_inflight` workers. Decisions come back
/// in input order. The first hard error (by input position) aborts the run.
pub fn link_corpus(
    mentions: &[MentionQuery],
    config: &PipelineConfig,
    deps: LinkerDeps<'_>,
) -> Result<(Vec<LinkDecision>, RunStats), PipelineError> {
    config.validate()?;
    deps.check()?;
    let mut seen = HashSet::with_capacity(mentions.len());
    for m in mentions {
        if !seen.insert(m.mention_id.as_str()) {
            return Err(PipelineError::DuplicateMention(m.mention_id.clone()));
        }
    }

    let started = Instant::now();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<Result<LinkDecision, PipelineError>>>> =
        mentions.iter().map(|_| Mutex::new(None)).collect();
    let workers = config.max_inflight.min(mentions.len()).max(1);

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(mention) = mentions.get(i) else {
                    break;
                };
                let result = link_checked(mention, config, deps);
                if result.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });

    let mut decisions = Vec::with_capacity(mentions.len());
    let mut stats = RunStats::default();
    for slot in slots {
        match slot.into_inner().expect("slot lock") {
            Some(Ok(d)) => {
                debug!(
                    "{} -> {} via {}",
                    d.mention_id,
                    d.outcome.label(),
                    d.route.as_str()
                );
                stats.record(&d);
                decisions.push(d);
            }
            Some(Err(e)) => return Err(e),
            // skipped after an abort; the error sits in an earlier or later slot
            None => continue,
        }
    }
    if decisions.len() != mentions.len() {
        unreachable!("aborted run without a recorded error");
    }
    stats.wall_time_ms = started.elapsed().as_millis() as u64;
    info!(
        "linked {} mentions: {} chat calls, {} easy, {} NIL",
        stats.mentions,
        stats.chat_calls,
        stats.count(Route::EasyTop1),
        stats.nil_predictions
    );
    Ok((decisions, stats))
}
