use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::parse::{extract_selection, parse_binary_answer, BinaryAnswer};
use super::prompt::{render_nil_prompt, render_selection_prompt, PromptContext, PromptError};
use super::{ChatBackend, ChatError, ChatMessage, ChatParams, ChatRequest};

pub const NIL: &str = "NIL";

/// Final linking outcome for one mention.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Outcome {
    Linked(String),
    Nil,
}

impl Outcome {
    /// The qid, or `"NIL"`.
    pub fn label(&self) -> &str {
        match self {
            Outcome::Linked(q) => q,
            Outcome::Nil => NIL,
        }
    }

    pub fn from_label(label: &str) -> Self {
        if label == NIL {
            Outcome::Nil
        } else {
            Outcome::Linked(label.to_string())
        }
    }

    pub fn is_nil(&self) -> bool {
        matches!(self, Outcome::Nil)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjudicationRoute {
    ChainNilNo,
    ChainSelected,
    ChainEmpty,
    SingleSelected,
    SingleEmpty,
    BackendFallback,
}

/// What to do when the chat backend fails after its retries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendFailurePolicy {
    /// Link the rank-1 candidate and record the failure.
    #[default]
    FallbackTop1,
    /// Abort the run.
    FailRun,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjudicationResult {
    pub outcome: Outcome,
    pub route: AdjudicationRoute,
    /// Every backend reply received, in call order.
    pub raw_replies: Vec<String>,
    /// Backend calls attempted (retries inside the backend are not counted).
    pub calls: usize,
    pub error: Option<String>,
}

#[derive(Debug, Error)]
pub enum AdjudicationError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("chat backend failed on call {call}: {source}")]
    Backend {
        call: usize,
        #[source]
        source: ChatError,
    },
}

struct Session<'a> {
    ctx: &'a PromptContext,
    chat: &'a dyn ChatBackend,
    params: &'a ChatParams,
    replies: Vec<String>,
    calls: usize,
}

impl Session<'_> {
    fn ask(&mut self, messages: Vec<ChatMessage>) -> Result<String, ChatError> {
        self.calls += 1;
        let request =
            ChatRequest::new(messages, self.params).for_mention(self.ctx.mention_id.as_deref());
        let reply = self.chat.chat(&request)?;
        self.replies.push(reply.clone());
        Ok(reply)
    }

    fn finish(self, outcome: Outcome, route: AdjudicationRoute) -> AdjudicationResult {
        AdjudicationResult {
            outcome,
            route,
            raw_replies: self.replies,
            calls: self.calls,
            error: None,
        }
    }

    fn selection(&self, reply: &str) -> Option<String> {
        extract_selection(reply, self.ctx.allowed_qids())
    }

    fn fail(
        self,
        source: ChatError,
        policy: BackendFailurePolicy,
    ) -> Result<AdjudicationResult, AdjudicationError> {
        match policy {
            BackendFailurePolicy::FailRun => Err(AdjudicationError::Backend {
                call: self.calls,
                source,
            }),
            BackendFailurePolicy::FallbackTop1 => {
                let top = self.ctx.candidates[0].qid.clone();
                warn!(
                    "chat backend failed for mention {:?}; falling back to top-1 {top}: {source}",
                    self.ctx.mention_id.as_deref().unwrap_or("?")
                );
                Ok(AdjudicationResult {
                    outcome: Outcome::Linked(top),
                    route: AdjudicationRoute::BackendFallback,
                    raw_replies: self.replies,
                    calls: self.calls,
                    error: Some(source.to_string()),
                })
            }
        }
    }
}

/// NIL prediction first; candidate selection only after a "yes".
pub fn adjudicate_chain(
    ctx: &PromptContext,
    chat: &dyn ChatBackend,
    params: &ChatParams,
    on_failure: BackendFailurePolicy,
) -> Result<AdjudicationResult, AdjudicationError> {
    let nil_prompt = render_nil_prompt(ctx)?;
    let selection_prompt = render_selection_prompt(ctx)?;
    let mut session = Session {
        ctx,
        chat,
        params,
        replies: Vec::new(),
        calls: 0,
    };

    let answer = match session.ask(nil_prompt) {
        Ok(reply) => parse_binary_answer(&reply),
        Err(e) => return session.fail(e, on_failure),
    };
    if answer == BinaryAnswer::No {
        return Ok(session.finish(Outcome::Nil, AdjudicationRoute::ChainNilNo));
    }
    let reply = match session.ask(selection_prompt) {
        Ok(reply) => reply,
        Err(e) => return session.fail(e, on_failure),
    };
    Ok(match session.selection(&reply) {
        Some(qid) => session.finish(Outcome::Linked(qid), AdjudicationRoute::ChainSelected),
        None => session.finish(Outcome::Nil, AdjudicationRoute::ChainEmpty),
    })
}

/// Candidate selection alone; an empty or invalid selection means NIL.
pub fn adjudicate_single(
    ctx: &PromptContext,
    chat: &dyn ChatBackend,
    params: &ChatParams,
    on_failure: BackendFailurePolicy,
) -> Result<AdjudicationResult, AdjudicationError> {
    let prompt = render_selection_prompt(ctx)?;
    let mut session = Session {
        ctx,
        chat,
        params,
        replies: Vec::new(),
        calls: 0,
    };
    let reply = match session.ask(prompt) {
        Ok(reply) => reply,
        Err(e) => return session.fail(e, on_failure),
    };
    Ok(match session.selection(&reply) {
        Some(qid) => session.finish(Outcome::Linked(qid), AdjudicationRoute::SingleSelected),
        None => session.finish(Outcome::Nil, AdjudicationRoute::SingleEmpty),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::MarkedText;
    use crate::kb::EnrichedCandidate;
    use crate::mock::{FailingChat, ScriptedChat};

    fn ctx(qids: &[&str]) -> PromptContext {
        PromptContext {
            language: "English".into(),
            document_date: "1890".into(),
            genre: "newspapers".into(),
            annotated_text: MarkedText::new("At [ENT] Salford [ENT] yesterday", "en").unwrap(),
            candidates: qids
                .iter()
                .enumerate()
                .map(|(i, q)| EnrichedCandidate {
                    qid: q.to_string(),
                    score: 20.0 - i as f64,
                    label: format!("label {q}"),
                    description: None,
                    earliest_date: None,
                    entity_type: None,
                    label_language_used: Some("en".into()),
                })
                .collect(),
            mention_id: Some("m1".into()),
        }
    }

    fn run_chain(replies: &[&str], qids: &[&str]) -> (AdjudicationResult, usize) {
        let chat = ScriptedChat::from_list(replies.iter().map(|s| s.to_string()).collect());
        let res = adjudicate_chain(
            &ctx(qids),
            &chat,
            &ChatParams::default(),
            BackendFailurePolicy::FailRun,
        )
        .unwrap();
        (res, chat.calls())
    }

    #[test]
    fn chain_no_stops_after_one_call() {
        let (res, calls) = run_chain(&["no"], &["Q1", "Q2"]);
        assert_eq!(res.outcome, Outcome::Nil);
        assert_eq!(res.route, AdjudicationRoute::ChainNilNo);
        assert_eq!((res.calls, calls), (1, 1));
    }

    #[test]
    fn chain_yes_then_valid_selection() {
        let (res, calls) = run_chain(
            &["yes", r#"{"wikipedia_title":"X","wikidata_id":"Q1"}"#],
            &["Q1", "Q2"],
        );
        assert_eq!(res.outcome, Outcome::Linked("Q1".into()));
        assert_eq!(res.route, AdjudicationRoute::ChainSelected);
        assert_eq!(calls, 2);
        assert_eq!(res.raw_replies.len(), 2);
    }

    #[test]
    fn chain_yes_then_empty_json() {
        let (res, _) = run_chain(&["yes", "{}"], &["Q1"]);
        assert_eq!(res.outcome, Outcome::Nil);
        assert_eq!(res.route, AdjudicationRoute::ChainEmpty);
    }

    #[test]
    fn chain_out_of_set_selection_is_nil() {
        let (res, _) = run_chain(&["yes", r#"{"wikidata_id":"Q999"}"#], &["Q1", "Q2"]);
        assert_eq!(res.outcome, Outcome::Nil);
        assert_eq!(res.route, AdjudicationRoute::ChainEmpty);
    }

    #[test]
    fn single_prompt_routes() {
        let cases = [
            (
                r#"{"wikidata_id":"Q2","wikipedia_title":"Y"}"#,
                Outcome::Linked("Q2".into()),
                AdjudicationRoute::SingleSelected,
            ),
            ("{}", Outcome::Nil, AdjudicationRoute::SingleEmpty),
            ("no json here", Outcome::Nil, AdjudicationRoute::SingleEmpty),
        ];
        for (reply, outcome, route) in cases {
            let chat = ScriptedChat::from_list(vec![reply.to_string()]);
            let res = adjudicate_single(
                &ctx(&["Q1", "Q2"]),
                &chat,
                &ChatParams::default(),
                BackendFailurePolicy::FailRun,
            )
            .unwrap();
            assert_eq!((res.outcome, res.route, res.calls), (outcome, route, 1));
        }
    }

    #[test]
    fn backend_failure_policies() {
        let failing = FailingChat::new(ScriptedChat::from_list(vec!["yes".into()]), [1]);
        let res = adjudicate_chain(
            &ctx(&["Q7", "Q8"]),
            &failing,
            &ChatParams::default(),
            BackendFailurePolicy::FallbackTop1,
        )
        .unwrap();
        assert_eq!(res.outcome, Outcome::Linked("Q7".into()));
        assert_eq!(res.route, AdjudicationRoute::BackendFallback);
        assert!(res.error.is_some());
        assert_eq!(res.calls, 2);

        let failing = FailingChat::new(ScriptedChat::from_list(vec![]), [0]);
        let err = adjudicate_single(
            &ctx(&["Q7"]),
            &failing,
            &ChatParams::default(),
            BackendFailurePolicy::FailRun,
        );
        assert!(matches!(
            err,
            Err(AdjudicationError::Backend { call: 1, .. })
        ));
    }

    #[test]
    fn empty_candidates_rejected_before_any_call() {
        let chat = ScriptedChat::from_list(vec!["yes".into()]);
        let err = adjudicate_chain(
            &ctx(&[]),
            &chat,
            &ChatParams::default(),
            BackendFailurePolicy::FallbackTop1,
        );
        assert!(matches!(
            err,
            Err(AdjudicationError::Prompt(PromptError::NoCandidates))
        ));
        assert_eq!(chat.calls(), 0);
    }
}
