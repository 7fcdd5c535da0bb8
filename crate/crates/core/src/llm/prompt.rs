use serde::Serialize;
use thiserror::Error;

use super::ChatMessage;
use crate::encoder::MarkedText;
use crate::kb::EnrichedCandidate;

pub const NIL_SYSTEM_PROMPT: &str = "You are a highly precise multilingual information extraction system specialized in disambiguating entities within noisy historical texts. Your task is to analyse the text provided by the user and determine if the reference marked by [ENT] tags can be associated or not to one of the candidate Wikidata entities provided in the JSON list. Always respond by saying either \"yes\" or \"no\". Do not generate Python code.";

pub const NIL_USER_TEMPLATE: &str = "Read the input text written in {language}, published in {document_date} and belonging to the genre of {genre}.

Answer if the entity mentioned between the [ENT] tags in the input text corresponds to one of the candidate Wikidata entity provided in the json. Give a simple binary answer.

Input Text: {annotated_text}

Candidates: {candidates_in_json}";

pub const SELECTION_SYSTEM_PROMPT: &str = "You are an effective multilingual information extraction system specialized in disambiguating entities within noisy historical texts. Your task is to analyse the text provided by the user and disambiguate the reference marked by [ENT] tags by selecting a Wikidata entity from a given list of candidates. Always respond by returning a JSON-formatted answer; do not generate Python code.";

/// Output schema the selection prompt asks for.
pub const SELECTION_SCHEMA: &str = r#"{"wikipedia_title": "", "wikidata_id": ""}"#;

pub const SELECTION_USER_TEMPLATE: &str = "Read the input text written in {language}, published in {document_date} and belonging to the genre of {genre}.

Disambiguate the entity mentioned between the [ENT] tags by selecting the most appropriate Wikidata entity from the list of candidates.

Return the corresponding Wikipedia title and Wikidata ID of the selected entity in a JSON object formatted as follows:
{\"wikipedia_title\": \"\", \"wikidata_id\": \"\"}

Make sure to select both the Wikipedia title and the Wikidata ID from the provided list of candidates. Pay attention that the list of candidates may not include the entity mentioned. If none of the candidates match with high confidence the entity tagged with [ENT], return an empty json.

Input Text: {annotated_text}

Candidates: {candidates_in_json}";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("cannot render a prompt without candidates")]
    NoCandidates,
}

/// Everything the prompts mention about one mention and its candidate block.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext {
    /// Human-readable language name, e.g. "French".
    pub language: String,
    pub document_date: String,
    pub genre: String,
    pub annotated_text: MarkedText,
    pub candidates: Vec<EnrichedCandidate>,
    pub mention_id: Option<String>,
}

impl PromptContext {
    pub fn allowed_qids(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.qid.as_str())
    }
}

#[derive(Serialize)]
struct PromptCandidate<'a> {
    wikipedia_title: &'a str,
    wikidata_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    description: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    entity_type: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    earliest_date: Option<&'a str>,
}

/// JSON array of candidate objects; absent metadata keys are omitted.
pub fn candidates_json(candidates: &[EnrichedCandidate]) -> String {
    let items: Vec<PromptCandidate> = candidates
        .iter()
        .map(|c| PromptCandidate {
            wikipedia_title: &c.label,
            wikidata_id: &c.qid,
            description: c.description.as_deref(),
            entity_type: c.entity_type.as_deref(),
            earliest_date: c.earliest_date.as_deref(),
        })
        .collect();
    serde_json::to_string(&items).expect("candidates serialize")
}

/// Single-pass substitution of `{name}` placeholders. Substituted values are
/// never rescanned, and braces that do not name a known placeholder pass through.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let hit = vars.iter().find(|(name, _)| {
            tail.strip_prefix(name)
                .is_some_and(|after| after.starts_with('}'))
        });
        match hit {
            Some((name, value)) => {
                out.push_str(value);
                rest = &tail[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

fn render(
    ctx: &PromptContext,
    system: &str,
    user_template: &str,
) -> Result<Vec<ChatMessage>, PromptError> {
    if ctx.candidates.is_empty() {
        return Err(PromptError::NoCandidates);
    }
    let candidates = candidates_json(&ctx.candidates);
    let user = fill(
        user_template,
        &[
            ("language", &ctx.language),
            ("document_date", &ctx.document_date),
            ("genre", &ctx.genre),
            ("annotated_text", ctx.annotated_text.text()),
            ("candidates_in_json", &candidates),
        ],
    );
    Ok(vec![ChatMessage::system(system), ChatMessage::user(user)])
}

/// System + user messages asking whether any candidate matches (yes/no).
pub fn render_nil_prompt(ctx: &PromptContext) -> Result<Vec<ChatMessage>, PromptError> {
    render(ctx, NIL_SYSTEM_PROMPT, NIL_USER_TEMPLATE)
}

/// System + user messages asking for the best candidate as JSON, or `{}`.
pub fn render_selection_prompt(ctx: &PromptContext) -> Result<Vec<ChatMessage>, PromptError> {
    render(ctx, SELECTION_SYSTEM_PROMPT, SELECTION_USER_TEMPLATE)
}
