//! Mention corpus JSONL, mention marking, and the canonical writers for
//! predictions and reports.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, MarkedText, ENT_MARKER};
use crate::llm::NIL;
use crate::pipeline::{LinkDecision, Route};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: mention {mention_id:?}: {reason}")]
    Invalid {
        line: usize,
        mention_id: String,
        reason: String,
    },
    #[error("duplicate mention_id {mention_id:?} on lines {first_line} and {second_line}")]
    Duplicate {
        mention_id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("invalid span [{start}, {end}) in text of {len} bytes: {reason}")]
    Span {
        start: usize,
        end: usize,
        len: usize,
        reason: &'static str,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One mention to link: the span `text[start..end]` (UTF-8 byte offsets).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionQuery {
    pub doc_id: String,
    pub mention_id: String,
    pub text: String,
    pub start: usize,
    pub end: usize,
    /// Language code, e.g. "fr".
    pub language: String,
    /// Language name used in prompts, e.g. "French".
    pub language_name: String,
    pub document_date: String,
    pub genre: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_qid: Option<String>,
}

impl MentionQuery {
    pub fn validate(&self) -> Result<(), String> {
        if self.mention_id.is_empty() {
            return Err("mention_id is empty".into());
        }
        check_span(&self.text, self.start, self.end).map_err(|e| e.to_string())?;
        if let Some(g) = &self.gold_qid {
            if g.is_empty() {
                return Err("gold_qid is empty".into());
            }
        }
        Ok(())
    }

    pub fn surface(&self) -> &str {
        &self.text[self.start..self.end]
    }

    /// Marked context for the encoder, keyed by mention id.
    pub fn marked(&self) -> Result<MarkedText, EncoderError> {
        let text = mark_mention(&self.text, self.start, self.end)
            .map_err(|e| EncoderError::Protocol(e.to_string()))?;
        Ok(MarkedText::new(text, &self.language)?.with_key(&self.mention_id))
    }
}

fn check_span(text: &str, start: usize, end: usize) -> Result<(), CorpusError> {
    let fail = |reason| {
        Err(CorpusError::Span {
            start,
            end,
            len: text.len(),
            reason,
        })
    };
    if start >= end {
        return fail("start must be before end");
    }
    if end > text.len() {
        return fail("end is past the end of the text");
    }
    if !text.is_char_boundary(start) || !text.is_char_boundary(end) {
        return fail("offset is not on a character boundary");
    }
    Ok(())
}

/// Wraps `text[start..end]` as `[ENT] span [ENT]`, leaving all other bytes untouched.
pub fn mark_mention(text: &str, start: usize, end: usize) -> Result<String, CorpusError> {
    check_span(text, start, end)?;
    let mut out = String::with_capacity(text.len() + 2 * ENT_MARKER.len() + 2);
    out.push_str(&text[..start]);
    out.push_str(ENT_MARKER);
    out.push(' ');
    out.push_str(&text[start..end]);
    out.push(' ');
    out.push_str(ENT_MARKER);
    out.push_str(&text[end..]);
    Ok(out)
}

/// Dataset-level facts recorded alongside each run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub dataset: String,
    pub language: String,
    pub genre: String,
    #[serde(default)]
    pub kb_snapshot: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFile {
    pub path: PathBuf,
    pub mentions: Vec<MentionQuery>,
    pub manifest: CorpusManifest,
}

/// Parses and validates mention JSONL. Blank lines are skipped; errors carry
/// 1-based line numbers.
pub fn parse_corpus(reader: impl BufRead) -> Result<Vec<MentionQuery>, CorpusError> {
    let mut mentions = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let m: MentionQuery = serde_json::from_str(&line).map_err(|e| CorpusError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        m.validate().map_err(|reason| CorpusError::Invalid {
            line: line_no,
            mention_id: m.mention_id.clone(),
            reason,
        })?;
        if let Some(&first_line) = seen.get(&m.mention_id) {
            return Err(CorpusError::Duplicate {
                mention_id: m.mention_id,
                first_line,
                second_line: line_no,
            });
        }
        seen.insert(m.mention_id.clone(), line_no);
        mentions.push(m);
    }
    Ok(mentions)
}

/// Sidecar manifest path: `<corpus>.manifest.json`.
pub fn manifest_path(corpus: &Path) -> PathBuf {
    let mut s = corpus.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn summarize<'a>(values: impl Iterator<Item = &'a str>) -> String {
    let mut distinct: Vec<&str> = values.collect();
    distinct.sort_unstable();
    distinct.dedup();
    match distinct.as_slice() {
        [] => String::new(),
        [one] => one.to_string(),
        many => many.join(","),
    }
}

/// Loads a corpus. The manifest comes from the sidecar file when present,
/// otherwise it is derived from the file name and the mentions.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<CorpusFile, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mentions = parse_corpus(BufReader::new(file))?;
    let sidecar = manifest_path(path);
    let manifest = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(io_err(&sidecar))?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Json {
            line: e.line(),
            message: format!("{}: {e}", sidecar.display()),
        })?
    } else {
        CorpusManifest {
            dataset: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            language: summarize(mentions.iter().map(|m| m.language.as_str())),
            genre: summarize(mentions.iter().map(|m| m.genre.as_str())),
            kb_snapshot: None,
        }
    };
    Ok(CorpusFile {
        path: path.to_path_buf(),
        mentions,
        manifest,
    })
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<u64, CorpusError> {
    let mut buf = Vec::new();
    for item in items {
        buf.extend_from_slice(to_canonical_json(item).as_bytes());
        buf.push(b'\n');
    }
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))?;
    Ok(buf.len() as u64)
}

pub fn write_corpus(path: impl AsRef<Path>, mentions: &[MentionQuery]) -> Result<u64, CorpusError> {
    write_lines(path.as_ref(), mentions)
}

/// One line of the prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub mention_id: String,
    pub doc_id: String,
    /// Linked qid or `"NIL"`.
    pub pred_qid: String,
    pub route: Route,
    pub top_score: Option<f64>,
    pub candidates_considered: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_qid: Option<String>,
}

impl PredictionRecord {
    pub fn is_nil(&self) -> bool {
        self.pred_qid == NIL
    }
}

/// Rounds to the 6 decimals the writers emit, so records survive a round trip.
pub fn quantize(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

impl From<&LinkDecision> for PredictionRecord {
    fn from(d: &LinkDecision) -> Self {
        Self {
            mention_id: d.mention_id.clone(),
            doc_id: d.doc_id.clone(),
            pred_qid: d.outcome.label().to_string(),
            route: d.route,
            top_score: d.top_score.map(quantize),
            candidates_considered: d.candidates_considered,
            gold_qid: d.gold_qid.clone(),
        }
    }
}

pub fn write_predictions(
    path: impl AsRef<Path>,
    records: &[PredictionRecord],
) -> Result<u64, CorpusError> {
    write_lines(path.as_ref(), records)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Json {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes any serializable report as one line of canonical JSON.
pub fn write_report<T: Serialize>(path: impl AsRef<Path>, report: &T) -> Result<u64, CorpusError> {
    let path = path.as_ref();
    let mut text = to_canonical_json(report);
    text.push('\n');
    fs::write(path, &text).map_err(io_err(path))?;
    Ok(text.len() as u64)
}

/// Formatter printing every float with exactly 6 decimals.
struct FixedFloat;

impl serde_json::ser::Formatter for FixedFloat {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.6}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{:.6}", f64::from(value))
    }
}

/// Compact JSON with object keys sorted and floats fixed to 6 decimals.
/// Non-finite floats become `null`.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    // Value maps are BTreeMaps, so going through Value sorts every key.
    let value = serde_json::to_value(value).expect("value serializes to JSON");
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFloat);
    value.serialize(&mut ser).expect("in-memory write");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn mention(id: &str, text: &str, start: usize, end: usize) -> MentionQuery {
        MentionQuery {
            doc_id: "d1".into(),
            mention_id: id.into(),
            text: text.into(),
            start,
            end,
            language: "fr".into(),
            language_name: "French".into(),
            document_date: "1865".into(),
            genre: "newspapers".into(),
            gold_qid: Some("NIL".into()),
        }
    }

    #[test]
    fn marking() {
        assert_eq!(
            mark_mention("Hello Paris today", 6, 11).unwrap(),
            "Hello [ENT] Paris [ENT] today"
        );
        assert_eq!(
            mark_mention("Paris today", 0, 5).unwrap(),
            "[ENT] Paris [ENT] today"
        );
        assert_eq!(
            mark_mention("in Paris", 3, 8).unwrap(),
            "in [ENT] Paris [ENT]"
        );
        assert!(mark_mention("abc", 1, 1).is_err());
        assert!(mark_mention("abc", 1, 4).is_err());
        // 'é' is two bytes; offset 1 splits it
        assert!(mark_mention("été", 1, 3).is_err());
        assert_eq!(mark_mention("été", 0, 2).unwrap(), "[ENT] é [ENT]té");
    }

    #[test]
    fn corpus_lines_and_errors() {
        let a = to_canonical_json(&mention("m1", "Hello Paris", 6, 11));
        let b = to_canonical_json(&mention("m2", "Hello Paris", 0, 5));
        let ok = format!("{a}\n\n{b}\n");
        assert_eq!(parse_corpus(Cursor::new(ok)).unwrap().len(), 2);

        let same = to_canonical_json(&mention("m1", "x", 0, 1));
        let dup = format!("{a}\n{same}\n");
        assert!(matches!(
            parse_corpus(Cursor::new(dup)),
            Err(CorpusError::Duplicate {
                first_line: 1,
                second_line: 2,
                ..
            })
        ));

        let empty_span = to_canonical_json(&mention("m3", "Hello", 2, 2));
        assert!(matches!(
            parse_corpus(Cursor::new(empty_span)),
            Err(CorpusError::Invalid { line: 1, .. })
        ));
        let past_end = to_canonical_json(&mention("m3", "Hello", 2, 9));
        assert!(matches!(
            parse_corpus(Cursor::new(format!("{a}\n{past_end}"))),
            Err(CorpusError::Invalid { line: 2, .. })
        ));
        assert!(matches!(
            parse_corpus(Cursor::new("{not json")),
            Err(CorpusError::Json { line: 1, .. })
        ));
    }

    #[test]
    fn canonical_json_sorts_keys_and_fixes_floats() {
        let v = serde_json::json!({"b": 1.5, "a": {"z": 2, "y": 0.1234567}, "c": null});
        assert_eq!(
            to_canonical_json(&v),
            r#"{"a":{"y":0.123457,"z":2},"b":1.500000,"c":null}"#
        );
        assert_eq!(to_canonical_json(&f64::INFINITY), "null");
    }

    #[test]
    fn load_derives_or_reads_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hipe-fr.jsonl");
        write_corpus(&p, &[mention("m1", "Hello Paris", 6, 11)]).unwrap();
        let c = load_corpus(&p).unwrap();
        assert_eq!(c.manifest.dataset, "hipe-fr");
        assert_eq!(c.manifest.language, "fr");
        assert_eq!(c.manifest.genre, "newspapers");

        let m = CorpusManifest {
            dataset: "HIPE-2020".into(),
            language: "fr".into(),
            genre: "historical newspapers".into(),
            kb_snapshot: Some("wd-2023".into()),
        };
        fs::write(manifest_path(&p), serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(load_corpus(&p).unwrap().manifest, m);
    }

    #[test]
    fn empty_predictions_write_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.jsonl");
        assert_eq!(write_predictions(&p, &[]).unwrap(), 0);
        assert_eq!(fs::read(&p).unwrap(), b"");
        assert!(read_predictions(&p).unwrap().is_empty());
    }

    fn arb_text() -> impl Strategy<Value = (String, usize, usize)> {
        ("[a-zé ]{0,6}", "[A-Za-zäö]{1,6}", "[a-z ,.]{0,6}").prop_map(|(pre, span, post)| {
            let start = pre.len();
            let end = start + span.len();
            (format!("{pre}{span}{post}"), start, end)
        })
    }

    proptest! {
        #[test]
        fn marking_adds_twelve_bytes_and_is_reversible((text, s, e) in arb_text()) {
            let marked = mark_mention(&text, s, e).unwrap();
            prop_assert_eq!(marked.len(), text.len() + 12);
            let restored = marked.replacen("[ENT] ", "", 1).replacen(" [ENT]", "", 1);
            prop_assert_eq!(restored, text);
        }

        #[test]
        fn corpus_round_trip(
            items in proptest::collection::vec((arb_text(), proptest::option::of("Q[0-9]{1,4}|NIL")), 0..12)
        ) {
            let mentions: Vec<MentionQuery> = items
                .into_iter()
                .enumerate()
                .map(|(i, ((text, s, e), gold))| MentionQuery {
                    gold_qid: gold,
                    ..mention(&format!("m{i}"), &text, s, e)
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.jsonl");
            write_corpus(&p, &mentions).unwrap();
            prop_assert_eq!(load_corpus(&p).unwrap().mentions, mentions);
        }

        #[test]
        fn prediction_round_trip(
            rows in proptest::collection::vec(
                (proptest::option::of(-50_000_000i64..50_000_000), 0usize..60, any::<bool>(), 0usize..5),
                0..20,
            )
        ) {
            let routes = [Route::EasyTop1, Route::LlmChain, Route::LlmSingle, Route::BackendFallback, Route::NoCandidates];
            let records: Vec<PredictionRecord> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (micro, n, nil, r))| PredictionRecord {
                    mention_id: format!("m{i}"),
                    doc_id: "d".into(),
                    pred_qid: if nil { NIL.into() } else { format!("Q{i}") },
                    route: routes[r],
                    top_score: micro.map(|m| quantize(m as f64 / 1e6)),
                    candidates_considered: n,
                    gold_qid: (i % 2 == 0).then(|| "Q1".to_string()),
                })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("p.jsonl");
            let n1 = write_predictions(&p, &records).unwrap();
            let first = fs::read(&p).unwrap();
            prop_assert_eq!(read_predictions(&p).unwrap(), records.clone());
            let n2 = write_predictions(&p, &records).unwrap();
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(fs::read(&p).unwrap(), first);
        }
    }
}
