//! Deterministic in-process backends: a hash-seeded encoder and scripted chat
//! clients. They ship with the library so the CLI can run offline.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::corpus::{write_corpus, MentionQuery};
use crate::encoder::{Encoder, EncoderError, MarkedText};
use crate::index::EmbeddingMatrix;
use crate::kb::{write_kb_jsonl, EntityRecord, KbStore};
use crate::llm::{ChatBackend, ChatError, ChatRequest, NIL};
use crate::pipeline::{PipelineConfig, PromptMode};

/// Vectors are a pure function of (text bytes, language, dim).
#[derive(Debug, Clone)]
pub struct MockEncoder {
    dim: usize,
}

impl MockEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "mock encoder dim must be at least 1");
        Self { dim }
    }

    /// 64-bit seed from a length-prefixed SHA-256 of the inputs.
    pub fn seed(text: &str, language: &str, dim: usize) -> u64 {
        let mut h = Sha256::new();
        h.update((text.len() as u64).to_le_bytes());
        h.update(text.as_bytes());
        h.update((language.len() as u64).to_le_bytes());
        h.update(language.as_bytes());
        h.update((dim as u64).to_le_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn vector(text: &str, language: &str, dim: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(Self::seed(text, language, dim));
        (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }
}

impl Encoder for MockEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, marked: &MarkedText) -> Result<Vec<f32>, EncoderError> {
        Ok(Self::vector(marked.text(), marked.language(), self.dim))
    }
}

enum Script {
    List(Vec<String>),
    Keyed(HashMap<String, Vec<String>>),
    Constant(String),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    List(Vec<String>),
    Keyed(BTreeMap<String, Vec<String>>),
}

#[derive(Default)]
struct Cursors {
    shared: usize,
    per_mention: HashMap<String, usize>,
}

/// Replays canned replies and counts calls.
///
/// List scripts are consumed in call order across all mentions. Keyed scripts
/// are consumed per `mention_id`, which keeps replies stable under concurrency.
pub struct ScriptedChat {
    script: Script,
    cursors: Mutex<Cursors>,
    calls: AtomicUsize,
}

impl ScriptedChat {
    fn with(script: Script) -> Self {
        Self {
            script,
            cursors: Mutex::new(Cursors::default()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_list(replies: Vec<String>) -> Self {
        Self::with(Script::List(replies))
    }

    pub fn from_map<K, V>(replies: impl IntoIterator<Item = (K, V)>) -> Self
    where
        K: Into<String>,
        V: IntoIterator,
        V::Item: Into<String>,
    {
        Self::with(Script::Keyed(
            replies
                .into_iter()
                .map(|(k, v)| (k.into(), v.into_iter().map(Into::into).collect()))
                .collect(),
        ))
    }

    /// Same reply to every call, never exhausted.
    pub fn constant(reply: impl Into<String>) -> Self {
        Self::with(Script::Constant(reply.into()))
    }

    /// Parses a script file: a JSON list of replies or a map mention_id -> replies.
    pub fn from_json(json: &str) -> Result<Self, ChatError> {
        let parsed: ScriptFile = serde_json::from_str(json).map_err(|e| {
            ChatError::Script(format!(
                "script must be a list of strings or a map of lists: {e}"
            ))
        })?;
        Ok(match parsed {
            ScriptFile::List(l) => Self::from_list(l),
            ScriptFile::Keyed(m) => Self::from_map(m),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ChatError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ChatError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Calls recorded for one mention id.
    pub fn calls_for(&self, mention_id: &str) -> usize {
        self.cursors
            .lock()
            .expect("cursor lock")
            .per_mention
            .get(mention_id)
            .copied()
            .unwrap_or(0)
    }
}

impl ChatBackend for ScriptedChat {
    fn chat(&self, request: &ChatRequest) -> Result<String, ChatError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = request.mention_id.as_deref().unwrap_or("");
        let mut cursors = self.cursors.lock().expect("cursor lock");
        let nth = {
            let c = cursors.per_mention.entry(key.to_string()).or_insert(0);
            *c += 1;
            *c - 1
        };
        match &self.script {
            Script::Constant(r) => Ok(r.clone()),
            Script::List(replies) => {
                let i = cursors.shared;
                cursors.shared += 1;
                replies.get(i).cloned().ok_or_else(|| {
                    ChatError::Script(format!("script exhausted after {} replies", replies.len()))
                })
            }
            Script::Keyed(map) => map
                .get(key)
                .and_then(|r| r.get(nth))
                .cloned()
                .ok_or_else(|| {
                    ChatError::Script(format!("no reply #{} for mention {key:?}", nth + 1))
                }),
        }
    }
}

/// Fails with a transport error on the scheduled 0-based call indices and
/// delegates every other call.
pub struct FailingChat<B> {
    inner: B,
    fail_on: BTreeSet<usize>,
    calls: AtomicUsize,
}

impl<B: ChatBackend> FailingChat<B> {
    pub fn new(inner: B, fail_on: impl IntoIterator<Item = usize>) -> Self {
        Self {
            inner,
            fail_on: fail_on.into_iter().collect(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ChatBackend> ChatBackend for FailingChat<B> {
    fn chat(&self, request: &ChatRequest) -> Result<String, ChatError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_on.contains(&n) {
            return Err(ChatError::Transport(format!(
                "scheduled failure on call {n}"
            )));
        }
        self.inner.chat(request)
    }
}

const SYNTH_LANGUAGES: [(&str, &str, &str); 3] = [
    ("en", "English", "Mr."),
    ("fr", "French", "M."),
    ("de", "German", "Herr"),
];

const SYNTH_WORDS: [&str; 8] = [
    "Albrecht", "Bonnard", "Castell", "Duval", "Ermont", "Falck", "Gauthier", "Hollmann",
];

/// A small generated knowledge base, index and corpus that exercise both
/// routes of the linker.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub entities: Vec<EntityRecord>,
    pub matrix: EmbeddingMatrix,
    pub mentions: Vec<MentionQuery>,
}

/// Builds a [`SyntheticWorld`] for the [`MockEncoder`] of dimension `dim`.
///
/// Roughly half the mentions are anchored: their gold entity's vector is twice
/// the mention's own mock encoding, so they retrieve it with a large top score.
/// The rest have NIL or an unrelated gold entity and low top scores.
pub fn synthetic_world(
    seed: u64,
    n_entities: usize,
    n_mentions: usize,
    dim: usize,
) -> SyntheticWorld {
    assert!(
        n_entities > 0 && dim > 0,
        "synthetic world needs entities and dim >= 1"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qid = |i: usize| format!("Q{}", 1000 + i);
    let name = |i: usize| format!("{} {}", SYNTH_WORDS[i % SYNTH_WORDS.len()], i);

    let entities: Vec<EntityRecord> = (0..n_entities)
        .map(|i| {
            let mut e = EntityRecord::new(qid(i));
            for (code, _, _) in SYNTH_LANGUAGES {
                e = e
                    .with_label(code, &name(i))
                    .with_description(code, &format!("person number {i}"));
            }
            e.entity_type = Some("person".into());
            e
        })
        .collect();
    let mut data: Vec<f32> = (0..n_entities)
        .flat_map(|i| MockEncoder::vector(&qid(i), "kb", dim))
        .collect();

    let mut next_anchor = 0;
    let mut mentions = Vec::with_capacity(n_mentions);
    for i in 0..n_mentions {
        let (code, lang_name, title) = SYNTH_LANGUAGES[i % SYNTH_LANGUAGES.len()];
        let anchored = next_anchor < n_entities && rng.random_bool(0.5);
        let target = if anchored {
            next_anchor += 1;
            next_anchor - 1
        } else {
            rng.random_range(0..n_entities)
        };
        let surface = format!("{title} {}", name(target));
        let prefix = format!("Report {} of the day:", rng.random_range(0..1000u32));
        let text = format!("{prefix} {surface} arrived yesterday.");
        let start = prefix.len() + 1;
        let gold_qid = if anchored || rng.random_bool(0.5) {
            qid(target)
        } else {
            NIL.to_string()
        };
        let mention = MentionQuery {
            doc_id: format!("doc{:03}", i / 10),
            mention_id: format!("m{i:04}"),
            end: start + surface.len(),
            start,
            text,
            language: code.into(),
            language_name: lang_name.into(),
            document_date: format!("18{:02}-01-01", 50 + i % 50),
            genre: "news".into(),
            gold_qid: Some(gold_qid),
        };
        if anchored {
            let marked = mention.marked().expect("synthetic span is valid");
            let v = MockEncoder::vector(marked.text(), code, dim);
            for (slot, x) in data[target * dim..(target + 1) * dim].iter_mut().zip(v) {
                *slot = 2.0 * x;
            }
        }
        mentions.push(mention);
    }

    let matrix = EmbeddingMatrix::new(entities.iter().map(|e| e.qid.clone()).collect(), dim, data)
        .expect("synthetic matrix is consistent");
    SyntheticWorld {
        entities,
        matrix,
        mentions,
    }
}

impl SyntheticWorld {
    /// Mention-keyed chat script for `mode`. The scripted LLM answers with the
    /// gold entity, except that every fifth linkable mention is wrongly called NIL.
    pub fn chat_script(&self, mode: PromptMode) -> BTreeMap<String, Vec<String>> {
        let labels: HashMap<&str, &str> = self
            .entities
            .iter()
            .map(|e| {
                (
                    e.qid.as_str(),
                    e.labels.get("en").map_or("", String::as_str),
                )
            })
            .collect();
        self.mentions
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let gold = m.gold_qid.as_deref().unwrap_or(NIL);
                let select = (gold != NIL && i % 5 != 0).then(|| {
                    serde_json::json!({"wikipedia_title": labels.get(gold).copied().unwrap_or(""), "wikidata_id": gold})
                        .to_string()
                });
                let replies = match (mode, select) {
                    (PromptMode::Chain, Some(sel)) => vec!["Yes".to_string(), sel],
                    (PromptMode::Chain, None) => vec!["No".to_string()],
                    (PromptMode::Single, Some(sel)) => vec![sel],
                    (PromptMode::Single, None) => vec!["{}".to_string()],
                };
                (m.mention_id.clone(), replies)
            })
            .collect()
    }
}

/// Files written by [`SyntheticWorld::write_files`], all inside one directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticPaths {
    pub kb_jsonl: PathBuf,
    pub kb_store: PathBuf,
    pub vectors: PathBuf,
    pub ids: PathBuf,
    pub corpus: PathBuf,
    pub chat_script: PathBuf,
    /// `link --config` file pointing at the files above with mock backends.
    pub config: PathBuf,
}

impl SyntheticWorld {
    pub fn write_files(&self, dir: &Path, mode: PromptMode) -> std::io::Result<SyntheticPaths> {
        let other = |e: &dyn std::fmt::Display| std::io::Error::other(e.to_string());
        fs::create_dir_all(dir)?;
        let paths = SyntheticPaths {
            kb_jsonl: dir.join("kb.jsonl"),
            kb_store: dir.join("kb.store"),
            vectors: dir.join("vectors.bin"),
            ids: dir.join("ids.jsonl"),
            corpus: dir.join("corpus.jsonl"),
            chat_script: dir.join("chat_script.json"),
            config: dir.join("config.json"),
        };
        write_kb_jsonl(&paths.kb_jsonl, &self.entities).map_err(|e| other(&e))?;
        KbStore::write(&paths.kb_store, &self.entities).map_err(|e| other(&e))?;
        self.matrix
            .write(&paths.vectors, &paths.ids)
            .map_err(|e| other(&e))?;
        write_corpus(&paths.corpus, &self.mentions).map_err(|e| other(&e))?;
        let script =
            serde_json::to_string_pretty(&self.chat_script(mode)).map_err(|e| other(&e))?;
        fs::write(&paths.chat_script, script + "\n")?;
        let config = serde_json::json!({
            "kb": "kb.store",
            "vectors": "vectors.bin",
            "ids": "ids.jsonl",
            "encoder_endpoint": "mock",
            "chat_endpoint": "mock:chat_script.json",
            "pipeline": PipelineConfig {
                prompt_mode: mode,
                ..PipelineConfig::default()
            },
        });
        fs::write(
            &paths.config,
            serde_json::to_string_pretty(&config).map_err(|e| other(&e))? + "\n",
        )?;
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, ChatParams, RetryingChat};
    use crate::retry::RetryPolicy;
    use std::time::Duration;

    fn req(mention: Option<&str>) -> ChatRequest {
        ChatRequest::new(vec![ChatMessage::user("u")], &ChatParams::default()).for_mention(mention)
    }

    #[test]
    fn mock_encoder_is_pure() {
        let enc = MockEncoder::new(8);
        let a = MarkedText::new("see [ENT] Paris [ENT] today", "en").unwrap();
        let v1 = enc.encode(&a).unwrap();
        assert_eq!(v1, enc.encode(&a).unwrap());
        assert_eq!(v1.len(), 8);
        assert!(v1.iter().all(|x| (-1.0..1.0).contains(x)));
        let b = MarkedText::new("see [ENT] Paris [ENT] today", "fr").unwrap();
        assert_ne!(v1, enc.encode(&b).unwrap());
        let c = MarkedText::new("see [ENT] Lyon [ENT] today", "en").unwrap();
        assert_ne!(v1, enc.encode(&c).unwrap());
        // the key does not affect the vector
        assert_eq!(v1, enc.encode(&a.clone().with_key("m9")).unwrap());
    }

    #[test]
    fn mock_seed_is_frozen() {
        // Cross-process stability: frozen from an independent sha256 of the same byte layout.
        assert_eq!(
            MockEncoder::seed("see [ENT] Paris [ENT] today", "en", 8),
            MOCK_SEED_PARIS_EN_8
        );
    }

    const MOCK_SEED_PARIS_EN_8: u64 = 2_568_422_685_235_553_513;

    #[test]
    fn list_script_consumed_in_order() {
        let chat = ScriptedChat::from_list(vec!["no".into()]);
        assert_eq!(chat.chat(&req(None)).unwrap(), "no");
        assert_eq!(chat.calls(), 1);
        assert!(matches!(chat.chat(&req(None)), Err(ChatError::Script(_))));
        assert_eq!(chat.calls(), 2);
    }

    #[test]
    fn keyed_script_per_mention() {
        let chat = ScriptedChat::from_map([("m1", vec!["yes", "{}"]), ("m2", vec!["no"])]);
        assert_eq!(chat.chat(&req(Some("m2"))).unwrap(), "no");
        assert_eq!(chat.chat(&req(Some("m1"))).unwrap(), "yes");
        assert_eq!(chat.chat(&req(Some("m1"))).unwrap(), "{}");
        assert!(chat.chat(&req(Some("m3"))).is_err());
        assert_eq!(chat.calls_for("m1"), 2);
        assert_eq!(chat.calls_for("m2"), 1);
        assert_eq!(chat.calls(), 4);
    }

    #[test]
    fn script_file_forms() {
        let l = ScriptedChat::from_json(r#"["yes", "{}"]"#).unwrap();
        assert_eq!(l.chat(&req(Some("x"))).unwrap(), "yes");
        let m = ScriptedChat::from_json(r#"{"m1": ["no"]}"#).unwrap();
        assert_eq!(m.chat(&req(Some("m1"))).unwrap(), "no");
        assert!(ScriptedChat::from_json(r#"{"m1": "no"}"#).is_err());
        assert!(ScriptedChat::from_json("42").is_err());
    }

    #[test]
    fn fail_once_then_succeed_observes_one_retry() {
        let chat = RetryingChat::new(
            FailingChat::new(ScriptedChat::constant("yes"), [0]),
            RetryPolicy {
                max_retries: 1,
                backoff: Duration::from_millis(1),
            },
        );
        assert_eq!(chat.chat(&req(None)).unwrap(), "yes");
        assert_eq!(chat.retries(), 1);
        assert_eq!(chat.inner().calls(), 2);
    }

    #[test]
    fn counters_are_exact_under_threads() {
        let chat = ScriptedChat::constant("no");
        std::thread::scope(|s| {
            for t in 0..8 {
                let chat = &chat;
                s.spawn(move || {
                    for _ in 0..250 {
                        chat.chat(&req(Some(&format!("m{t}")))).unwrap();
                    }
                });
            }
        });
        assert_eq!(chat.calls(), 2000);
        assert_eq!(chat.calls_for("m3"), 250);
    }
    #[test]
    fn synthetic_world_is_deterministic_and_bimodal() {
        let a = synthetic_world(7, 120, 60, 16);
        let b = synthetic_world(7, 120, 60, 16);
        assert_eq!(a.mentions, b.mentions);
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.entities.len(), 120);
        let enc = MockEncoder::new(16);
        let index = crate::index::VectorIndex::new(a.matrix.clone());
        let mut anchored_hits = 0;
        for m in &a.mentions {
            m.validate().unwrap();
            let v = enc.encode(&m.marked().unwrap()).unwrap();
            let top = &index.search(&v, 1).unwrap()[0];
            if Some(&top.qid) == m.gold_qid.as_ref() && top.score > 5.0 {
                anchored_hits += 1;
            }
        }
        assert!(anchored_hits > 15, "{anchored_hits}");
        assert!(anchored_hits < 50, "{anchored_hits}");
    }
    #[test]
    fn synthetic_files_load_back() {
        let world = synthetic_world(3, 40, 12, 8);
        let dir = tempfile::tempdir().unwrap();
        let paths = world.write_files(dir.path(), PromptMode::Chain).unwrap();
        assert_eq!(KbStore::open(&paths.kb_store).unwrap().len(), 40);
        let m = EmbeddingMatrix::load(&paths.vectors, &paths.ids).unwrap();
        assert_eq!(m, world.matrix);
        let corpus = crate::corpus::load_corpus(&paths.corpus).unwrap();
        assert_eq!(corpus.mentions, world.mentions);
        let chat = ScriptedChat::load(&paths.chat_script).unwrap();
        let first = &world.mentions[0].mention_id;
        let reply = chat.chat(&req(Some(first))).unwrap();
        assert!(reply == "Yes" || reply == "No");
        let script = world.chat_script(PromptMode::Single);
        assert!(script.values().all(|r| r.len() == 1));
    }
}
