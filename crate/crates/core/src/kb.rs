//! Entity metadata lookup table.
//!
//! Records are imported once from JSONL into a single store file and then
//! opened read-only. The file layout is:
//!
//! ```text
//! magic "MHELKB01" | count: u32 LE | index_len: u64 LE
//! index: count × (qid_len: u32 LE, qid bytes, offset: u64 LE, len: u32 LE), sorted by qid
//! data: concatenated JSON-encoded records; offsets are relative to the data start
//! ```
//!
//! Lookups go through the in-memory primary-key index and a positioned read,
//! so a single [`KbStore`] can be shared across threads without locking.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{HttpClient, HttpError};

const STORE_MAGIC: &[u8; 8] = b"MHELKB01";
const HEADER_LEN: u64 = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: missing or empty \"qid\"")]
    MissingQid { line: usize },
    #[error("duplicate qid {qid:?} on lines {first_line} and {second_line}")]
    DuplicateQid {
        qid: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("line {line}: invalid record {qid:?}: {reason}")]
    InvalidRecord {
        line: usize,
        qid: String,
        reason: String,
    },
    #[error("corrupt store {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("metadata endpoint returned HTTP status {status}")]
    RemoteStatus { status: u16 },
    #[error("metadata endpoint failure: {0}")]
    Remote(String),
    #[error("no qids requested")]
    EmptyRequest,
}

/// One knowledge-base entity with per-language labels and descriptions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub qid: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub descriptions: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub earliest_date: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_type: Option<String>,
}

impl EntityRecord {
    pub fn new(qid: impl Into<String>) -> Self {
        Self {
            qid: qid.into(),
            labels: BTreeMap::new(),
            descriptions: BTreeMap::new(),
            earliest_date: None,
            entity_type: None,
        }
    }

    pub fn with_label(mut self, lang: &str, label: &str) -> Self {
        self.labels.insert(lang.to_string(), label.to_string());
        self
    }

    pub fn with_description(mut self, lang: &str, description: &str) -> Self {
        self.descriptions
            .insert(lang.to_string(), description.to_string());
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.qid.trim().is_empty() {
            return Err("empty qid".into());
        }
        for lang in self.labels.keys().chain(self.descriptions.keys()) {
            if !is_language_code(lang) {
                return Err(format!(
                    "language code {lang:?} is not a lowercase primary subtag"
                ));
            }
        }
        if let Some(date) = &self.earliest_date {
            if !is_iso_date(date) {
                return Err(format!("earliest_date {date:?} is not an ISO-8601 date"));
            }
        }
        Ok(())
    }

    /// Overwrites the fields that `other` populates; everything else is kept.
    pub fn merge_from(&mut self, other: EntityRecord) {
        self.labels.extend(other.labels);
        self.descriptions.extend(other.descriptions);
        if other.earliest_date.is_some() {
            self.earliest_date = other.earliest_date;
        }
        if other.entity_type.is_some() {
            self.entity_type = other.entity_type;
        }
    }
}

/// BCP-47 primary language subtag, lowercase: 2 to 8 ASCII letters.
pub fn is_language_code(code: &str) -> bool {
    (2..=8).contains(&code.len()) && code.bytes().all(|b| b.is_ascii_lowercase())
}

/// Accepts `[+-]YYYY[-MM[-DD]]` with at least four year digits and a real calendar day.
/// Years may be signed so that BCE dates (as found in Wikidata) are representable.
pub fn is_iso_date(s: &str) -> bool {
    let (negative, body) = match s.as_bytes().first() {
        Some(b'+') => (false, &s[1..]),
        Some(b'-') => (true, &s[1..]),
        _ => (false, s),
    };
    let mut parts = body.split('-');
    let Some(year) = parts.next() else {
        return false;
    };
    if year.len() < 4 || !year.bytes().all(|b| b.is_ascii_digit()) {
        return false;
    }
    let Ok(year) = year.parse::<i64>() else {
        return false;
    };
    let year = if negative { -year } else { year };
    let month = match parts.next() {
        None => return true,
        Some(m) => m,
    };
    let Some(month) = two_digits(month).filter(|m| (1..=12).contains(m)) else {
        return false;
    };
    let day = match parts.next() {
        None => return true,
        Some(d) => d,
    };
    let Some(day) = two_digits(day) else {
        return false;
    };
    if parts.next().is_some() {
        return false;
    }
    let leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
    let days_in_month = match month {
        2 if leap => 29,
        2 => 28,
        4 | 6 | 9 | 11 => 30,
        _ => 31,
    };
    (1..=days_in_month).contains(&day)
}

fn two_digits(s: &str) -> Option<u32> {
    if s.len() == 2 && s.bytes().all(|b| b.is_ascii_digit()) {
        s.parse().ok()
    } else {
        None
    }
}

/// A retrieval candidate joined with its KB metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedCandidate {
    pub qid: String,
    pub score: f64,
    pub label: String,
    pub description: Option<String>,
    pub earliest_date: Option<String>,
    pub entity_type: Option<String>,
    /// Language of the chosen label; `None` when no label exists and the qid is used.
    pub label_language_used: Option<String>,
}

/// Picks a value by: requested language, then English, then the
/// lexicographically first language code.
fn pick_localized<'a>(
    values: &'a BTreeMap<String, String>,
    language: &str,
) -> Option<(&'a str, &'a str)> {
    values
        .get_key_value(language)
        .or_else(|| values.get_key_value("en"))
        .or_else(|| values.iter().next())
        .map(|(k, v)| (k.as_str(), v.as_str()))
}

/// Read-only handle on an imported store file.
#[derive(Debug)]
pub struct KbStore {
    path: PathBuf,
    file: File,
    data_start: u64,
    index: HashMap<String, (u64, u32)>,
}

impl KbStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| KbError::Io {
            path: path.clone(),
            source,
        };
        let corrupt = |reason: String| KbError::Corrupt {
            path: path.clone(),
            reason,
        };
        let mut file = File::open(&path).map_err(io)?;
        let file_len = file.metadata().map_err(io)?.len();
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut header)
            .map_err(|_| corrupt("truncated header".into()))?;
        if &header[..8] != STORE_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let count = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let index_len = u64::from_le_bytes(header[12..20].try_into().unwrap());
        if HEADER_LEN + index_len > file_len {
            return Err(corrupt(format!(
                "index of {index_len} bytes exceeds file length"
            )));
        }
        let mut raw = vec![0u8; index_len as usize];
        file.read_exact(&mut raw).map_err(io)?;
        let data_start = HEADER_LEN + index_len;
        let data_len = file_len - data_start;

        let mut index = HashMap::with_capacity(count);
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[u8], KbError> {
            let slice = raw
                .get(cursor..cursor + n)
                .ok_or_else(|| corrupt(format!("index truncated at byte {cursor}")))?;
            cursor += n;
            Ok(slice)
        };
        for _ in 0..count {
            let qid_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let qid = std::str::from_utf8(take(qid_len)?)
                .map_err(|_| corrupt("non-UTF-8 qid in index".into()))?
                .to_string();
            let offset = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap());
            if offset + u64::from(len) > data_len {
                return Err(corrupt(format!("record {qid:?} points past end of file")));
            }
            if index.insert(qid.clone(), (offset, len)).is_some() {
                return Err(corrupt(format!("duplicate qid {qid:?} in index")));
            }
        }
        Ok(Self {
            path,
            file,
            data_start,
            index,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, qid: &str) -> bool {
        self.index.contains_key(qid)
    }

    /// Looks up a record by qid. Absence is `Ok(None)`; only I/O or corruption fails.
    pub fn get_entity(&self, qid: &str) -> Result<Option<EntityRecord>, KbError> {
        let Some(&(offset, len)) = self.index.get(qid) else {
            return Ok(None);
        };
        let mut buf = vec![0u8; len as usize];
        read_exact_at(&self.file, &mut buf, self.data_start + offset).map_err(|source| {
            KbError::Io {
                path: self.path.clone(),
                source,
            }
        })?;
        let record = serde_json::from_slice(&buf).map_err(|e| KbError::Corrupt {
            path: self.path.clone(),
            reason: format!("record {qid:?}: {e}"),
        })?;
        Ok(Some(record))
    }

    /// All records, ordered by qid.
    pub fn records(&self) -> Result<Vec<EntityRecord>, KbError> {
        let mut qids: Vec<&String> = self.index.keys().collect();
        qids.sort();
        qids.into_iter()
            .map(|q| self.get_entity(q).map(|r| r.expect("indexed qid")))
            .collect()
    }

    /// Joins ranked candidates with their metadata. Order and scores pass
    /// through untouched; unknown qids get the qid as label and no metadata.
    pub fn enrich<'a, I>(
        &self,
        candidates: I,
        language: &str,
    ) -> Result<Vec<EnrichedCandidate>, KbError>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        candidates
            .into_iter()
            .map(|(qid, score)| {
                let Some(record) = self.get_entity(qid)? else {
                    return Ok(EnrichedCandidate {
                        qid: qid.to_string(),
                        score,
                        label: qid.to_string(),
                        description: None,
                        earliest_date: None,
                        entity_type: None,
                        label_language_used: None,
                    });
                };
                let (label, lang) = match pick_localized(&record.labels, language) {
                    Some((lang, label)) if !label.is_empty() => {
                        (label.to_string(), Some(lang.to_string()))
                    }
                    _ => (qid.to_string(), None),
                };
                let description =
                    pick_localized(&record.descriptions, language).map(|(_, d)| d.to_string());
                Ok(EnrichedCandidate {
                    qid: qid.to_string(),
                    score,
                    label,
                    description,
                    earliest_date: record.earliest_date,
                    entity_type: record.entity_type,
                    label_language_used: lang,
                })
            })
            .collect()
    }

    /// Writes `records` to a fresh store file at `path` (replacing any existing file).
    pub fn write(path: impl AsRef<Path>, records: &[EntityRecord]) -> Result<Self, KbError> {
        let path = path.as_ref();
        let io = |source| KbError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut sorted: Vec<&EntityRecord> = records.iter().collect();
        sorted.sort_by(|a, b| a.qid.cmp(&b.qid));

        let mut index = Vec::new();
        let mut data = Vec::new();
        for record in sorted {
            let bytes = serde_json::to_vec(record).expect("records serialize");
            let qid = record.qid.as_bytes();
            index.extend_from_slice(&(qid.len() as u32).to_le_bytes());
            index.extend_from_slice(qid);
            index.extend_from_slice(&(data.len() as u64).to_le_bytes());
            index.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            data.extend_from_slice(&bytes);
        }

        let tmp = path.with_extension("tmp");
        {
            let mut out = BufWriter::new(File::create(&tmp).map_err(io)?);
            out.write_all(STORE_MAGIC).map_err(io)?;
            out.write_all(&(records.len() as u32).to_le_bytes())
                .map_err(io)?;
            out.write_all(&(index.len() as u64).to_le_bytes())
                .map_err(io)?;
            out.write_all(&index).map_err(io)?;
            out.write_all(&data).map_err(io)?;
            out.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)?;
        Self::open(path)
    }

    /// Merges fetched records into the store at `path`, rewriting it.
    /// Existing records keep fields the incoming record leaves unpopulated.
    pub fn merge(path: impl AsRef<Path>, incoming: Vec<EntityRecord>) -> Result<Self, KbError> {
        let path = path.as_ref();
        let mut by_qid: BTreeMap<String, EntityRecord> = Self::open(path)?
            .records()?
            .into_iter()
            .map(|r| (r.qid.clone(), r))
            .collect();
        for (i, record) in incoming.into_iter().enumerate() {
            record.validate().map_err(|reason| KbError::InvalidRecord {
                line: i + 1,
                qid: record.qid.clone(),
                reason,
            })?;
            match by_qid.get_mut(&record.qid) {
                Some(existing) => existing.merge_from(record),
                None => {
                    by_qid.insert(record.qid.clone(), record);
                }
            }
        }
        let records: Vec<EntityRecord> = by_qid.into_values().collect();
        Self::write(path, &records)
    }
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_exact_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}

/// Parses KB JSONL into validated records. Blank lines are skipped.
pub fn parse_kb_jsonl(reader: impl BufRead) -> Result<Vec<EntityRecord>, KbError> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| KbError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| KbError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        match value.get("qid") {
            Some(serde_json::Value::String(q)) if !q.trim().is_empty() => {}
            _ => return Err(KbError::MissingQid { line: line_no }),
        }
        let record: EntityRecord = serde_json::from_value(value).map_err(|e| KbError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate().map_err(|reason| KbError::InvalidRecord {
            line: line_no,
            qid: record.qid.clone(),
            reason,
        })?;
        if let Some(&first_line) = seen.get(&record.qid) {
            return Err(KbError::DuplicateQid {
                qid: record.qid,
                first_line,
                second_line: line_no,
            });
        }
        seen.insert(record.qid.clone(), line_no);
        records.push(record);
    }
    Ok(records)
}

/// Imports a KB JSONL file into a new store at `out`. Returns the opened store
/// and the number of records ingested.
pub fn import_kb(
    jsonl: impl AsRef<Path>,
    out: impl AsRef<Path>,
) -> Result<(KbStore, usize), KbError> {
    let jsonl = jsonl.as_ref();
    let file = File::open(jsonl).map_err(|source| KbError::Io {
        path: jsonl.to_path_buf(),
        source,
    })?;
    let records = parse_kb_jsonl(BufReader::new(file))?;
    let count = records.len();
    let store = KbStore::write(out, &records)?;
    Ok((store, count))
}

/// Writes records as KB JSONL (one object per line, LF endings).
pub fn write_kb_jsonl(path: impl AsRef<Path>, records: &[EntityRecord]) -> Result<(), KbError> {
    let path = path.as_ref();
    let io = |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for record in records {
        serde_json::to_writer(&mut out, record).expect("records serialize");
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Result of a remote metadata fetch: resolved records in request order plus
/// the qids the endpoint did not return.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteFetch {
    pub records: Vec<EntityRecord>,
    pub unresolved: Vec<String>,
}

#[derive(Deserialize)]
struct RemoteEntity {
    #[serde(default)]
    labels: BTreeMap<String, String>,
    #[serde(default)]
    descriptions: BTreeMap<String, String>,
    #[serde(default)]
    earliest_date: Option<String>,
    #[serde(default)]
    entity_type: Option<String>,
}

/// Fetches entity metadata via `GET {endpoint}?ids=Q1|Q2`. The response is a
/// JSON object keyed by qid carrying the KB JSONL field names.
pub fn fetch_remote_metadata(
    qids: &[String],
    endpoint: &str,
    client: &HttpClient,
) -> Result<RemoteFetch, KbError> {
    if qids.is_empty() {
        return Err(KbError::EmptyRequest);
    }
    let ids = qids.join("|");
    let (result, _retries) =
        client.get_json::<BTreeMap<String, Option<RemoteEntity>>>(endpoint, &[("ids", &ids)]);
    let mut body = result.map_err(|e| match e {
        HttpError::Status { status, .. } => KbError::RemoteStatus { status },
        other => KbError::Remote(other.to_string()),
    })?;

    let mut fetch = RemoteFetch {
        records: Vec::new(),
        unresolved: Vec::new(),
    };
    for qid in qids {
        match body.remove(qid).flatten() {
            Some(remote) => fetch.records.push(EntityRecord {
                qid: qid.clone(),
                labels: remote.labels,
                descriptions: remote.descriptions,
                earliest_date: remote.earliest_date,
                entity_type: remote.entity_type,
            }),
            None => fetch.unresolved.push(qid.clone()),
        }
    }
    Ok(fetch)
}
