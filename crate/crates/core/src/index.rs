//! Exact inner-product k-NN over precomputed entity embeddings.
//!
//! Scores are accumulated in `f32` in ascending column order with plain
//! scalar adds, so every score is bit-stable across runs and identical to the
//! naive full scan in [`brute_force_search`].

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VECTOR_MAGIC: &[u8; 8] = b"MHELVEC1";
const VECTOR_HEADER_LEN: usize = 16;
/// Below this many rows a single sequential scan beats splitting work across threads.
const PARALLEL_MIN_ROWS: usize = 8192;
const ROWS_PER_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, expected MHELVEC1")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated at byte offset {offset}, expected {expected} bytes")]
    Truncated {
        path: PathBuf,
        offset: usize,
        expected: usize,
    },
    #[error("{path}: {extra} trailing bytes after offset {offset}")]
    TrailingBytes {
        path: PathBuf,
        offset: usize,
        extra: usize,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("dimension must be at least 1")]
    ZeroDim,
    #[error("{ids} ids for {rows} vector rows")]
    CountMismatch { rows: usize, ids: usize },
    #[error("data length {len} is not count {count} × dim {dim}")]
    DataLength {
        len: usize,
        count: usize,
        dim: usize,
    },
    #[error("ids line {line}: {reason}")]
    BadId { line: usize, reason: String },
    #[error("duplicate id {id:?} on ids lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("query has dimension {got}, index has {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("query contains a non-finite value at column {col}")]
    NonFiniteQuery { col: usize },
    #[error("k must be at least 1")]
    ZeroK,
}

/// Row-major `count × dim` matrix of entity embeddings with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self, IndexError> {
        if dim == 0 {
            return Err(IndexError::ZeroDim);
        }
        if data.len() % dim != 0 {
            return Err(IndexError::DataLength {
                len: data.len(),
                count: ids.len(),
                dim,
            });
        }
        let rows = data.len() / dim;
        if rows != ids.len() {
            return Err(IndexError::CountMismatch {
                rows,
                ids: ids.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let mut seen = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if let Some(first) = seen.insert(id.as_str(), i) {
                return Err(IndexError::DuplicateId {
                    id: id.clone(),
                    first_line: first + 1,
                    second_line: i + 1,
                });
            }
        }
        Ok(Self { dim, data, ids })
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Reads a vector file and its ids file.
    pub fn load(
        vectors_path: impl AsRef<Path>,
        ids_path: impl AsRef<Path>,
    ) -> Result<Self, IndexError> {
        let (count, dim, data) = read_vector_file(vectors_path.as_ref())?;
        let ids = read_ids_file(ids_path.as_ref())?;
        if ids.len() != count {
            return Err(IndexError::CountMismatch {
                rows: count,
                ids: ids.len(),
            });
        }
        Self::new(ids, dim, data)
    }

    pub fn write(
        &self,
        vectors_path: impl AsRef<Path>,
        ids_path: impl AsRef<Path>,
    ) -> Result<(), IndexError> {
        write_vector_file(vectors_path.as_ref(), self.dim, &self.data)?;
        write_ids_file(ids_path.as_ref(), &self.ids)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IndexError + '_ {
    move |source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses an `MHELVEC1` file: magic, count (u32 LE), dim (u32 LE), then
/// count × dim little-endian binary32 values, row-major.
pub fn read_vector_file(path: &Path) -> Result<(usize, usize, Vec<f32>), IndexError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 8 || &bytes[..8] != VECTOR_MAGIC {
        return Err(IndexError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < VECTOR_HEADER_LEN {
        return Err(IndexError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            expected: VECTOR_HEADER_LEN,
        });
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(IndexError::ZeroDim);
    }
    let expected = VECTOR_HEADER_LEN + count * dim * 4;
    if bytes.len() < expected {
        return Err(IndexError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            expected,
        });
    }
    if bytes.len() > expected {
        return Err(IndexError::TrailingBytes {
            path: path.to_path_buf(),
            offset: expected,
            extra: bytes.len() - expected,
        });
    }
    let data: Vec<f32> = bytes[VECTOR_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(IndexError::NonFinite {
            row: pos / dim,
            col: pos % dim,
        });
    }
    Ok((count, dim, data))
}

pub fn write_vector_file(path: &Path, dim: usize, data: &[f32]) -> Result<(), IndexError> {
    if dim == 0 {
        return Err(IndexError::ZeroDim);
    }
    let count = data.len() / dim;
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut header = Vec::with_capacity(VECTOR_HEADER_LEN);
    header.extend_from_slice(VECTOR_MAGIC);
    header.extend_from_slice(&(count as u32).to_le_bytes());
    header.extend_from_slice(&(dim as u32).to_le_bytes());
    out.write_all(&header).map_err(io_err(path))?;
    for v in data {
        out.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

#[derive(Serialize, Deserialize)]
struct IdLine {
    qid: String,
}

/// Reads an ids file: one `{"qid": "..."}` object per line, line i naming row i.
pub fn read_ids_file(path: &Path) -> Result<Vec<String>, IndexError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut ids = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: IdLine = serde_json::from_str(&line).map_err(|e| IndexError::BadId {
            line: line_no,
            reason: e.to_string(),
        })?;
        if parsed.qid.is_empty() {
            return Err(IndexError::BadId {
                line: line_no,
                reason: "empty qid".into(),
            });
        }
        if let Some(&first_line) = seen.get(&parsed.qid) {
            return Err(IndexError::DuplicateId {
                id: parsed.qid,
                first_line,
                second_line: line_no,
            });
        }
        seen.insert(parsed.qid.clone(), line_no);
        ids.push(parsed.qid);
    }
    Ok(ids)
}

pub fn write_ids_file(path: &Path, ids: &[String]) -> Result<(), IndexError> {
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for id in ids {
        serde_json::to_writer(&mut out, &IdLine { qid: id.clone() }).expect("ids serialize");
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// One ranked retrieval result. `score` holds the `f32` inner product widened losslessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub qid: String,
    pub score: f64,
    pub rank: usize,
}

/// Immutable exact-search index.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    matrix: EmbeddingMatrix,
}

#[derive(Clone, Copy)]
struct Scored<'a> {
    score: f32,
    id: &'a str,
}

impl Scored<'_> {
    /// `Greater` means ranked earlier: higher score, then smaller id.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        self.score
            .partial_cmp(&other.score)
            .expect("scores are finite")
            .then_with(|| other.id.cmp(self.id))
    }
}

impl PartialEq for Scored<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}
impl Eq for Scored<'_> {}
impl PartialOrd for Scored<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scored<'_> {
    // reversed so that BinaryHeap keeps the worst-ranked entry on top
    fn cmp(&self, other: &Self) -> Ordering {
        other.rank_cmp(self)
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

fn check_query(dim: usize, query: &[f32], k: usize) -> Result<(), IndexError> {
    if k == 0 {
        return Err(IndexError::ZeroK);
    }
    if query.len() != dim {
        return Err(IndexError::DimMismatch {
            expected: dim,
            got: query.len(),
        });
    }
    if let Some(col) = query.iter().position(|v| !v.is_finite()) {
        return Err(IndexError::NonFiniteQuery { col });
    }
    Ok(())
}

impl VectorIndex {
    pub fn new(matrix: EmbeddingMatrix) -> Self {
        Self { matrix }
    }

    pub fn load(
        vectors_path: impl AsRef<Path>,
        ids_path: impl AsRef<Path>,
    ) -> Result<Self, IndexError> {
        EmbeddingMatrix::load(vectors_path, ids_path).map(Self::new)
    }

    pub fn count(&self) -> usize {
        self.matrix.count()
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    /// Top-`k` rows by inner product with `query`, descending, ties broken by id ascending.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<RetrievalHit>, IndexError> {
        check_query(self.dim(), query, k)?;
        let count = self.count();
        let k = k.min(count);
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut best = if count >= PARALLEL_MIN_ROWS {
            let chunks: Vec<Vec<Scored>> = (0..count)
                .into_par_iter()
                .step_by(ROWS_PER_CHUNK)
                .map(|start| self.top_k_rows(query, k, start..(start + ROWS_PER_CHUNK).min(count)))
                .collect();
            let mut merged = BinaryHeap::with_capacity(k + 1);
            for s in chunks.into_iter().flatten() {
                push_bounded(&mut merged, s, k);
            }
            merged.into_vec()
        } else {
            self.top_k_rows(query, k, 0..count)
        };
        best.sort_by(|a, b| b.rank_cmp(a));
        Ok(best
            .into_iter()
            .enumerate()
            .map(|(i, s)| RetrievalHit {
                qid: s.id.to_string(),
                score: f64::from(s.score),
                rank: i + 1,
            })
            .collect())
    }

    fn top_k_rows(&self, query: &[f32], k: usize, rows: std::ops::Range<usize>) -> Vec<Scored<'_>> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        for row in rows {
            let s = Scored {
                score: dot(self.matrix.row(row), query),
                id: &self.matrix.ids[row],
            };
            push_bounded(&mut heap, s, k);
        }
        heap.into_vec()
    }

    /// Raw embedding row for `id`, if present.
    pub fn vector_of(&self, id: &str) -> Option<&[f32]> {
        self.matrix.position(id).map(|i| self.matrix.row(i))
    }
}

fn push_bounded<'a>(heap: &mut BinaryHeap<Scored<'a>>, s: Scored<'a>, k: usize) {
    if heap.len() < k {
        heap.push(s);
    } else if let Some(worst) = heap.peek() {
        if s.rank_cmp(worst) == Ordering::Greater {
            heap.pop();
            heap.push(s);
        }
    }
}

/// Naive full scan: scores every row, sorts everything, truncates to `k`.
/// Reference implementation for [`VectorIndex::search`].
pub fn brute_force_search(
    matrix: &EmbeddingMatrix,
    query: &[f32],
    k: usize,
) -> Result<Vec<RetrievalHit>, IndexError> {
    check_query(matrix.dim(), query, k)?;
    let mut all: Vec<(f32, &str)> = (0..matrix.count())
        .map(|i| {
            let score = matrix
                .row(i)
                .iter()
                .zip(query)
                .fold(0.0f32, |acc, (x, q)| acc + x * q);
            (score, matrix.ids[i].as_str())
        })
        .collect();
    all.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.1.cmp(b.1))
    });
    Ok(all
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (score, id))| RetrievalHit {
            qid: id.to_string(),
            score: f64::from(score),
            rank: i + 1,
        })
        .collect())
}

/// Outcome of [`VectorIndex::self_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    pub queries: usize,
    pub k: usize,
    /// Queries whose results differ from the brute-force scan.
    pub mismatches: Vec<usize>,
}

impl VectorIndex {
    /// Compares [`VectorIndex::search`] with [`brute_force_search`] on `samples`
    /// queries: stored rows (exercising self-matches and ties) alternating with
    /// uniform random vectors in [-1, 1).
    pub fn self_check(&self, samples: usize, k: usize, seed: u64) -> Result<SelfCheck, IndexError> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mismatches = Vec::new();
        for q in 0..samples {
            let query: Vec<f32> = if q % 2 == 0 && self.count() > 0 {
                self.matrix.row(rng.random_range(0..self.count())).to_vec()
            } else {
                (0..self.dim())
                    .map(|_| rng.random_range(-1.0f32..1.0))
                    .collect()
            };
            if self.search(&query, k)? != brute_force_search(&self.matrix, &query, k)? {
                mismatches.push(q);
            }
        }
        Ok(SelfCheck {
            queries: samples,
            k,
            mismatches,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("Q{}", i + 1)).collect()
    }

    fn identity3() -> EmbeddingMatrix {
        EmbeddingMatrix::new(ids(3), 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn identity_query_hits_own_row() {
        let index = VectorIndex::new(identity3());
        let hits = index.search(&[0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].qid, "Q2");
        assert_eq!(hits[0].score, 1.0);
        assert_eq!(hits[0].rank, 1);
        assert_eq!(
            brute_force_search(index.matrix(), &[0.0, 1.0, 0.0], 1).unwrap(),
            hits
        );
    }

    #[test]
    fn k_larger_than_count() {
        let m = EmbeddingMatrix::new(ids(4), 2, vec![1.0; 8]).unwrap();
        let index = VectorIndex::new(m.clone());
        assert_eq!(index.search(&[1.0, 2.0], 10).unwrap().len(), 4);
        assert_eq!(brute_force_search(&m, &[1.0, 2.0], 10).unwrap().len(), 4);
    }

    #[test]
    fn ties_break_by_id() {
        let m = EmbeddingMatrix::new(
            vec!["Q9".into(), "Q10".into(), "Q2".into()],
            1,
            vec![1.0, 1.0, 1.0],
        )
        .unwrap();
        let hits = VectorIndex::new(m).search(&[1.0], 3).unwrap();
        let got: Vec<_> = hits.iter().map(|h| h.qid.as_str()).collect();
        assert_eq!(got, ["Q10", "Q2", "Q9"]);
    }

    #[test]
    fn query_errors() {
        let index = VectorIndex::new(identity3());
        assert!(matches!(
            index.search(&[1.0, 0.0], 1),
            Err(IndexError::DimMismatch { .. })
        ));
        assert!(matches!(
            index.search(&[f32::NAN, 0.0, 0.0], 1),
            Err(IndexError::NonFiniteQuery { col: 0 })
        ));
        assert!(matches!(
            index.search(&[1.0, 0.0, 0.0], 0),
            Err(IndexError::ZeroK)
        ));
    }

    #[test]
    fn empty_index_returns_nothing() {
        let index = VectorIndex::new(EmbeddingMatrix::new(vec![], 4, vec![]).unwrap());
        assert!(index.search(&[0.0; 4], 5).unwrap().is_empty());
    }

    #[test]
    fn load_validates_files() {
        let dir = tempfile::tempdir().unwrap();
        let vec_path = dir.path().join("v.bin");
        let ids_path = dir.path().join("ids.jsonl");
        let data: Vec<f32> = (0..800).map(|i| i as f32 * 0.5).collect();
        let m = EmbeddingMatrix::new(ids(100), 8, data.clone()).unwrap();
        m.write(&vec_path, &ids_path).unwrap();
        let index = VectorIndex::load(&vec_path, &ids_path).unwrap();
        assert_eq!((index.count(), index.dim()), (100, 8));

        write_ids_file(&ids_path, &ids(99)).unwrap();
        assert!(matches!(
            VectorIndex::load(&vec_path, &ids_path),
            Err(IndexError::CountMismatch { rows: 100, ids: 99 })
        ));
        write_ids_file(&ids_path, &ids(100)).unwrap();

        let mut bad = data.clone();
        bad[8 * 37 + 3] = f32::NAN;
        write_vector_file(&vec_path, 8, &bad).unwrap();
        assert!(matches!(
            VectorIndex::load(&vec_path, &ids_path),
            Err(IndexError::NonFinite { row: 37, col: 3 })
        ));

        write_vector_file(&vec_path, 8, &data).unwrap();
        let bytes = std::fs::read(&vec_path).unwrap();
        std::fs::write(&vec_path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            VectorIndex::load(&vec_path, &ids_path),
            Err(IndexError::Truncated { .. })
        ));

        let mut wrong = bytes.clone();
        wrong[..8].copy_from_slice(b"NOTMHEL1");
        std::fs::write(&vec_path, &wrong).unwrap();
        assert!(matches!(
            VectorIndex::load(&vec_path, &ids_path),
            Err(IndexError::BadMagic { .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ids.jsonl");
        std::fs::write(&p, "{\"qid\":\"Q1\"}\n{\"qid\":\"Q2\"}\n{\"qid\":\"Q1\"}\n").unwrap();
        assert!(matches!(
            read_ids_file(&p),
            Err(IndexError::DuplicateId {
                first_line: 1,
                second_line: 3,
                ..
            })
        ));
    }

    fn matrix_and_query() -> impl Strategy<Value = (EmbeddingMatrix, Vec<f32>, usize)> {
        (1usize..200, 1usize..17).prop_flat_map(|(count, dim)| {
            (
                prop::collection::vec(-4.0f32..4.0, count * dim),
                prop::collection::vec(-4.0f32..4.0, dim),
                1usize..250,
            )
                .prop_map(move |(data, query, k)| {
                    (
                        EmbeddingMatrix::new(ids(count), dim, data).unwrap(),
                        query,
                        k,
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn search_matches_brute_force((m, q, k) in matrix_and_query()) {
            let index = VectorIndex::new(m.clone());
            let fast = index.search(&q, k).unwrap();
            let slow = brute_force_search(&m, &q, k).unwrap();
            prop_assert_eq!(fast.len(), k.min(m.count()));
            prop_assert_eq!(&fast, &slow);
            for w in fast.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            prop_assert_eq!(index.search(&q, k).unwrap(), fast);
        }

        #[test]
        fn vector_file_round_trip(data in prop::collection::vec(-1e6f32..1e6, 0..64)) {
            let dim = 4;
            let n = data.len() / dim;
            let m = EmbeddingMatrix::new(ids(n), dim, data[..n * dim].to_vec()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let (v, i) = (dir.path().join("v.bin"), dir.path().join("i.jsonl"));
            m.write(&v, &i).unwrap();
            prop_assert_eq!(EmbeddingMatrix::load(&v, &i).unwrap(), m);
        }
    }
    #[test]
    fn self_check_agrees_on_parallel_sized_index() {
        let n = PARALLEL_MIN_ROWS + 100;
        let data: Vec<f32> = (0..n * 4).map(|i| ((i * 7919) % 13) as f32 - 6.0).collect();
        let index = VectorIndex::new(EmbeddingMatrix::new(ids(n), 4, data).unwrap());
        let report = index.self_check(6, 25, 3).unwrap();
        assert_eq!(report.queries, 6);
        assert!(report.mismatches.is_empty());
    }
}
