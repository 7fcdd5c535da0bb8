//! Threshold and block-size selection from development-set retrievals.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::NIL;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no dev record has a correct rank-1 candidate; the threshold is undefined")]
    NoCorrectPredictions,
    #[error("every dev record has NIL gold; recall is undefined")]
    AllNil,
    #[error("block-size selection needs at least two k steps, got {0}")]
    TooFewSteps(usize),
    #[error("k steps must be strictly increasing and at least 1: {0:?}")]
    BadSteps(Vec<usize>),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A hit in a dev-retrieval dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredQid {
    pub qid: String,
    pub score: f64,
}

/// Ranked retrieval output for one dev mention; hits are sorted by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevRetrievalRecord {
    pub mention_id: String,
    pub gold_qid: String,
    pub hits: Vec<ScoredQid>,
}

impl DevRetrievalRecord {
    fn top_correct(&self) -> Option<f64> {
        let top = self.hits.first()?;
        (self.gold_qid != NIL && top.qid == self.gold_qid).then_some(top.score)
    }
}

/// Which dev predictions count as correct when collecting scores for θ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectRule {
    /// Rank-1 hit equals gold; its score is used.
    #[default]
    TopOne,
    /// Gold appears anywhere in the hits; the gold hit's score is used.
    GoldInHits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub k_steps: Vec<usize>,
    pub epsilon: f64,
    pub correct_rule: CorrectRule,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            k_steps: vec![10, 20, 30, 40, 50],
            epsilon: 0.01,
            correct_rule: CorrectRule::TopOne,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        check_steps(&self.k_steps)?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CalibrationError::BadEpsilon(self.epsilon));
        }
        Ok(())
    }
}

fn check_steps(steps: &[usize]) -> Result<(), CalibrationError> {
    if steps.len() < 2 {
        return Err(CalibrationError::TooFewSteps(steps.len()));
    }
    if steps[0] == 0 || steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CalibrationError::BadSteps(steps.to_vec()));
    }
    Ok(())
}

/// Median; an even count averages the middle pair.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    })
}

/// θ as the median score of correct rank-1 predictions.
pub fn calibrate_threshold(records: &[DevRetrievalRecord]) -> Result<f64, CalibrationError> {
    calibrate_threshold_with(records, CorrectRule::TopOne)
}

pub fn calibrate_threshold_with(
    records: &[DevRetrievalRecord],
    rule: CorrectRule,
) -> Result<f64, CalibrationError> {
    let mut scores: Vec<f64> = match rule {
        CorrectRule::TopOne => records.iter().filter_map(|r| r.top_correct()).collect(),
        CorrectRule::GoldInHits => records
            .iter()
            .filter(|r| r.gold_qid != NIL)
            .filter_map(|r| r.hits.iter().find(|h| h.qid == r.gold_qid).map(|h| h.score))
            .collect(),
    };
    median(&mut scores).ok_or(CalibrationError::NoCorrectPredictions)
}

/// Fraction of non-NIL-gold records whose gold is in the first `k` hits.
pub fn recall_at_k(records: &[DevRetrievalRecord], k: usize) -> Result<f64, CalibrationError> {
    if k == 0 {
        return Err(CalibrationError::ZeroK);
    }
    let (mut found, mut total) = (0usize, 0usize);
    for r in records.iter().filter(|r| r.gold_qid != NIL) {
        total += 1;
        found += usize::from(r.hits.iter().take(k).any(|h| h.qid == r.gold_qid));
    }
    if total == 0 {
        return Err(CalibrationError::AllNil);
    }
    Ok(found as f64 / total as f64)
}

/// (k, Recall@k) at every step.
pub fn recall_curve(
    records: &[DevRetrievalRecord],
    k_steps: &[usize],
) -> Result<Vec<(usize, f64)>, CalibrationError> {
    k_steps
        .iter()
        .map(|&k| recall_at_k(records, k).map(|r| (k, r)))
        .collect()
}

/// First step whose next increment is below `epsilon`; the last step otherwise.
pub fn select_block_size_from_curve(
    curve: &[(usize, f64)],
    epsilon: f64,
) -> Result<usize, CalibrationError> {
    let steps: Vec<usize> = curve.iter().map(|&(k, _)| k).collect();
    check_steps(&steps)?;
    Ok(curve
        .windows(2)
        .find(|w| w[1].1 - w[0].1 < epsilon)
        .map_or(steps[steps.len() - 1], |w| w[0].0))
}

pub fn select_block_size(
    records: &[DevRetrievalRecord],
    config: &CalibrationConfig,
) -> Result<usize, CalibrationError> {
    config.validate()?;
    let curve = recall_curve(records, &config.k_steps)?;
    select_block_size_from_curve(&curve, config.epsilon)
}

/// Reads a dev-retrieval dump (JSONL with `mention_id`, `gold_qid`, `hits`).
pub fn load_dev_retrievals(
    path: impl AsRef<Path>,
) -> Result<Vec<DevRetrievalRecord>, CalibrationError> {
    let path = path.as_ref();
    let io = |source| CalibrationError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CalibrationError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DevRetrievalRecord =
            serde_json::from_str(&line).map_err(|e| CalibrationError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if rec.hits.windows(2).any(|w| w[0].score < w[1].score) {
            return Err(CalibrationError::Parse {
                line: i + 1,
                message: "hits are not sorted by descending score".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}
