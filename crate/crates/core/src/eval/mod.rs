//! Scoring: accuracy and link-only F1, NIL detection, score/correctness
//! correlation and the error-relation tally.

mod errors;
mod metrics;
pub mod stats;

pub use errors::{
    load_error_annotations, tally_error_relations, ErrorAnnotation, ErrorRelation, ErrorTally,
};
pub use metrics::{
    correlation_t_test, harmonic_f1, join_gold, micro_scores, nil_scores, pairs_from_predictions,
    point_biserial, score_correlation, CorrelationReport, EvalPair, MicroScores, NilReport, Prf,
};

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{recall_curve, CalibrationError, DevRetrievalRecord};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no pairs to evaluate")]
    Empty,
    #[error("prediction for {0:?} has no gold label")]
    MissingGold(String),
    #[error("gold mention {0:?} has no prediction")]
    MissingPrediction(String),
    #[error("duplicate mention_id {0:?}")]
    DuplicateId(String),
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("correlation needs at least 3 points, got {0}")]
    TooFew(usize),
    #[error("correctness has a single class; correlation is undefined")]
    SingleClass,
    #[error("scores have zero variance; correlation is undefined")]
    ZeroVariance,
    #[error("scores must be finite")]
    NonFinite,
    #[error("{0}")]
    Io(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

#[derive(Deserialize)]
struct GoldLine {
    mention_id: String,
    gold_qid: Option<String>,
}

/// Reads `mention_id -> gold_qid` from any JSONL carrying both keys (a corpus
/// file works). Lines without a gold label are skipped.
pub fn load_gold(path: impl AsRef<Path>) -> Result<HashMap<String, String>, EvalError> {
    let path = path.as_ref();
    let io = |e: std::io::Error| EvalError::Io(format!("{}: {e}", path.display()));
    let file = File::open(path).map_err(io)?;
    let mut gold = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GoldLine = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let Some(q) = g.gold_qid else { continue };
        if gold.insert(g.mention_id.clone(), q).is_some() {
            return Err(EvalError::DuplicateId(g.mention_id));
        }
    }
    Ok(gold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub k: usize,
    pub recall: f64,
}

/// Recall@k at each step.
pub fn retrieval_recall_report(
    records: &[DevRetrievalRecord],
    k_steps: &[usize],
) -> Result<Vec<RecallPoint>, EvalError> {
    Ok(recall_curve(records, k_steps)?
        .into_iter()
        .map(|(k, recall)| RecallPoint { k, recall })
        .collect())
}

/// Everything `evaluate` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub micro: MicroScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nil: Option<NilReport>,
}

impl EvaluationReport {
    pub fn compute(pairs: &[EvalPair], with_nil: bool) -> Result<Self, EvalError> {
        Ok(Self {
            micro: micro_scores(pairs)?,
            nil: if with_nil {
                Some(nil_scores(pairs)?)
            } else {
                None
            },
        })
    }

    pub fn render_table(&self) -> String {
        let m = &self.micro;
        let mut lines = vec![
            format!("mentions          {}", m.n),
            format!("accuracy (F1)     {:.3}", m.accuracy_f1),
            format!(
                "link-only P/R/F1  {:.3} / {:.3} / {:.3}",
                m.link_only.precision, m.link_only.recall, m.link_only.f1
            ),
        ];
        if let Some(n) = &self.nil {
            lines.push(format!(
                "NIL P/R/F1        {:.3} / {:.3} / {:.3}  (tp {} fp {} fn {})",
                n.precision, n.recall, n.f1, n.tp, n.fp, n.fn_
            ));
        }
        lines.join("\n")
    }
}

impl CorrelationReport {
    pub fn render_table(&self) -> String {
        format!(
            "n        {}\nr_pb     {:.3}\nt        {:.3}\np-value  {:.3e}",
            self.n, self.r_pb, self.t_stat, self.p_value
        )
    }
}
