use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::stats::student_t_two_sided;
use super::EvalError;
use crate::corpus::PredictionRecord;
use crate::llm::NIL;

/// One scored mention: gold and predicted labels, NIL included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub mention_id: String,
    pub gold: String,
    pub pred: String,
    pub top_score: Option<f64>,
}

impl EvalPair {
    pub fn is_correct(&self) -> bool {
        self.gold == self.pred
    }
}

/// Joins predictions with gold labels on mention_id. Both sides must cover
/// the same mention ids.
pub fn join_gold(
    predictions: &[PredictionRecord],
    gold: &HashMap<String, String>,
) -> Result<Vec<EvalPair>, EvalError> {
    let mut seen = HashSet::with_capacity(predictions.len());
    let mut pairs = Vec::with_capacity(predictions.len());
    for p in predictions {
        if !seen.insert(p.mention_id.as_str()) {
            return Err(EvalError::DuplicateId(p.mention_id.clone()));
        }
        let g = gold
            .get(&p.mention_id)
            .ok_or_else(|| EvalError::MissingGold(p.mention_id.clone()))?;
        pairs.push(EvalPair {
            mention_id: p.mention_id.clone(),
            gold: g.clone(),
            pred: p.pred_qid.clone(),
            top_score: p.top_score,
        });
    }
    if let Some(missing) = gold.keys().filter(|k| !seen.contains(k.as_str())).min() {
        return Err(EvalError::MissingPrediction(missing.clone()));
    }
    Ok(pairs)
}

/// Pairs from predictions that carry their own gold label.
pub fn pairs_from_predictions(
    predictions: &[PredictionRecord],
) -> Result<Vec<EvalPair>, EvalError> {
    let gold: HashMap<String, String> = predictions
        .iter()
        .map(|p| {
            p.gold_qid
                .clone()
                .map(|g| (p.mention_id.clone(), g))
                .ok_or_else(|| EvalError::MissingGold(p.mention_id.clone()))
        })
        .collect::<Result<_, _>>()?;
    join_gold(predictions, &gold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(tp: usize, pred_pos: usize, gold_pos: usize) -> Self {
        let precision = ratio(tp, pred_pos);
        let recall = ratio(tp, gold_pos);
        Self {
            precision,
            recall,
            f1: harmonic_f1(precision, recall),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// 2PR / (P + R), or 0 when P + R = 0.
pub fn harmonic_f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroScores {
    pub n: usize,
    /// NIL counted as an ordinary label; equals micro P, R and F1.
    pub accuracy_f1: f64,
    /// NIL predictions treated as abstentions.
    pub link_only: Prf,
}

pub fn micro_scores(pairs: &[EvalPair]) -> Result<MicroScores, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct = pairs.iter().filter(|p| p.is_correct()).count();
    let linked_pred = pairs.iter().filter(|p| p.pred != NIL).count();
    let linked_gold = pairs.iter().filter(|p| p.gold != NIL).count();
    let linked_correct = pairs
        .iter()
        .filter(|p| p.pred != NIL && p.is_correct())
        .count();
    Ok(MicroScores {
        n: pairs.len(),
        accuracy_f1: correct as f64 / pairs.len() as f64,
        link_only: Prf::from_counts(linked_correct, linked_pred, linked_gold),
    })
}

/// NIL detection scores; NIL is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NilReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn nil_scores(pairs: &[EvalPair]) -> Result<NilReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for p in pairs {
        match (p.gold == NIL, p.pred == NIL) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let prf = Prf::from_counts(tp, tp + fp, tp + fn_);
    Ok(NilReport {
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        tp,
        fp,
        fn_,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub r_pb: f64,
    pub n: usize,
    pub t_stat: f64,
    pub p_value: f64,
}

/// Point-biserial correlation between scores and a binary outcome, with a
/// two-sided Student-t p-value on n − 2 degrees of freedom.
pub fn point_biserial(scores: &[f64], correct: &[bool]) -> Result<CorrelationReport, EvalError> {
    if scores.len() != correct.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: correct.len(),
        });
    }
    let n = scores.len();
    if n < 3 {
        return Err(EvalError::TooFew(n));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let n1 = correct.iter().filter(|&&c| c).count();
    let n0 = n - n1;
    if n1 == 0 || n0 == 0 {
        return Err(EvalError::SingleClass);
    }
    let mean = |want: bool, count: usize| {
        scores
            .iter()
            .zip(correct)
            .filter(|(_, &c)| c == want)
            .map(|(s, _)| s)
            .sum::<f64>()
            / count as f64
    };
    let (m1, m0) = (mean(true, n1), mean(false, n0));
    let nf = n as f64;
    let grand = scores.iter().sum::<f64>() / nf;
    let ss: f64 = scores.iter().map(|s| (s - grand).powi(2)).sum();
    if ss == 0.0 {
        return Err(EvalError::ZeroVariance);
    }

    let first = |want: bool| {
        scores
            .iter()
            .zip(correct)
            .find(|(_, &c)| c == want)
            .map(|(s, _)| *s)
    };
    let (first1, first0) = (first(true), first(false));
    let constant_within = scores
        .iter()
        .zip(correct)
        .all(|(s, &c)| Some(*s) == if c { first1 } else { first0 });
    let r = if constant_within {
        // all variance lies between the groups: |r| is exactly 1
        if m1 > m0 {
            1.0
        } else {
            -1.0
        }
    } else {
        let sd = (ss / nf).sqrt();
        ((m1 - m0) / sd * ((n1 as f64) * (n0 as f64) / (nf * nf)).sqrt()).clamp(-1.0, 1.0)
    };

    let (t_stat, p_value) = correlation_t_test(r, n);
    Ok(CorrelationReport {
        r_pb: r,
        n,
        t_stat,
        p_value,
    })
}

/// t = r√(n−2)/√(1−r²) and its two-sided p-value; |r| = 1 gives t = ±∞ and p = 0.
pub fn correlation_t_test(r: f64, n: usize) -> (f64, f64) {
    assert!(n >= 3, "t test needs n >= 3");
    let df = n as f64 - 2.0;
    let t = if r.abs() >= 1.0 {
        r.signum() * f64::INFINITY
    } else {
        r * df.sqrt() / (1.0 - r * r).sqrt()
    };
    (t, student_t_two_sided(t, df))
}

/// Point-biserial over (top_score, correctness) for pairs with a score.
pub fn score_correlation(pairs: &[EvalPair]) -> Result<CorrelationReport, EvalError> {
    let (scores, correct): (Vec<f64>, Vec<bool>) = pairs
        .iter()
        .filter_map(|p| p.top_score.map(|s| (s, p.is_correct())))
        .unzip();
    point_biserial(&scores, &correct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(gold: &str, pred: &str) -> EvalPair {
        EvalPair {
            mention_id: format!("{gold}-{pred}"),
            gold: gold.into(),
            pred: pred.into(),
            top_score: None,
        }
    }

    #[test]
    fn micro_examples() {
        let all = [
            pair("Q1", "Q1"),
            pair("Q2", "Q2"),
            pair("NIL", "NIL"),
            pair("Q3", "Q3"),
        ];
        assert_eq!(micro_scores(&all).unwrap().accuracy_f1, 1.0);
        let three = [
            pair("Q1", "Q1"),
            pair("Q2", "Q9"),
            pair("NIL", "NIL"),
            pair("Q3", "Q3"),
        ];
        assert_eq!(micro_scores(&three).unwrap().accuracy_f1, 0.75);

        let m = micro_scores(&[pair("Q1", "Q1"), pair("Q2", "NIL"), pair("NIL", "NIL")]).unwrap();
        assert_eq!(m.link_only.precision, 1.0);
        assert_eq!(m.link_only.recall, 0.5);
        assert!((m.link_only.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(micro_scores(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn nil_examples() {
        let perfect = nil_scores(&[pair("NIL", "NIL"), pair("Q1", "Q1")]).unwrap();
        assert_eq!(
            (perfect.precision, perfect.recall, perfect.f1),
            (1.0, 1.0, 1.0)
        );
        let none = nil_scores(&[pair("NIL", "Q1"), pair("Q2", "Q2")]).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert!(matches!(nil_scores(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn nil_counts_reaching_a_printed_row() {
        // 698 TP / 302 FP gives P = .698; 698 / (698 + 173) = .80138 rounds to .801
        let mut pairs = Vec::new();
        pairs.extend((0..698).map(|_| pair("NIL", "NIL")));
        pairs.extend((0..302).map(|_| pair("Q1", "NIL")));
        pairs.extend((0..173).map(|_| pair("NIL", "Q1")));
        let r = nil_scores(&pairs).unwrap();
        assert!((r.precision - 0.698).abs() < 5e-4);
        assert!((r.recall - 0.801).abs() < 5e-4);
        assert!((r.f1 - 0.746).abs() <= 1e-3);
    }

    #[test]
    fn correlation_examples() {
        let r = point_biserial(&[1.0, 2.0, 3.0, 4.0], &[false, false, true, true]).unwrap();
        // 2 / √5 from the Pearson formula
        assert!((r.r_pb - 0.894_427_190_999_915_9).abs() < 1e-12);
        let ind = point_biserial(
            &[0.0, 1.0, 0.0, 1.0, 1.0],
            &[false, true, false, true, true],
        )
        .unwrap();
        assert_eq!(ind.r_pb, 1.0);
        assert_eq!(ind.p_value, 0.0);
        assert!(ind.t_stat.is_infinite());
        let neg = point_biserial(&[5.0, 2.0, 5.0], &[false, true, false]).unwrap();
        assert_eq!(neg.r_pb, -1.0);

        assert!(matches!(
            point_biserial(&[1.0, 2.0, 3.0], &[true, true, true]),
            Err(EvalError::SingleClass)
        ));
        assert!(matches!(
            point_biserial(&[2.0, 2.0, 2.0], &[true, false, true]),
            Err(EvalError::ZeroVariance)
        ));
        assert!(matches!(
            point_biserial(&[1.0, 2.0], &[true, false]),
            Err(EvalError::TooFew(2))
        ));
        assert!(point_biserial(&[1.0, 2.0, 3.0], &[true, false]).is_err());
    }

    #[test]
    fn join_requires_matching_ids() {
        let pred = |id: &str, q: &str| PredictionRecord {
            mention_id: id.into(),
            doc_id: "d".into(),
            pred_qid: q.into(),
            route: crate::pipeline::Route::LlmChain,
            top_score: Some(1.0),
            candidates_considered: 1,
            gold_qid: None,
        };
        let gold: HashMap<String, String> = [
            ("m1".to_string(), "Q1".to_string()),
            ("m2".into(), "NIL".into()),
        ]
        .into();
        let pairs = join_gold(&[pred("m1", "Q1"), pred("m2", "Q3")], &gold).unwrap();
        assert_eq!(pairs.len(), 2);
        assert!(
            matches!(join_gold(&[pred("m1", "Q1")], &gold), Err(EvalError::MissingPrediction(id)) if id == "m2")
        );
        assert!(matches!(
            join_gold(&[pred("m3", "Q1")], &gold),
            Err(EvalError::MissingGold(_))
        ));
        assert!(matches!(
            pairs_from_predictions(&[pred("m1", "Q1")]),
            Err(EvalError::MissingGold(_))
        ));
    }

    fn arb_pairs() -> impl Strategy<Value = Vec<EvalPair>> {
        proptest::collection::vec((0u8..4, 0u8..4), 1..60).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (g, p))| {
                    let label = |x: u8| {
                        if x == 0 {
                            NIL.to_string()
                        } else {
                            format!("Q{x}")
                        }
                    };
                    EvalPair {
                        mention_id: format!("m{i}"),
                        gold: label(g),
                        pred: label(p),
                        top_score: None,
                    }
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nil_scores_permutation_invariant(pairs in arb_pairs()) {
            let mut rev = pairs.clone();
            rev.reverse();
            prop_assert_eq!(nil_scores(&pairs).unwrap(), nil_scores(&rev).unwrap());
        }

        #[test]
        fn swapping_nil_roles_maps_to_complementary_cells(pairs in arb_pairs()) {
            // NIL ↔ LINK swap: NIL-class P/R become those of the "linked" class
            let flip = |s: &str| if s == NIL { "Q1".to_string() } else { NIL.to_string() };
            let swapped: Vec<EvalPair> = pairs
                .iter()
                .map(|p| EvalPair { gold: flip(&p.gold), pred: flip(&p.pred), ..p.clone() })
                .collect();
            let s = nil_scores(&swapped).unwrap();
            let linked_pred_and_gold = pairs.iter().filter(|p| p.gold != NIL && p.pred != NIL).count();
            let linked_pred = pairs.iter().filter(|p| p.pred != NIL).count();
            let linked_gold = pairs.iter().filter(|p| p.gold != NIL).count();
            let expected = Prf::from_counts(linked_pred_and_gold, linked_pred, linked_gold);
            prop_assert_eq!((s.precision, s.recall), (expected.precision, expected.recall));
        }

        #[test]
        fn accuracy_invariant_under_relabeling(pairs in arb_pairs()) {
            let relabel = |s: &str| match s { "Q1" => "Q3".to_string(), "Q3" => NIL.to_string(), "NIL" => "Q1".to_string(), o => o.to_string() };
            let mapped: Vec<EvalPair> = pairs
                .iter()
                .map(|p| EvalPair { gold: relabel(&p.gold), pred: relabel(&p.pred), ..p.clone() })
                .collect();
            prop_assert_eq!(micro_scores(&pairs).unwrap().accuracy_f1, micro_scores(&mapped).unwrap().accuracy_f1);
        }

        #[test]
        fn f1_bounded_by_min_and_max(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            let f = harmonic_f1(p, r);
            prop_assert!(f >= p.min(r) - 1e-15 && f <= p.max(r) + 1e-15);
        }
    }
}
