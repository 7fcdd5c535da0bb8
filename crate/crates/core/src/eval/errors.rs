use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Semantic relation between a wrong prediction and the gold entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorRelation {
    False,
    Exact,
    Close,
    Related,
    Broader,
    Narrower,
}

impl ErrorRelation {
    pub const ALL: [ErrorRelation; 6] = [
        ErrorRelation::False,
        ErrorRelation::Exact,
        ErrorRelation::Close,
        ErrorRelation::Related,
        ErrorRelation::Broader,
        ErrorRelation::Narrower,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorRelation::False => "false",
            ErrorRelation::Exact => "exact",
            ErrorRelation::Close => "close",
            ErrorRelation::Related => "related",
            ErrorRelation::Broader => "broader",
            ErrorRelation::Narrower => "narrower",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ErrorRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorRelation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown error relation {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorAnnotation {
    pub mention_id: String,
    pub relation: ErrorRelation,
    pub dataset: String,
}

/// Counts per (dataset, relation) with marginals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTally {
    pub by_dataset: BTreeMap<String, BTreeMap<ErrorRelation, usize>>,
    pub totals: BTreeMap<ErrorRelation, usize>,
    pub n: usize,
}

impl ErrorTally {
    pub fn total(&self, relation: ErrorRelation) -> usize {
        self.totals.get(&relation).copied().unwrap_or(0)
    }

    pub fn cell(&self, dataset: &str, relation: ErrorRelation) -> usize {
        self.by_dataset
            .get(dataset)
            .and_then(|m| m.get(&relation))
            .copied()
            .unwrap_or(0)
    }

    /// Relations as rows, datasets as columns, then a total column.
    pub fn render_table(&self) -> String {
        let datasets: Vec<&str> = self.by_dataset.keys().map(String::as_str).collect();
        let mut header = vec!["relation"];
        header.extend(&datasets);
        header.push("total");
        let widths: Vec<usize> = header.iter().map(|h| h.len().max(8)).collect();
        let row = |cells: Vec<String>| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = vec![row(header.iter().map(|s| s.to_string()).collect())];
        for rel in ErrorRelation::ALL {
            let mut cells = vec![rel.to_string()];
            cells.extend(datasets.iter().map(|d| self.cell(d, rel).to_string()));
            cells.push(self.total(rel).to_string());
            out.push(row(cells));
        }
        let mut cells = vec!["all".to_string()];
        cells.extend(
            datasets
                .iter()
                .map(|d| self.by_dataset[*d].values().sum::<usize>().to_string()),
        );
        cells.push(self.n.to_string());
        out.push(row(cells));
        out.join("\n")
    }
}

pub fn tally_error_relations(annotations: &[ErrorAnnotation]) -> ErrorTally {
    let mut cells: BTreeMap<String, [usize; 6]> = BTreeMap::new();
    let mut totals = [0usize; 6];
    for a in annotations {
        cells.entry(a.dataset.clone()).or_default()[a.relation.index()] += 1;
        totals[a.relation.index()] += 1;
    }
    let expand = |counts: &[usize; 6]| {
        ErrorRelation::ALL
            .into_iter()
            .map(|r| (r, counts[r.index()]))
            .collect::<BTreeMap<_, _>>()
    };
    ErrorTally {
        by_dataset: cells.iter().map(|(d, c)| (d.clone(), expand(c))).collect(),
        totals: expand(&totals),
        n: annotations.len(),
    }
}

#[derive(Deserialize)]
struct RawAnnotation {
    mention_id: String,
    relation: String,
    dataset: String,
}

/// Reads annotation JSONL; unknown relations are reported with their line number.
pub fn load_error_annotations(path: impl AsRef<Path>) -> Result<Vec<ErrorAnnotation>, EvalError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawAnnotation = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let relation = raw.relation.parse().map_err(|message| EvalError::Parse {
            line: line_no,
            message,
        })?;
        out.push(ErrorAnnotation {
            mention_id: raw.mention_id,
            relation,
            dataset: raw.dataset,
        });
    }
    Ok(out)
}
