use std::path::Path;

use anyhow::{bail, Context, Result};
use mhel_core::calibration::{
    calibrate_threshold_with, load_dev_retrievals, recall_curve, select_block_size_from_curve,
    CalibrationConfig, CorrectRule,
};
use mhel_core::corpus::{read_predictions, write_report};
use mhel_core::eval::{
    join_gold, load_error_annotations, load_gold, pairs_from_predictions, score_correlation,
    tally_error_relations, EvaluationReport, RecallPoint,
};
use mhel_core::index::VectorIndex;
use mhel_core::kb::import_kb as import;
use mhel_core::mock::synthetic_world;
use mhel_core::pipeline::PromptMode;
use serde::Serialize;

pub fn import_kb(jsonl: &Path, out: &Path) -> Result<()> {
    let (store, count) = import(jsonl, out)?;
    println!(
        "imported {count} records into {} ({} entities)",
        out.display(),
        store.len()
    );
    Ok(())
}

/// `check` carries (samples, k, seed).
pub fn build_index(vectors: &Path, ids: &Path, check: Option<(usize, usize, u64)>) -> Result<()> {
    let index = VectorIndex::load(vectors, ids)?;
    println!("index: {} rows, dim {}", index.count(), index.dim());
    if let Some((samples, k, seed)) = check {
        let report = index.self_check(samples, k, seed)?;
        if !report.mismatches.is_empty() {
            bail!(
                "self-check failed: {} of {} queries disagree with brute force (first: query {})",
                report.mismatches.len(),
                report.queries,
                report.mismatches[0]
            );
        }
        println!(
            "check: {} queries at k={} agree with brute force",
            report.queries, report.k
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CalibrationReport {
    theta: f64,
    block_size: usize,
    epsilon: f64,
    correct_rule: CorrectRule,
    mentions: usize,
    recall_curve: Vec<RecallPoint>,
}

pub fn calibrate(
    dev: &Path,
    k_steps: Vec<usize>,
    epsilon: f64,
    correct_rule: CorrectRule,
    report: Option<&Path>,
) -> Result<()> {
    let config = CalibrationConfig {
        k_steps,
        epsilon,
        correct_rule,
    };
    config.validate()?;
    let records = load_dev_retrievals(dev)?;
    let theta = calibrate_threshold_with(&records, config.correct_rule)?;
    let curve = recall_curve(&records, &config.k_steps)?;
    let block_size = select_block_size_from_curve(&curve, config.epsilon)?;
    println!("theta\t{theta:.6}");
    println!("K\t{block_size}");
    for (k, r) in &curve {
        println!("recall@{k}\t{r:.4}");
    }
    if let Some(path) = report {
        let out = CalibrationReport {
            theta,
            block_size,
            epsilon,
            correct_rule,
            mentions: records.len(),
            recall_curve: curve
                .into_iter()
                .map(|(k, recall)| RecallPoint { k, recall })
                .collect(),
        };
        write_report(path, &out)?;
    }
    Ok(())
}

pub fn evaluate(pred: &Path, gold: &Path, nil: bool, report: Option<&Path>) -> Result<()> {
    let predictions = read_predictions(pred)?;
    let gold = load_gold(gold)?;
    let pairs = join_gold(&predictions, &gold)?;
    let result = EvaluationReport::compute(&pairs, nil)?;
    println!("{}", result.render_table());
    if let Some(path) = report {
        write_report(path, &result)?;
    }
    Ok(())
}

pub fn correlate(pred: &Path, gold: Option<&Path>, report: Option<&Path>) -> Result<()> {
    let predictions = read_predictions(pred)?;
    let pairs = match gold {
        Some(g) => join_gold(&predictions, &load_gold(g)?)?,
        None => pairs_from_predictions(&predictions)
            .context("predictions carry no gold labels; pass --gold")?,
    };
    let result = score_correlation(&pairs)?;
    println!("{}", result.render_table());
    if let Some(path) = report {
        write_report(path, &result)?;
    }
    Ok(())
}

pub fn tally_errors(annotations: &Path, report: Option<&Path>) -> Result<()> {
    let tally = tally_error_relations(&load_error_annotations(annotations)?);
    println!("{}", tally.render_table());
    if let Some(path) = report {
        write_report(path, &tally)?;
    }
    Ok(())
}

pub fn synth(
    dir: &Path,
    seed: u64,
    entities: usize,
    mentions: usize,
    dim: usize,
    mode: PromptMode,
) -> Result<()> {
    if entities == 0 || dim == 0 {
        bail!("--entities and --dim must be at least 1");
    }
    let world = synthetic_world(seed, entities, mentions, dim);
    let paths = world
        .write_files(dir, mode)
        .with_context(|| format!("writing synthetic files to {}", dir.display()))?;
    println!(
        "wrote {entities} entities, {mentions} mentions (dim {dim}); run: mhel link --config {} --corpus {} --out <pred.jsonl>",
        paths.config.display(),
        paths.corpus.display()
    );
    Ok(())
}
