//! Decoding-based scoring and routing inspection.

use std::fmt::Write as _;

use clorae_core::{default_layer_groups, routing_report, ForwardCtx, Graph, RoutingReport, RoutingStats};
use clorae_data::{parse_answer, MatchCounts, Split, TaskSample};
use clorae_model::{EncodedSample, Seq2Seq};
use serde::{Deserialize, Serialize};

use crate::train::Prepared;
use crate::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub dataset: String,
    pub task: usize,
    pub samples: usize,
    pub counts: MatchCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Predictions with tokens left over after the parseable prefix.
    pub malformed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub datasets: Vec<DatasetScore>,
    pub macro_f1: f64,
    /// Sum of per-dataset F1.
    pub all: f64,
}

/// Record-level micro scores of one dataset's predictions.
pub fn score_predictions(dataset: &str, task: usize, samples: &[TaskSample], preds: &[Vec<String>]) -> DatasetScore {
    assert_eq!(samples.len(), preds.len(), "one prediction per sample");
    let mut counts = MatchCounts::default();
    let mut malformed = 0;
    for (s, p) in samples.iter().zip(preds) {
        let parsed = parse_answer(p);
        if parsed.malformed_tokens > 0 {
            malformed += 1;
        }
        counts.add(MatchCounts::of(&parsed.records, &s.gold_records()));
    }
    let prf = counts.prf();
    DatasetScore {
        dataset: dataset.to_string(),
        task,
        samples: samples.len(),
        counts,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        malformed,
    }
}

impl EvalReport {
    pub fn from_scores(split: Split, datasets: Vec<DatasetScore>) -> Self {
        let all: f64 = datasets.iter().map(|d| d.f1).sum();
        let macro_f1 = if datasets.is_empty() { 0.0 } else { all / datasets.len() as f64 };
        Self {
            split: split.name().to_string(),
            datasets,
            macro_f1,
            all,
        }
    }

    pub fn f1(&self, dataset: &str) -> Option<f64> {
        self.datasets.iter().find(|d| d.dataset == dataset).map(|d| d.f1)
    }

    /// Largest minus smallest per-dataset F1.
    pub fn f1_spread(&self) -> f64 {
        let max = self.datasets.iter().map(|d| d.f1).fold(f64::NEG_INFINITY, f64::max);
        let min = self.datasets.iter().map(|d| d.f1).fold(f64::INFINITY, f64::min);
        if self.datasets.is_empty() {
            0.0
        } else {
            max - min
        }
    }

    /// Aligned plain-text table; scores in percent.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>7} {:>7} {:>7} {:>7} {:>9}", "dataset", "n", "P", "R", "F1", "malformed");
        for d in &self.datasets {
            let _ = writeln!(
                out,
                "{:<16} {:>7} {:>7.2} {:>7.2} {:>7.2} {:>9}",
                d.dataset,
                d.samples,
                100.0 * d.precision,
                100.0 * d.recall,
                100.0 * d.f1,
                d.malformed
            );
        }
        let _ = writeln!(out, "{:<16} {:>7} {:>7} {:>7} {:>7.2}", "macro", "", "", "", 100.0 * self.macro_f1);
        let _ = writeln!(out, "{:<16} {:>7} {:>7} {:>7} {:>7.2}", "All", "", "", "", 100.0 * self.all);
        out
    }
}

/// Greedy-decodes and scores `split` of every dataset, using at most
/// `limit` samples per dataset.
pub fn evaluate(
    model: &Seq2Seq<f64>,
    data: &Prepared,
    split: Split,
    limit: Option<usize>,
    group: usize,
) -> Result<EvalReport, TrainError> {
    let mut scores = Vec::with_capacity(data.suite.datasets.len());
    for (ds, enc) in data.suite.datasets.iter().zip(&data.encoded) {
        let samples = ds.split(split);
        let n = limit.map_or(samples.len(), |l| l.min(samples.len()));
        let preds = model.decode(&enc.split(split)[..n], group)?;
        let task = samples.first().map_or(ds.spec.family.task_id(), |s| s.task);
        scores.push(score_predictions(&ds.spec.name, task, &samples[..n], &preds));
    }
    Ok(EvalReport::from_scores(split, scores))
}

/// Gate statistics of teacher-forced passes over `samples`, summarized per
/// layer group and task.
pub fn routing_cmd(model: &Seq2Seq<f64>, samples: &[EncodedSample], group: usize) -> Result<RoutingReport, TrainError> {
    if !model.config().adapter.has_learned_gate() {
        return Err(TrainError::Config("routing statistics need a learned gate".into()));
    }
    let mut stats = RoutingStats::new();
    for task in 0..model.config().n_tasks {
        let batch: Vec<&EncodedSample> = samples.iter().filter(|s| s.task == task).collect();
        for chunk in batch.chunks(group.max(1)) {
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::eval().with_routing(&mut stats);
            model.forward_group(&mut g, chunk, &mut ctx)?;
        }
    }
    Ok(routing_report(&stats, &default_layer_groups(model.config().n_layers()))?)
}
