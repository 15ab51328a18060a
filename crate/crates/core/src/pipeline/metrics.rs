//! Evaluation: per-class precision/recall/F1/support and overall accuracy,
//! plus per-version-string metrics for the index-tagging tasks.

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingModel;
use crate::model::{ParserModel, Prediction, TaskKind};
use crate::preprocess::{apply_substitutions, tokenize, PreprocessConfig, RawUas};

use super::{build_version_label, ClassSpec, LabeledExample, PipelineError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionMetrics {
    pub version: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub evaluated: usize,
    pub overall_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Version tasks only: metrics keyed by the labelled version string.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_version: Option<Vec<VersionMetrics>>,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

fn class_names(task: TaskKind, seq_len: usize) -> Vec<String> {
    match task.class_labels() {
        Some(labels) => labels.iter().map(|s| s.to_string()).collect(),
        None => {
            let mut names: Vec<String> = (0..seq_len).map(|i| i.to_string()).collect();
            names.push("absent".to_string());
            names
        }
    }
}

/// Builds the report from (truth, prediction) index pairs; version tasks
/// additionally carry (truth string, predicted string) pairs.
fn build_report(
    task: TaskKind,
    seq_len: usize,
    outcomes: &[(usize, usize)],
    version_pairs: &[(String, String)],
) -> MetricsReport {
    let names = class_names(task, seq_len);
    let n = names.len();
    let mut confusion = vec![0usize; n * n];
    let mut correct = 0usize;
    for &(truth, pred) in outcomes {
        confusion[truth * n + pred] += 1;
        if truth == pred {
            correct += 1;
        }
    }
    let per_class = names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let tp = confusion[c * n + c];
            let support: usize = (0..n).map(|j| confusion[c * n + j]).sum();
            let predicted: usize = (0..n).map(|i| confusion[i * n + c]).sum();
            let (precision, recall, f1) = prf(tp, predicted - tp, support - tp);
            ClassMetrics {
                class: name.clone(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();

    let per_version = if task.is_version_task() {
        let mut keys: Vec<&str> = version_pairs
            .iter()
            .map(|(t, _)| t.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        keys.sort();
        let mut rows: Vec<VersionMetrics> = keys
            .into_iter()
            .map(|key| {
                let mut tp = 0;
                let mut fp = 0;
                let mut fn_ = 0;
                for (truth, pred) in version_pairs {
                    match (truth == key, pred == key) {
                        (true, true) => tp += 1,
                        (false, true) => fp += 1,
                        (true, false) => fn_ += 1,
                        (false, false) => {}
                    }
                }
                let (precision, recall, f1) = prf(tp, fp, fn_);
                VersionMetrics {
                    version: key.to_string(),
                    precision,
                    recall,
                    f1,
                    support: tp + fn_,
                }
            })
            .collect();
        rows.sort_by(|a, b| b.support.cmp(&a.support).then_with(|| a.version.cmp(&b.version)));
        Some(rows)
    } else {
        None
    };

    MetricsReport {
        task: task.slug().to_string(),
        evaluated: outcomes.len(),
        overall_accuracy: correct as f64 / outcomes.len().max(1) as f64,
        per_class,
        per_version,
    }
}

/// Runs the model over a validation set and reports one-vs-rest metrics per
/// class from the multi-class confusion matrix. Pure inference.
pub fn evaluate(
    model: &ParserModel<f32>,
    emb: &EmbeddingModel,
    data: &[LabeledExample],
) -> Result<MetricsReport, PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::EmptyEvaluationSet);
    }
    let task = model.task;
    let seq_len = model.config.seq_len;
    let pre = PreprocessConfig::with_max_tokens(seq_len);
    let spec = ClassSpec::for_task(task);

    let mut outcomes = Vec::with_capacity(data.len());
    let mut version_pairs = Vec::new();
    for ex in data {
        let tokens = tokenize(&ex.raw(), &pre);
        let matrix = emb.embed_uas_with_len(&tokens, seq_len);
        let prediction = model.predict_matrix(&matrix)?;
        match prediction {
            Prediction::Name { class_index, .. } => {
                let truth = spec.class_index(ex.label_for(task));
                outcomes.push((truth, class_index));
            }
            Prediction::Version { index, .. } => {
                let truth = build_version_label(ex, task, &pre);
                outcomes.push((truth, index));

                let truth_str = ex
                    .version_for(task)
                    .map(|v| apply_substitutions(&RawUas::new(v), &pre))
                    .filter(|s| !s.is_empty())
                    .unwrap_or_else(|| "<absent>".to_string());
                let pred_str = tokens
                    .tokens
                    .get(index)
                    .cloned()
                    .unwrap_or_else(|| "<absent>".to_string());
                version_pairs.push((truth_str, pred_str));
            }
        }
    }
    Ok(build_report(task, seq_len, &outcomes, &version_pairs))
}

impl MetricsReport {
    /// Plain-text table for terminal output.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("task: {}\n", self.task));
        out.push_str(&format!(
            "{:<20} {:>9} {:>9} {:>9} {:>9}\n",
            "class", "precision", "recall", "f1", "support"
        ));
        for row in &self.per_class {
            if row.support == 0 && self.per_class.len() > 10 {
                continue;
            }
            out.push_str(&format!(
                "{:<20} {:>9.4} {:>9.4} {:>9.4} {:>9}\n",
                row.class, row.precision, row.recall, row.f1, row.support
            ));
        }
        if let Some(versions) = &self.per_version {
            out.push_str(&format!(
                "\n{:<20} {:>9} {:>9} {:>9} {:>9}\n",
                "version", "precision", "recall", "f1", "support"
            ));
            for row in versions.iter().take(20) {
                out.push_str(&format!(
                    "{:<20} {:>9.4} {:>9.4} {:>9.4} {:>9}\n",
                    row.version, row.precision, row.recall, row.f1, row.support
                ));
            }
        }
        out.push_str(&format!(
            "overall accuracy: {:.4} ({} examples)\n",
            self.overall_accuracy, self.evaluated
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor_scores_ones() {
        let outcomes: Vec<(usize, usize)> = (0..7).cycle().take(70).map(|c| (c, c)).collect();
        let report = build_report(TaskKind::OsName, 50, &outcomes, &[]);
        assert_eq!(report.overall_accuracy, 1.0);
        for row in &report.per_class {
            assert_eq!(row.precision, 1.0);
            assert_eq!(row.recall, 1.0);
            assert_eq!(row.f1, 1.0);
            assert_eq!(row.support, 10);
        }
    }

    #[test]
    fn constant_predictor_on_balanced_classes() {
        let outcomes: Vec<(usize, usize)> = (0..7).cycle().take(70).map(|c| (c, 0)).collect();
        let report = build_report(TaskKind::OsName, 50, &outcomes, &[]);
        assert!((report.overall_accuracy - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(report.per_class[0].recall, 1.0);
        assert!((report.per_class[0].precision - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(report.per_class[1].recall, 0.0);
    }

    #[test]
    fn hand_computed_confusion() {
        // Confusion restricted to classes 0 and 1:
        //   truth 0: predicted 0 twice, predicted 1 once
        //   truth 1: predicted 1 three times
        let outcomes = vec![(0, 0), (0, 0), (0, 1), (1, 1), (1, 1), (1, 1)];
        let report = build_report(TaskKind::OsName, 50, &outcomes, &[]);
        let c0 = &report.per_class[0];
        assert_eq!(c0.precision, 1.0);
        assert!((c0.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((c0.f1 - 0.8).abs() < 1e-12);
        let c1 = &report.per_class[1];
        assert!((c1.precision - 0.75).abs() < 1e-12);
        assert_eq!(c1.recall, 1.0);
    }

    #[test]
    fn support_sums_to_evaluation_size() {
        let outcomes = vec![(0, 1), (1, 1), (2, 3), (6, 6), (5, 0)];
        let report = build_report(TaskKind::SoftwareName, 50, &outcomes, &[]);
        let total: usize = report.per_class.iter().map(|c| c.support).sum();
        assert_eq!(total, outcomes.len());
    }

    #[test]
    fn micro_averaged_recall_equals_accuracy() {
        let outcomes = vec![(0, 0), (1, 2), (2, 2), (3, 3), (4, 0), (6, 6), (6, 5)];
        let report = build_report(TaskKind::OsName, 50, &outcomes, &[]);
        let tp_total: f64 = report
            .per_class
            .iter()
            .map(|c| c.recall * c.support as f64)
            .sum();
        let micro_recall = tp_total / outcomes.len() as f64;
        assert!((micro_recall - report.overall_accuracy).abs() < 1e-12);
    }

    #[test]
    fn version_report_keys_by_labelled_string() {
        let outcomes = vec![(1, 1), (1, 1), (1, 2), (50, 50)];
        let pairs = vec![
            ("105.0".to_string(), "105.0".to_string()),
            ("105.0".to_string(), "105.0".to_string()),
            ("105.0".to_string(), "Mobile".to_string()),
            ("<absent>".to_string(), "<absent>".to_string()),
        ];
        let report = build_report(TaskKind::SoftwareVersionIndex, 50, &outcomes, &pairs);
        let versions = report.per_version.unwrap();
        let v105 = versions.iter().find(|v| v.version == "105.0").unwrap();
        assert_eq!(v105.support, 3);
        assert!((v105.recall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(v105.precision, 1.0);
        assert_eq!(report.per_class.len(), 51);
    }

    #[test]
    fn json_round_trip_preserves_the_report() {
        let outcomes = vec![(0, 0), (1, 1), (2, 0)];
        let report = build_report(TaskKind::OsName, 50, &outcomes, &[]);
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
    }
}
