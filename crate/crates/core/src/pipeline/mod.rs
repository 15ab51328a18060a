//! Dataset ingestion, label construction, class balancing, the stratified
//! 70/30 split, per-task training loops, and evaluation metrics.

mod metrics;
mod split;
mod train;

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::EmbeddingError;
use crate::model::{ModelError, TaskKind, NA_CLASS_INDEX, OS_CLASSES, SOFTWARE_CLASSES};
use crate::preprocess::{apply_substitutions, tokenize, PreprocessConfig, RawUas};

pub use metrics::{evaluate, ClassMetrics, MetricsReport, VersionMetrics};
pub use split::balance_and_split;
pub use train::{train, train_with, TrainedModel};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no parseable records: {0}")]
    Format(String),
    #[error("class {0:?} has no examples")]
    MissingClass(String),
    #[error("evaluation set is empty")]
    EmptyEvaluationSet,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

/// One dataset record: the raw UAS plus whatever labels the issuing entity
/// assigned. Absent labels are legal everywhere; a name task treats them as
/// the "N/A" class and a version task as "version not present".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub ua: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub os_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub os_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub software_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub software_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_cidr: Option<String>,
}

impl LabeledExample {
    pub fn raw(&self) -> RawUas {
        RawUas::new(self.ua.clone())
    }

    /// The label string relevant to a task family.
    pub fn label_for(&self, task: TaskKind) -> Option<&str> {
        match task {
            TaskKind::OsName | TaskKind::OsVersionIndex => self.os_name.as_deref(),
            TaskKind::SoftwareName | TaskKind::SoftwareVersionIndex => {
                self.software_name.as_deref()
            }
        }
    }

    pub fn version_for(&self, task: TaskKind) -> Option<&str> {
        match task {
            TaskKind::OsVersionIndex => self.os_version.as_deref(),
            TaskKind::SoftwareVersionIndex => self.software_version.as_deref(),
            _ => None,
        }
    }
}

/// The fixed 7-class list a task stratifies and classifies over. Version
/// tasks stratify by their name-task counterpart, matching how the balanced
/// training sets are drawn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSpec {
    pub task: TaskKind,
    pub labels: Vec<String>,
}

impl ClassSpec {
    pub fn for_task(task: TaskKind) -> Self {
        let labels = match task {
            TaskKind::OsName | TaskKind::OsVersionIndex => &OS_CLASSES,
            TaskKind::SoftwareName | TaskKind::SoftwareVersionIndex => &SOFTWARE_CLASSES,
        };
        Self {
            task,
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Maps a raw label to its class index. Unknown or absent labels land in
    /// "N/A". Matching is trimmed and case-insensitive; the label lists are
    /// canonical spellings, datasets are not.
    pub fn class_index(&self, raw: Option<&str>) -> usize {
        match raw {
            None => NA_CLASS_INDEX,
            Some(s) => {
                let needle = s.trim();
                self.labels
                    .iter()
                    .position(|l| l.eq_ignore_ascii_case(needle))
                    .unwrap_or(NA_CLASS_INDEX)
            }
        }
    }
}

/// Per-task training settings. Defaults follow the standard recipe: batch
/// 200, weight decay 1e-5, learning rate 0.0005 for name tasks and 0.005
/// for version tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub split_fraction: f64,
    pub per_class_quota: Option<usize>,
    pub seed: u64,
    pub name_loss: NameLoss,
}

/// Name classifiers train on elementwise binary cross entropy over the
/// post-softmax probabilities; categorical cross entropy is available as an
/// ablation switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NameLoss {
    #[default]
    BinaryCrossEntropy,
    CrossEntropy,
}

impl TrainConfig {
    pub fn for_task(task: TaskKind, seed: u64) -> Self {
        Self {
            task,
            batch_size: 200,
            learning_rate: task.default_learning_rate(),
            weight_decay: 1e-5,
            epochs: 10,
            split_fraction: 0.7,
            per_class_quota: None,
            seed,
            name_loss: NameLoss::default(),
        }
    }
}

/// Streaming line-delimited JSON ingestion. Malformed lines are counted and
/// skipped; blank lines are ignored. Fails only when the file is missing or
/// nothing at all parses.
pub fn ingest(path: &Path) -> Result<(Vec<LabeledExample>, usize), PipelineError> {
    let file = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            PipelineError::FileNotFound(path.to_path_buf())
        } else {
            PipelineError::Io(e)
        }
    })?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    let mut skipped = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LabeledExample>(&line) {
            Ok(ex) => examples.push(ex),
            Err(_) => skipped += 1,
        }
    }
    if examples.is_empty() {
        return Err(PipelineError::Format(format!(
            "{} yielded no parseable records ({} lines skipped)",
            path.display(),
            skipped
        )));
    }
    Ok((examples, skipped))
}

/// Ground-truth token index for a version task: the position of the first
/// token exactly equal to the version string, with the version string run
/// through the same substitutions as the UAS (so a labelled "11_0" matches
/// the token "11.0"). No match, an absent version, or a version truncated
/// away all map to `max_tokens` (the "absent" slot).
pub fn build_version_label(
    example: &LabeledExample,
    task: TaskKind,
    config: &PreprocessConfig,
) -> usize {
    debug_assert!(task.is_version_task());
    let absent = config.max_tokens;
    let Some(version) = example.version_for(task) else {
        return absent;
    };
    let needle = apply_substitutions(&RawUas::new(version), config);
    if needle.is_empty() {
        return absent;
    }
    let tokens = tokenize(&example.raw(), config);
    tokens
        .tokens
        .iter()
        .position(|t| *t == needle)
        .unwrap_or(absent)
}

/// Writes the per-epoch loss log as "epoch,mean_loss" CSV.
pub fn write_loss_log(path: &Path, losses: &[f64]) -> Result<(), PipelineError> {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, loss) in losses.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, loss));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn ingest_counts_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"ua":"curl/8.0"}}"#).unwrap();
        writeln!(f, "this is not json").unwrap();
        writeln!(f, r#"{{"ua":"x","os_name":"Windows","os_version":"10.0"}}"#).unwrap();
        writeln!(f, r#"{{"ua":"y","software_name":"Chrome"}}"#).unwrap();
        let (examples, skipped) = ingest(&path).unwrap();
        assert_eq!(examples.len(), 3);
        assert_eq!(skipped, 1);
        assert_eq!(examples[1].os_name.as_deref(), Some("Windows"));
    }

    #[test]
    fn ingest_missing_file() {
        let err = ingest(Path::new("/nonexistent/definitely-not-here.jsonl")).unwrap_err();
        assert!(matches!(err, PipelineError::FileNotFound(_)));
    }

    #[test]
    fn ingest_empty_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::File::create(&path).unwrap();
        assert!(matches!(ingest(&path), Err(PipelineError::Format(_))));
    }

    #[test]
    fn class_index_maps_known_unknown_and_absent() {
        let spec = ClassSpec::for_task(TaskKind::OsName);
        assert_eq!(spec.class_index(Some("Windows")), 5);
        assert_eq!(spec.class_index(Some("windows")), 5);
        assert_eq!(spec.class_index(Some("BeOS")), NA_CLASS_INDEX);
        assert_eq!(spec.class_index(None), NA_CLASS_INDEX);
        assert_eq!(spec.class_index(Some("iPad")), 2);
    }

    #[test]
    fn version_task_stratifies_by_name_classes() {
        let spec = ClassSpec::for_task(TaskKind::SoftwareVersionIndex);
        assert_eq!(spec.labels[0], "Android WebView");
        assert_eq!(spec.labels.len(), 7);
    }

    #[test]
    fn version_label_positions() {
        let cfg = PreprocessConfig::default();
        let ex = LabeledExample {
            ua: "Chrome/105.0.0.0 Mobile".into(),
            software_name: Some("Chrome".into()),
            software_version: Some("105.0.0.0".into()),
            ..Default::default()
        };
        assert_eq!(
            build_version_label(&ex, TaskKind::SoftwareVersionIndex, &cfg),
            1
        );
    }

    #[test]
    fn version_label_absent_is_the_sentinel() {
        let cfg = PreprocessConfig::default();
        let ex = LabeledExample {
            ua: "Chrome/105.0.0.0".into(),
            ..Default::default()
        };
        assert_eq!(
            build_version_label(&ex, TaskKind::SoftwareVersionIndex, &cfg),
            50
        );
    }

    #[test]
    fn version_label_is_preprocessed_like_the_uas() {
        let cfg = PreprocessConfig::default();
        // "11_0" labels the token "11.0".
        let ex = LabeledExample {
            ua: "Mozilla/5.0 (iPhone; CPU iPhone OS 11_0 like Mac OS X)".into(),
            os_version: Some("11_0".into()),
            ..Default::default()
        };
        let idx = build_version_label(&ex, TaskKind::OsVersionIndex, &cfg);
        let tokens = tokenize(&ex.raw(), &cfg);
        assert_eq!(tokens.tokens[idx], "11.0");
    }

    #[test]
    fn version_label_truncated_away_is_absent() {
        let cfg = PreprocessConfig::default();
        let mut words: Vec<String> = (0..55).map(|i| format!("w{i}")).collect();
        words.push("9.9.9".into());
        let ex = LabeledExample {
            ua: words.join(" "),
            os_version: Some("9.9.9".into()),
            ..Default::default()
        };
        assert_eq!(build_version_label(&ex, TaskKind::OsVersionIndex, &cfg), 50);
    }

    #[test]
    fn loss_log_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_log(&path, &[0.5, 0.25]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,mean_loss\n1,0.5\n2,0.25\n");
    }
}
