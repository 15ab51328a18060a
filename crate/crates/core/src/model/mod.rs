//! The four-task parser network: positional encoding, a single two-head
//! transformer encoder layer, a row-major flatten, and a task head.
//!
//! Name tasks (OS name, software name) classify the whole UAS into one of
//! seven classes through a softmax terminal layer. Version tasks tag the
//! token index holding the version number: 51 output slots, one per token
//! position plus one meaning "version not present". All four tasks share
//! the encoder architecture and differ only in their heads.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::embeddings::{EmbeddingModel, UasMatrix};
use crate::numerics::{NumericsError, Scalar, Tensor};
use crate::preprocess::{tokenize, PreprocessConfig, RawUas};

pub use checkpoint::CHECKPOINT_MAGIC;

/// Class labels for the OS name task, in canonical checkpoint order.
pub const OS_CLASSES: [&str; 7] = [
    "Android",
    "iOS",
    "iPad",
    "Linux",
    "Macintosh",
    "Windows",
    "N/A",
];

/// Class labels for the software name task, in canonical checkpoint order.
pub const SOFTWARE_CLASSES: [&str; 7] = [
    "Android WebView",
    "Chrome",
    "Facebook App",
    "Instagram",
    "Internet Explorer",
    "Opera",
    "N/A",
];

pub const NA_CLASS_INDEX: usize = 6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("embedding dim {emb_dim} does not match model d_model {d_model}")]
    DimMismatch { emb_dim: usize, d_model: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model checkpoint file (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    OsName,
    SoftwareName,
    OsVersionIndex,
    SoftwareVersionIndex,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::OsName,
        TaskKind::SoftwareName,
        TaskKind::OsVersionIndex,
        TaskKind::SoftwareVersionIndex,
    ];

    pub fn is_version_task(self) -> bool {
        matches!(self, TaskKind::OsVersionIndex | TaskKind::SoftwareVersionIndex)
    }

    /// The fixed 7-label list for name tasks; version tasks have none.
    pub fn class_labels(self) -> Option<&'static [&'static str]> {
        match self {
            TaskKind::OsName => Some(&OS_CLASSES),
            TaskKind::SoftwareName => Some(&SOFTWARE_CLASSES),
            _ => None,
        }
    }

    /// Output width: 7 for names, seq_len + 1 for versions (the extra slot
    /// means "version absent").
    pub fn num_outputs(self, seq_len: usize) -> usize {
        if self.is_version_task() {
            seq_len + 1
        } else {
            7
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            TaskKind::OsName => "os-name",
            TaskKind::SoftwareName => "software-name",
            TaskKind::OsVersionIndex => "os-version",
            TaskKind::SoftwareVersionIndex => "software-version",
        }
    }

    pub fn from_slug(s: &str) -> Result<Self, ModelError> {
        match s {
            "os-name" => Ok(TaskKind::OsName),
            "software-name" => Ok(TaskKind::SoftwareName),
            "os-version" => Ok(TaskKind::OsVersionIndex),
            "software-version" => Ok(TaskKind::SoftwareVersionIndex),
            other => Err(ModelError::UnknownTask(other.to_string())),
        }
    }

    /// Optimizer learning rate for this task family.
    pub fn default_learning_rate(self) -> f64 {
        if self.is_version_task() {
            0.005
        } else {
            0.0005
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub seq_len: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub head_widths: Vec<usize>,
    pub dropout_p: f64,
    pub num_outputs: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The production configuration: 50x40 inputs, two heads, flatten width
    /// 2000, dense head 512-256-128.
    pub fn standard(task: TaskKind, seed: u64) -> Self {
        let seq_len = 50;
        Self {
            d_model: 40,
            seq_len,
            num_heads: 2,
            ff_dim: 128,
            head_widths: vec![512, 256, 128],
            dropout_p: 0.1,
            num_outputs: task.num_outputs(seq_len),
            seed,
        }
    }

    pub fn flatten_width(&self) -> usize {
        self.seq_len * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self, task: TaskKind) -> Result<(), ModelError> {
        if self.d_model < 2 || self.d_model % 2 != 0 {
            return Err(ModelError::Format(format!(
                "d_model must be even and >= 2, got {}",
                self.d_model
            )));
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(ModelError::Format(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Format(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        let expected = task.num_outputs(self.seq_len);
        if self.num_outputs != expected {
            return Err(ModelError::Format(format!(
                "task {} expects {} outputs, config has {}",
                task.slug(),
                expected,
                self.num_outputs
            )));
        }
        Ok(())
    }
}

/// Sinusoidal positional encoding, row-major [seq_len x d_model], computed
/// at f64: even columns sin(pos / 10000^(2i/d_model)), odd columns the
/// matching cos.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Vec<f64> {
    assert!(d_model >= 2 && d_model % 2 == 0, "d_model must be even");
    let mut pe = vec![0.0f64; seq_len * d_model];
    for pos in 0..seq_len {
        for i in 0..d_model / 2 {
            let exponent = (2 * i) as f64 / d_model as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * d_model + 2 * i] = angle.sin();
            pe[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    pe
}

fn positional_encoding_tensor<T: Scalar>(seq_len: usize, d_model: usize) -> Tensor<T> {
    let data = positional_encoding(seq_len, d_model)
        .into_iter()
        .map(T::from_f64_lossy)
        .collect();
    Tensor::from_vec(&[seq_len, d_model], data).expect("consistent by construction")
}

struct AttentionHead<T: Scalar> {
    wq: Tensor<T>,
    wk: Tensor<T>,
    wv: Tensor<T>,
}

struct Dense<T: Scalar> {
    w: Tensor<T>,
    b: Tensor<T>,
}

struct LayerNorm<T: Scalar> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
}

/// Weights for one task model. Immutable during inference; training mutates
/// through the optimizer only.
pub struct ParserModel<T: Scalar = f32> {
    pub task: TaskKind,
    pub config: ModelConfig,
    heads: Vec<AttentionHead<T>>,
    wo: Tensor<T>,
    bo: Tensor<T>,
    ln1: LayerNorm<T>,
    ff_w1: Tensor<T>,
    ff_b1: Tensor<T>,
    ff_w2: Tensor<T>,
    ff_b2: Tensor<T>,
    ln2: LayerNorm<T>,
    hidden: Vec<Dense<T>>,
    out: Dense<T>,
}

impl<T: Scalar> std::fmt::Debug for ParserModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParserModel")
            .field("task", &self.task)
            .field("config", &self.config)
            .finish()
    }
}

/// The outcome of running one UAS through a task model.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Name {
        label: String,
        class_index: usize,
        /// Post-softmax, sums to 1.
        probabilities: Vec<f32>,
    },
    Version {
        /// Token position of the version, or seq_len meaning "absent".
        index: usize,
        raw_scores: Vec<f32>,
    },
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

const LAYER_NORM_EPS: f64 = 1e-5;
/// Dropout follows only the first three dense layers of a head.
const DROPOUT_LAYERS: usize = 3;

impl<T: Scalar> ParserModel<T> {
    /// Fresh model with uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights,
    /// drawn from a ChaCha stream seeded by `config.seed`.
    pub fn init(task: TaskKind, config: ModelConfig) -> Result<Self, ModelError> {
        config.validate(task)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let dk = config.head_dim();

        let mut param = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Tensor<T> {
            let bound = (1.0 / rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| T::from_f64_lossy((rng.random::<f64>() * 2.0 - 1.0) * bound))
                .collect();
            Tensor::parameter(&[rows, cols], data).expect("consistent by construction")
        };
        let mut bias = |fan_in: usize, len: usize, rng: &mut ChaCha8Rng| -> Tensor<T> {
            let bound = (1.0 / fan_in as f64).sqrt();
            let data = (0..len)
                .map(|_| T::from_f64_lossy((rng.random::<f64>() * 2.0 - 1.0) * bound))
                .collect();
            Tensor::parameter(&[len], data).expect("consistent by construction")
        };
        let layer_norm = |len: usize| LayerNorm {
            gamma: Tensor::parameter(&[len], vec![T::one(); len]).expect("consistent"),
            beta: Tensor::parameter(&[len], vec![T::zero(); len]).expect("consistent"),
        };

        let heads = (0..config.num_heads)
            .map(|_| AttentionHead {
                wq: param(d, dk, &mut rng),
                wk: param(d, dk, &mut rng),
                wv: param(d, dk, &mut rng),
            })
            .collect();
        let wo = param(d, d, &mut rng);
        let bo = bias(d, d, &mut rng);
        let ln1 = layer_norm(d);
        let ff_w1 = param(d, config.ff_dim, &mut rng);
        let ff_b1 = bias(d, config.ff_dim, &mut rng);
        let ff_w2 = param(config.ff_dim, d, &mut rng);
        let ff_b2 = bias(config.ff_dim, d, &mut rng);
        let ln2 = layer_norm(d);

        let mut hidden = Vec::with_capacity(config.head_widths.len());
        let mut in_width = config.flatten_width();
        for &width in &config.head_widths {
            hidden.push(Dense {
                w: param(in_width, width, &mut rng),
                b: bias(in_width, width, &mut rng),
            });
            in_width = width;
        }
        let out = Dense {
            w: param(in_width, config.num_outputs, &mut rng),
            b: bias(in_width, config.num_outputs, &mut rng),
        };

        Ok(Self {
            task,
            config,
            heads,
            wo,
            bo,
            ln1,
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
            ln2,
            hidden,
            out,
        })
    }

    /// All trainable tensors with their checkpoint names, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut params = Vec::new();
        for (i, h) in self.heads.iter().enumerate() {
            params.push((format!("encoder.head{i}.wq"), h.wq.clone()));
            params.push((format!("encoder.head{i}.wk"), h.wk.clone()));
            params.push((format!("encoder.head{i}.wv"), h.wv.clone()));
        }
        params.push(("encoder.wo".into(), self.wo.clone()));
        params.push(("encoder.bo".into(), self.bo.clone()));
        params.push(("encoder.ln1.gamma".into(), self.ln1.gamma.clone()));
        params.push(("encoder.ln1.beta".into(), self.ln1.beta.clone()));
        params.push(("encoder.ff.w1".into(), self.ff_w1.clone()));
        params.push(("encoder.ff.b1".into(), self.ff_b1.clone()));
        params.push(("encoder.ff.w2".into(), self.ff_w2.clone()));
        params.push(("encoder.ff.b2".into(), self.ff_b2.clone()));
        params.push(("encoder.ln2.gamma".into(), self.ln2.gamma.clone()));
        params.push(("encoder.ln2.beta".into(), self.ln2.beta.clone()));
        for (i, layer) in self.hidden.iter().enumerate() {
            params.push((format!("head.{i}.w"), layer.w.clone()));
            params.push((format!("head.{i}.b"), layer.b.clone()));
        }
        params.push(("head.out.w".into(), self.out.w.clone()));
        params.push(("head.out.b".into(), self.out.b.clone()));
        params
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.parameters().iter().all(Tensor::all_finite)
    }

    /// Positional encoding -> two-head self-attention with key masking ->
    /// add & norm -> feed-forward -> add & norm -> row-major flatten.
    /// Output length is seq_len * d_model (2000 in the standard config).
    pub fn encoder_forward(&self, x: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>, ModelError> {
        let d = self.config.d_model;
        let seq = self.config.seq_len;
        if x.shape() != vec![seq, d] || mask.len() != seq {
            return Err(NumericsError::ShapeMismatch {
                op: "encoder_forward",
                detail: format!(
                    "input {:?} with mask {} against seq_len {seq}, d_model {d}",
                    x.shape(),
                    mask.len()
                ),
            }
            .into());
        }
        let pe = positional_encoding_tensor::<T>(seq, d);
        let x = x.add(&pe)?;

        let scale = T::from_f64_lossy(1.0 / (self.config.head_dim() as f64).sqrt());
        let mut contexts = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = x.matmul(&head.wq)?;
            let k = x.matmul(&head.wk)?;
            let v = x.matmul(&head.wv)?;
            let scores = q.matmul(&k.transpose()?)?.scale(scale);
            let attn = scores.masked_softmax_rows(mask)?;
            contexts.push(attn.matmul(&v)?);
        }
        let concat = Tensor::concat_cols(&contexts)?;
        let attn_out = concat.matmul(&self.wo)?.add_row_broadcast(&self.bo)?;
        let n1 = x
            .add(&attn_out)?
            .layer_norm_rows(&self.ln1.gamma, &self.ln1.beta, LAYER_NORM_EPS)?;
        let ff = n1
            .matmul(&self.ff_w1)?
            .add_row_broadcast(&self.ff_b1)?
            .selu()
            .matmul(&self.ff_w2)?
            .add_row_broadcast(&self.ff_b2)?;
        let n2 = n1
            .add(&ff)?
            .layer_norm_rows(&self.ln2.gamma, &self.ln2.beta, LAYER_NORM_EPS)?;
        Ok(n2.flatten())
    }

    /// Dense head over the flattened encoder output: SeLU between layers,
    /// dropout after the first three layers when training. Returns the raw
    /// terminal scores; name tasks softmax them afterwards.
    pub fn head_scores(
        &self,
        features: &Tensor<T>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<T>, ModelError> {
        let mut h = features.reshape(&[1, features.len()])?;
        for (i, layer) in self.hidden.iter().enumerate() {
            h = h.matmul(&layer.w)?.add_row_broadcast(&layer.b)?.selu();
            if i < DROPOUT_LAYERS {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    h = h.dropout(self.config.dropout_p, rng)?;
                }
            }
        }
        let out = h.matmul(&self.out.w)?.add_row_broadcast(&self.out.b)?;
        Ok(out.flatten())
    }

    /// Full forward pass to raw terminal scores ([num_outputs]).
    /// `dropout_rng: Some(..)` selects training mode.
    pub fn forward_scores(
        &self,
        x: &Tensor<T>,
        mask: &[bool],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor<T>, ModelError> {
        let features = self.encoder_forward(x, mask)?;
        self.head_scores(&features, dropout_rng)
    }
}

impl ParserModel<f32> {
    fn input_tensor(&self, matrix: &UasMatrix) -> Result<Tensor<f32>, ModelError> {
        if matrix.dim != self.config.d_model {
            return Err(ModelError::DimMismatch {
                emb_dim: matrix.dim,
                d_model: self.config.d_model,
            });
        }
        Ok(Tensor::from_vec(
            &[matrix.seq_len, matrix.dim],
            matrix.values.clone(),
        )?)
    }

    /// Inference on an embedded UAS. Name tasks apply softmax and argmax to
    /// a label; version tasks argmax the raw scores (softmax is monotone, so
    /// both readings of "highest" coincide).
    pub fn predict_matrix(&self, matrix: &UasMatrix) -> Result<Prediction, ModelError> {
        let x = self.input_tensor(matrix)?;
        let scores = self.forward_scores(&x, &matrix.mask, None)?;
        if self.task.is_version_task() {
            let raw = scores.data();
            Ok(Prediction::Version {
                index: argmax(&raw),
                raw_scores: raw,
            })
        } else {
            let probs = scores.softmax(0)?.data();
            let class_index = argmax(&probs);
            let labels = self.task.class_labels().expect("name task has labels");
            Ok(Prediction::Name {
                label: labels[class_index].to_string(),
                class_index,
                probabilities: probs,
            })
        }
    }

    /// End-to-end inference from a raw UAS: tokenize, embed, encode, head.
    pub fn predict(
        &self,
        emb: &EmbeddingModel,
        raw: &RawUas,
    ) -> Result<Prediction, ModelError> {
        if emb.dim() != self.config.d_model {
            return Err(ModelError::DimMismatch {
                emb_dim: emb.dim(),
                d_model: self.config.d_model,
            });
        }
        let pre = PreprocessConfig::with_max_tokens(self.config.seq_len);
        let tokens = tokenize(raw, &pre);
        let matrix = emb.embed_uas_with_len(&tokens, self.config.seq_len);
        self.predict_matrix(&matrix)
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub(crate) fn tiny_model(task: TaskKind, seed: u64) -> ParserModel<f32> {
        let config = ModelConfig {
            d_model: 8,
            seq_len: 4,
            num_heads: 2,
            ff_dim: 16,
            head_widths: vec![16],
            dropout_p: 0.1,
            num_outputs: task.num_outputs(4),
            seed,
        };
        ParserModel::init(task, config).unwrap()
    }
}
