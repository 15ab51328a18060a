//! The per-task SGD training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::EmbeddingModel;
use crate::model::{ModelConfig, ModelError, ParserModel, TaskKind};
use crate::numerics::{sgd_step, SgdConfig, Tensor};
use crate::preprocess::{tokenize, PreprocessConfig};

use super::{build_version_label, ClassSpec, LabeledExample, NameLoss, PipelineError, TrainConfig};

pub struct TrainedModel {
    pub model: ParserModel<f32>,
    /// Mean per-example loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
}

struct PreparedExample {
    values: Vec<f32>,
    mask: Vec<bool>,
    label: usize,
}

fn prepare(
    task: TaskKind,
    data: &[LabeledExample],
    emb: &EmbeddingModel,
    seq_len: usize,
) -> Vec<PreparedExample> {
    let pre = PreprocessConfig::with_max_tokens(seq_len);
    let spec = ClassSpec::for_task(task);
    data.iter()
        .map(|ex| {
            let tokens = tokenize(&ex.raw(), &pre);
            let matrix = emb.embed_uas_with_len(&tokens, seq_len);
            let label = if task.is_version_task() {
                build_version_label(ex, task, &pre)
            } else {
                spec.class_index(ex.label_for(task))
            };
            PreparedExample {
                values: matrix.values,
                mask: matrix.mask,
                label,
            }
        })
        .collect()
}

/// Trains one task model. Examples are embedded once up front; each epoch
/// shuffles them (seeded), runs mini-batches of `batch_size` (the last
/// partial batch included), averages the per-example loss over the batch
/// and takes one SGD step per batch. Fully deterministic for a fixed seed.
pub fn train(
    task: TaskKind,
    data: &[LabeledExample],
    emb: &EmbeddingModel,
    mconfig: &ModelConfig,
    tconfig: &TrainConfig,
) -> Result<TrainedModel, PipelineError> {
    train_with(task, data, emb, mconfig, tconfig, |_, _, _| true)
}

/// As [`train`], invoking `on_epoch(epoch_index, mean_loss, model)` after
/// every epoch; returning false stops training early.
pub fn train_with(
    task: TaskKind,
    data: &[LabeledExample],
    emb: &EmbeddingModel,
    mconfig: &ModelConfig,
    tconfig: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &ParserModel<f32>) -> bool,
) -> Result<TrainedModel, PipelineError> {
    if emb.dim() != mconfig.d_model {
        return Err(ModelError::DimMismatch {
            emb_dim: emb.dim(),
            d_model: mconfig.d_model,
        }
        .into());
    }
    let model = ParserModel::<f32>::init(task, mconfig.clone())?;
    let params = model.parameters();
    let sgd = SgdConfig::new(tconfig.learning_rate, tconfig.weight_decay);
    let prepared = prepare(task, data, emb, mconfig.seq_len);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tconfig.seed);
    let mut epoch_losses = Vec::with_capacity(tconfig.epochs);

    for epoch in 0..tconfig.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0f64;
        for (batch_idx, batch) in order.chunks(tconfig.batch_size.max(1)).enumerate() {
            let batch_scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let ex = &prepared[i];
                let x = Tensor::from_vec(&[mconfig.seq_len, mconfig.d_model], ex.values.clone())?;
                let scores = model.forward_scores(&x, &ex.mask, Some(&mut rng))?;
                let loss = match (task.is_version_task(), tconfig.name_loss) {
                    (true, _) | (false, NameLoss::CrossEntropy) => {
                        scores.cross_entropy_loss(ex.label)?
                    }
                    (false, NameLoss::BinaryCrossEntropy) => {
                        let probs = scores.softmax(0)?;
                        let mut onehot = vec![0.0f32; mconfig.num_outputs];
                        onehot[ex.label] = 1.0;
                        let target = Tensor::from_vec(&[mconfig.num_outputs], onehot)?;
                        probs.binary_cross_entropy_loss(&target)?
                    }
                };
                let value = loss.item() as f64;
                if !value.is_finite() {
                    return Err(PipelineError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                epoch_sum += value;
                loss.scale(batch_scale).backward()?;
            }
            sgd_step(&params, &sgd)?;
        }
        let mean = epoch_sum / prepared.len().max(1) as f64;
        epoch_losses.push(mean);
        if !on_epoch(epoch, mean, &model) {
            break;
        }
    }

    Ok(TrainedModel {
        model,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{train_embeddings, EmbeddingConfig};

    fn tiny_corpus() -> Vec<LabeledExample> {
        // Two trivially separable "classes": Windows-looking and
        // Android-looking strings, all other classes folded into N/A.
        let mut data = Vec::new();
        for i in 0..30 {
            data.push(LabeledExample {
                ua: format!("Mozilla/5.0 (Windows NT 10.0; rev{i}) like Gecko"),
                os_name: Some("Windows".into()),
                os_version: Some("10.0".into()),
                ..Default::default()
            });
            data.push(LabeledExample {
                ua: format!("Mozilla/5.0 (Linux; Android 12; SM-{i}) Chrome/105.0.0.0"),
                os_name: Some("Android".into()),
                os_version: Some("12".into()),
                ..Default::default()
            });
        }
        data
    }

    fn tiny_embeddings(data: &[LabeledExample]) -> EmbeddingModel {
        let pre = PreprocessConfig::with_max_tokens(12);
        let tokenized: Vec<_> = data.iter().map(|e| tokenize(&e.raw(), &pre)).collect();
        train_embeddings(
            &tokenized,
            &EmbeddingConfig {
                dim: 8,
                bucket_count: 1 << 10,
                epochs: 1,
                seed: 5,
                ..EmbeddingConfig::default()
            },
        )
        .unwrap()
    }

    fn tiny_model_config(task: TaskKind, seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            seq_len: 12,
            num_heads: 2,
            ff_dim: 16,
            head_widths: vec![32],
            dropout_p: 0.0,
            num_outputs: task.num_outputs(12),
            seed,
        }
    }

    #[test]
    fn loss_decreases_on_learnable_data() {
        let data = tiny_corpus();
        let emb = tiny_embeddings(&data);
        let task = TaskKind::OsName;
        let mut tconfig = TrainConfig::for_task(task, 7);
        tconfig.epochs = 12;
        tconfig.batch_size = 10;
        tconfig.learning_rate = 0.01;
        let out = train(task, &data, &emb, &tiny_model_config(task, 7), &tconfig).unwrap();
        assert!(
            out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap(),
            "losses: {:?}",
            out.epoch_losses
        );
        assert!(out.model.all_finite());
    }

    #[test]
    fn zero_learning_rate_leaves_weights_at_init() {
        let data = tiny_corpus();
        let emb = tiny_embeddings(&data);
        let task = TaskKind::OsName;
        let mconfig = tiny_model_config(task, 11);
        let mut tconfig = TrainConfig::for_task(task, 11);
        tconfig.epochs = 2;
        tconfig.learning_rate = 0.0;
        tconfig.weight_decay = 0.0;
        let out = train(task, &data, &emb, &mconfig, &tconfig).unwrap();
        let fresh = ParserModel::<f32>::init(task, mconfig).unwrap();
        for (trained, init) in out.model.parameters().iter().zip(fresh.parameters()) {
            assert_eq!(trained.data(), init.data());
        }
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let data = tiny_corpus();
        let emb = tiny_embeddings(&data);
        let task = TaskKind::OsVersionIndex;
        let mconfig = tiny_model_config(task, 13);
        let mut tconfig = TrainConfig::for_task(task, 13);
        tconfig.epochs = 2;
        tconfig.batch_size = 16;
        let a = train(task, &data, &emb, &mconfig, &tconfig).unwrap();
        let b = train(task, &data, &emb, &mconfig, &tconfig).unwrap();
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        a.model.write_to(&mut bytes_a).unwrap();
        b.model.write_to(&mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn early_stop_callback_halts_training() {
        let data = tiny_corpus();
        let emb = tiny_embeddings(&data);
        let task = TaskKind::OsName;
        let mut tconfig = TrainConfig::for_task(task, 17);
        tconfig.epochs = 10;
        let out = train_with(
            task,
            &data,
            &emb,
            &tiny_model_config(task, 17),
            &tconfig,
            |epoch, _, _| epoch < 2,
        )
        .unwrap();
        assert_eq!(out.epoch_losses.len(), 3);
    }

    #[test]
    fn embedding_dim_mismatch_is_rejected() {
        let data = tiny_corpus();
        let emb = tiny_embeddings(&data); // dim 8
        let task = TaskKind::OsName;
        let mut mconfig = tiny_model_config(task, 1);
        mconfig.d_model = 16;
        mconfig.num_outputs = 7;
        let err = train(task, &data, &emb, &mconfig, &TrainConfig::for_task(task, 1)).unwrap_err();
        assert!(matches!(
            err,
            PipelineError::Model(ModelError::DimMismatch { .. })
        ));
    }
}
