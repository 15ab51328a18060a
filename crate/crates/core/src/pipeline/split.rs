//! Class balancing and the stratified train/validation split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassSpec, LabeledExample, PipelineError, TrainConfig};

/// Downsamples each class to `per_class_quota` (when set), then splits each
/// class independently at `split_fraction` so class proportions carry over
/// to both sets. Sampling, splitting and the final within-set shuffles are
/// all driven by the config seed. Every class must be represented.
pub fn balance_and_split(
    data: &[LabeledExample],
    spec: &ClassSpec,
    config: &TrainConfig,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>), PipelineError> {
    assert!(
        config.split_fraction > 0.0 && config.split_fraction < 1.0,
        "split_fraction must be in (0, 1)"
    );
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); spec.labels.len()];
    for (i, ex) in data.iter().enumerate() {
        let class = spec.class_index(ex.label_for(spec.task));
        buckets[class].push(i);
    }
    for (class, bucket) in buckets.iter().enumerate() {
        if bucket.is_empty() {
            return Err(PipelineError::MissingClass(spec.labels[class].clone()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for bucket in buckets.iter_mut() {
        bucket.shuffle(&mut rng);
        let take = config
            .per_class_quota
            .map_or(bucket.len(), |q| q.min(bucket.len()));
        let sampled = &bucket[..take];
        let n_train = (take as f64 * config.split_fraction).round() as usize;
        let n_train = n_train.min(take);
        train.extend(sampled[..n_train].iter().map(|&i| data[i].clone()));
        validation.extend(sampled[n_train..].iter().map(|&i| data[i].clone()));
    }
    train.shuffle(&mut rng);
    validation.shuffle(&mut rng);
    Ok((train, validation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskKind;

    fn example(os: &str, n: usize) -> LabeledExample {
        LabeledExample {
            ua: format!("ua {os} {n}"),
            os_name: Some(os.to_string()),
            ..Default::default()
        }
    }

    fn balanced_data(per_class: usize) -> Vec<LabeledExample> {
        let spec = ClassSpec::for_task(TaskKind::OsName);
        let mut data = Vec::new();
        for label in &spec.labels {
            for n in 0..per_class {
                data.push(example(label, n));
            }
        }
        data
    }

    #[test]
    fn seventy_thirty_per_class() {
        let data = balanced_data(1000);
        let spec = ClassSpec::for_task(TaskKind::OsName);
        let config = TrainConfig::for_task(TaskKind::OsName, 1);
        let (train, val) = balance_and_split(&data, &spec, &config).unwrap();
        assert_eq!(train.len() + val.len(), data.len());
        for label in &spec.labels {
            let in_train = train
                .iter()
                .filter(|e| e.os_name.as_deref() == Some(label.as_str()))
                .count();
            assert!((in_train as i64 - 700).abs() <= 1, "{label}: {in_train}");
        }
    }

    #[test]
    fn quota_downsamples_each_class() {
        let data = balanced_data(1000);
        let spec = ClassSpec::for_task(TaskKind::OsName);
        let mut config = TrainConfig::for_task(TaskKind::OsName, 2);
        config.per_class_quota = Some(100);
        let (train, val) = balance_and_split(&data, &spec, &config).unwrap();
        assert_eq!(train.len() + val.len(), 700);
        assert_eq!(train.len(), 70 * 7);
        assert_eq!(val.len(), 30 * 7);
    }

    #[test]
    fn missing_class_is_reported_by_name() {
        let spec = ClassSpec::for_task(TaskKind::OsName);
        let config = TrainConfig::for_task(TaskKind::OsName, 3);
        // Everything maps to "Windows": all other classes are empty.
        let data = vec![example("Windows", 0), example("Windows", 1)];
        match balance_and_split(&data, &spec, &config) {
            Err(PipelineError::MissingClass(name)) => assert_eq!(name, "Android"),
            other => panic!("expected MissingClass, got {other:?}"),
        }
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let data = balanced_data(100);
        let spec = ClassSpec::for_task(TaskKind::OsName);
        let config = TrainConfig::for_task(TaskKind::OsName, 4);
        let (train, val) = balance_and_split(&data, &spec, &config).unwrap();
        let mut seen: Vec<&str> = train
            .iter()
            .chain(val.iter())
            .map(|e| e.ua.as_str())
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), data.len());
    }

    #[test]
    fn same_seed_reproduces_the_split() {
        let data = balanced_data(50);
        let spec = ClassSpec::for_task(TaskKind::OsName);
        let config = TrainConfig::for_task(TaskKind::OsName, 9);
        let (t1, v1) = balance_and_split(&data, &spec, &config).unwrap();
        let (t2, v2) = balance_and_split(&data, &spec, &config).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
    }
}
