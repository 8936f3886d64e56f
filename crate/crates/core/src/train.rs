//! Minibatch SGD loops and evaluation.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{apply_sgd, backward, cross_entropy, forward, AutogradError, Network, StoragePolicy};
use crate::data::Dataset;
use crate::metrics::{grad_angle, grad_angle_per_layer, MetricsError, RunRecord};
use crate::tensor::DenseMatrix;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("dataset of {samples} samples has no full batch of {batch}")]
    NoFullBatch { samples: usize, batch: usize },
    #[error("non-finite training loss at epoch {epoch}")]
    Diverged { epoch: usize },
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Record the angle to the full gradient on each epoch's first batch.
    pub record_angle: bool,
    pub per_layer_angle: bool,
    /// Record wall time per epoch.
    pub timing: bool,
}

/// Mean cross-entropy and accuracy over `data`, in chunks of `chunk` samples.
pub fn evaluate(net: &Network, data: &Dataset, chunk: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(chunk.max(1)) {
        let (x, y) = data.gather(idx);
        let logits = net.infer(&x)?;
        loss += cross_entropy(&logits, &y)?.0 * idx.len() as f64;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

pub fn argmax_rows(m: &DenseMatrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

/// Trains the trainable layers of `net` with plain SGD.
///
/// Emits one record before training (`epoch = 0`) and one per epoch with
/// the mean training loss, test accuracy and the number of elements the
/// first batch's forward pass kept.
pub fn fit(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    policy: StoragePolicy<'_>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RunRecord>> {
    if train.len() < cfg.batch_size || cfg.batch_size == 0 {
        return Err(TrainError::NoFullBatch {
            samples: train.len(),
            batch: cfg.batch_size,
        });
    }
    let (loss0, acc0) = evaluate(net, test, 256)?;
    let mut records = vec![RunRecord {
        phase: "init".into(),
        task: None,
        epoch: Some(0),
        loss: loss0,
        accuracy: acc0,
        stored_elements: 0,
        grad_angle_degrees: None,
        grad_angle_per_layer: None,
        wall_time: None,
    }];
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let batches = train.batch_indices(cfg.batch_size, Some(rng));
        let (mut total, mut stored_elements) = (0.0, 0u64);
        let (mut angle, mut per_layer) = (None, None);
        for (step, idx) in batches.iter().enumerate() {
            let (x, y) = train.gather(idx);
            let (logits, stored) = forward(net, &x, policy)?;
            let (loss, grads) = backward(net, &stored, &logits, &y)?;
            if step == 0 {
                stored_elements = stored.stored_elements() as u64;
                if cfg.record_angle {
                    let (fl, fs) = forward(net, &x, StoragePolicy::Full)?;
                    let (_, full) = backward(net, &fs, &fl, &y)?;
                    angle = Some(grad_angle(&grads, &full)?);
                    if cfg.per_layer_angle {
                        per_layer = Some(grad_angle_per_layer(&grads, &full)?);
                    }
                }
            }
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            total += loss;
            apply_sgd(net, &grads, cfg.lr)?;
        }
        let (_, acc) = evaluate(net, test, 256)?;
        records.push(RunRecord {
            phase: "train".into(),
            task: None,
            epoch: Some(epoch),
            loss: total / batches.len() as f64,
            accuracy: acc,
            stored_elements,
            grad_angle_degrees: angle,
            grad_angle_per_layer: per_layer,
            wall_time: cfg.timing.then(|| start.elapsed().as_secs_f64()),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::LayerSpec;
    use crate::data::{SubspaceLayout, SyntheticSpec, SyntheticTask};
    use rand::SeedableRng;

    #[test]
    fn linear_probe_separates_blobs() {
        let spec = SyntheticSpec {
            height: 3,
            width: 3,
            channels: 4,
            classes: 3,
            rank: 2,
            signal: 1.0,
            noise: 0.5,
            ambient: 0.1,
            layout: SubspaceLayout::PerClass,
            seed: 1,
        };
        let task = SyntheticTask::new(spec).unwrap();
        let train = task.sample(600, 2).unwrap().reshaped(&[36]).unwrap();
        let test = task.sample(300, 3).unwrap().reshaped(&[36]).unwrap();
        let mut net = Network::new(vec![36], vec![LayerSpec::dense(36, 3)], 4).unwrap();
        net.set_trainable_last(1);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.1,
            record_angle: false,
            per_layer_angle: false,
            timing: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let records = fit(&mut net, &train, &test, StoragePolicy::Full, &cfg, &mut rng).unwrap();
        assert_eq!(records.len(), 11);
        assert!(records.last().unwrap().accuracy > 0.95, "{:?}", records.last());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        let m = DenseMatrix::new(2, 3, vec![1.0, 3.0, 3.0, -1.0, -2.0, -3.0]).unwrap();
        assert_eq!(argmax_rows(&m), vec![1, 0]);
    }
}
