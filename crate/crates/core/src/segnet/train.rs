//! Mini-batch training with early stopping, plus prediction helpers.

use super::net::{backward, bce_loss, forward, Batch};
use super::{ParamSet, Scalar, SegnetError, TrainConfig};
use crate::metrics::{confusion, slice_metrics, MetricsError, SliceMetrics};
use crate::preprocess::Sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Gradient-descent state. Adam keeps per-parameter moments; SGD is bare.
pub struct Optimizer<T> {
    kind: OptimizerKind,
    learning_rate: f64,
    step_count: u64,
    moment1: Option<Vec<Vec<T>>>,
    moment2: Option<Vec<Vec<T>>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step_count: 0,
            moment1: None,
            moment2: None,
        }
    }

    /// Apply one update from the given gradients.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) {
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = T::from_f64(self.learning_rate);
                for (layer, glayer) in params.layers.iter_mut().zip(&grads.layers) {
                    for (p, &g) in layer.weights.iter_mut().zip(&glayer.weights) {
                        *p = *p - lr * g;
                    }
                    for (p, &g) in layer.bias.iter_mut().zip(&glayer.bias) {
                        *p = *p - lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.moment1.is_none() {
                    let zeros: Vec<Vec<T>> = params
                        .layers
                        .iter()
                        .map(|l| vec![T::zero(); l.weights.len() + l.bias.len()])
                        .collect();
                    self.moment1 = Some(zeros.clone());
                    self.moment2 = Some(zeros);
                }
                self.step_count += 1;
                let t = self.step_count as i32;
                let b1 = T::from_f64(ADAM_BETA1);
                let b2 = T::from_f64(ADAM_BETA2);
                let one = T::one();
                let corr1 = T::from_f64(1.0 - ADAM_BETA1.powi(t));
                let corr2 = T::from_f64(1.0 - ADAM_BETA2.powi(t));
                let lr = T::from_f64(self.learning_rate);
                let eps = T::from_f64(ADAM_EPS);

                let m1 = self.moment1.as_mut().unwrap();
                let m2 = self.moment2.as_mut().unwrap();
                for ((layer, glayer), (lm1, lm2)) in params
                    .layers
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(m1.iter_mut().zip(m2.iter_mut()))
                {
                    let n_w = layer.weights.len();
                    let update = |p: &mut T, g: T, m: &mut T, v: &mut T| {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let m_hat = *m / corr1;
                        let v_hat = *v / corr2;
                        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                    };
                    for (i, (p, &g)) in layer.weights.iter_mut().zip(&glayer.weights).enumerate() {
                        update(p, g, &mut lm1[i], &mut lm2[i]);
                    }
                    for (i, (p, &g)) in layer.bias.iter_mut().zip(&glayer.bias).enumerate() {
                        update(p, g, &mut lm1[n_w + i], &mut lm2[n_w + i]);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub stopped_epoch: usize,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn mean_loss_over<T: Scalar>(
    params: &ParamSet<T>,
    samples: &[&Sample],
    batch_size: usize,
) -> Result<f64, SegnetError> {
    let mut sum = 0.0;
    for chunk in samples.chunks(batch_size) {
        let inputs = Batch::<T>::inputs(chunk)?;
        let targets = Batch::<T>::targets(chunk)?;
        let out = forward(params, &inputs)?;
        sum += bce_loss(&out, &targets)? * chunk.len() as f64;
    }
    Ok(sum / samples.len() as f64)
}

/// Train with shuffled mini-batches until validation loss stalls for
/// `patience` epochs or `max_epochs` is reached. Returns the parameters of
/// the best validation epoch.
pub fn train<T: Scalar>(
    params: ParamSet<T>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<(ParamSet<T>, TrainLog), SegnetError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(SegnetError::EmptySet { which: "train" });
    }
    if val_set.is_empty() {
        return Err(SegnetError::EmptySet { which: "validation" });
    }

    let mut params = params;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_refs: Vec<&Sample> = val_set.iter().collect();

    let mut log = TrainLog {
        epochs: Vec::new(),
        stopped_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    let mut best_params = params.clone();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch_samples: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let inputs = Batch::<T>::inputs(&batch_samples)?;
            let targets = Batch::<T>::targets(&batch_samples)?;
            let (loss, grads) = backward(&params, &inputs, &targets)?;
            if !loss.is_finite() {
                return Err(SegnetError::NonFiniteLoss { epoch });
            }
            optimizer.step(&mut params, &grads);
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = mean_loss_over(&params, &val_refs, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(SegnetError::NonFiniteLoss { epoch });
        }
        log.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        log.stopped_epoch = epoch;

        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best_params = params.clone();
        }
        if epoch - log.best_epoch >= cfg.patience {
            log.stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    Ok((best_params, log))
}

/// Binarize the lesion channel of one sample's prediction.
pub fn predict_mask<T: Scalar>(
    params: &ParamSet<T>,
    sample: &Sample,
    threshold: f64,
) -> Result<Vec<u8>, SegnetError> {
    let batch = Batch::<T>::inputs(&[sample])?;
    let out = forward(params, &batch)?;
    let plane = sample.side * sample.side;
    Ok(out.data[..plane]
        .iter()
        .map(|v| u8::from(v.as_f64() >= threshold))
        .collect())
}

/// Per-slide metrics of a model over a sample list, paired with each slide's
/// lesion flag for aggregation.
pub fn evaluate_samples<T: Scalar>(
    params: &ParamSet<T>,
    samples: &[Sample],
    threshold: f64,
) -> Result<(Vec<SliceMetrics>, Vec<bool>), SegnetError> {
    let mut rows = Vec::with_capacity(samples.len());
    let mut flags = Vec::with_capacity(samples.len());
    for sample in samples {
        let pred = predict_mask(params, sample, threshold)?;
        let truth = sample.truth_mask();
        let counts = confusion(&pred, &truth).map_err(metrics_bridge)?;
        rows.push(slice_metrics(sample.slide_id.clone(), &counts).map_err(metrics_bridge)?);
        flags.push(sample.has_lesion);
    }
    Ok((rows, flags))
}

fn metrics_bridge(err: MetricsError) -> SegnetError {
    SegnetError::ShapeMismatch {
        expected: "consistent prediction/target masks".into(),
        found: err.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::SlideId;
    use crate::segnet::{init_unet, UNetConfig};
    use rand::{Rng, SeedableRng};

    fn config(side: usize) -> UNetConfig {
        UNetConfig {
            input_channels: 4,
            output_channels: 2,
            depth: 2,
            base_width: 4,
            image_side: side,
        }
    }

    /// Phantom-like separable samples: lesion pixels carry a bright channel-0
    /// signature; targets mark exactly those pixels.
    fn separable_samples(n: usize, side: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let plane = side * side;
                let mut input = vec![0.0f32; 4 * plane];
                let mut target = vec![0.0f32; 2 * plane];
                let mut any = false;
                for p in 0..plane {
                    let lesion = rng.gen_bool(0.25);
                    input[p] = if lesion { 0.9 } else { 0.2 };
                    input[plane + p] = if lesion { 0.8 } else { 0.1 };
                    input[2 * plane + p] = 0.5;
                    input[3 * plane + p] = 1.0;
                    target[p] = if lesion { 1.0 } else { 0.0 };
                    target[plane + p] = 1.0 - target[p];
                    any |= lesion;
                }
                Sample {
                    slide_id: SlideId {
                        tag: "T".into(),
                        volume: 0,
                        slide: i,
                    },
                    side,
                    input_channels: 4,
                    input,
                    target,
                    has_lesion: any,
                }
            })
            .collect()
    }

    #[test]
    fn loss_decreases_over_first_epochs() {
        let samples = separable_samples(20, 32, 50);
        let params = init_unet::<f32>(&config(32), 51).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.001,
            batch_size: 10,
            max_epochs: 3,
            patience: 10,
            shuffle: true,
            seed: 52,
            optimizer: OptimizerKind::Adam,
        };
        let (_, log) = train(params, &samples, &samples, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 3);
        assert!(log.epochs[0].train_loss > log.epochs[1].train_loss);
        assert!(log.epochs[1].train_loss > log.epochs[2].train_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let samples = separable_samples(8, 16, 60);
        let cfg = TrainConfig {
            learning_rate: 0.001,
            batch_size: 4,
            max_epochs: 2,
            patience: 5,
            shuffle: true,
            seed: 61,
            optimizer: OptimizerKind::Adam,
        };
        let run = || {
            let params = init_unet::<f32>(&config(16), 62).unwrap();
            train(params, &samples, &samples, &cfg).unwrap()
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn early_stopping_restores_best_epoch() {
        let samples = separable_samples(8, 16, 70);
        let cfg = TrainConfig {
            learning_rate: 0.05, // aggressive on purpose: validation loss oscillates
            batch_size: 8,
            max_epochs: 30,
            patience: 1,
            shuffle: false,
            seed: 71,
            optimizer: OptimizerKind::Adam,
        };
        let params = init_unet::<f32>(&config(16), 72).unwrap();
        let (best, log) = train(params, &samples, &samples, &cfg).unwrap();
        assert!(log.stopped_epoch <= cfg.max_epochs);
        let min_val = log
            .epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(min_val, log.best_val_loss);
        // Returned parameters reproduce the recorded best validation loss.
        let refs: Vec<&Sample> = samples.iter().collect();
        let replay = mean_loss_over(&best, &refs, cfg.batch_size).unwrap();
        assert!((replay - log.best_val_loss).abs() < 1e-9);
        if log.stopped_epoch < cfg.max_epochs {
            assert_eq!(log.stop_reason, StopReason::EarlyStop);
        }
    }

    #[test]
    fn empty_sets_are_rejected() {
        let params = init_unet::<f32>(&config(16), 0).unwrap();
        let samples = separable_samples(2, 16, 0);
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(params.clone(), &[], &samples, &cfg),
            Err(SegnetError::EmptySet { which: "train" })
        ));
        assert!(matches!(
            train(params, &samples, &[], &cfg),
            Err(SegnetError::EmptySet { which: "validation" })
        ));
    }

    #[test]
    fn zero_learning_rate_step_is_identity() {
        let params = init_unet::<f64>(&config(16), 80).unwrap();
        let samples = separable_samples(2, 16, 81);
        let refs: Vec<&Sample> = samples.iter().collect();
        let inputs = Batch::<f64>::inputs(&refs).unwrap();
        let targets = Batch::<f64>::targets(&refs).unwrap();
        let (_, grads) = backward(&params, &inputs, &targets).unwrap();

        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut updated = params.clone();
            let mut opt = Optimizer::new(kind, 0.0);
            opt.step(&mut updated, &grads);
            assert_eq!(updated, params, "{kind:?}");
        }
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let params = init_unet::<f64>(&config(16), 90).unwrap();
        let samples = separable_samples(2, 16, 91);
        let refs: Vec<&Sample> = samples.iter().collect();
        let inputs = Batch::<f64>::inputs(&refs).unwrap();
        let targets = Batch::<f64>::targets(&refs).unwrap();
        let (loss0, grads) = backward(&params, &inputs, &targets).unwrap();

        let mut updated = params.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5);
        opt.step(&mut updated, &grads);
        let out = forward(&updated, &inputs).unwrap();
        let loss1 = bce_loss(&out, &targets).unwrap();
        assert!(loss1 < loss0);
    }

    #[test]
    fn predict_mask_threshold_boundaries() {
        let params = init_unet::<f32>(&config(16), 100).unwrap();
        let zeroed = params.zeros_like();
        let sample = &separable_samples(1, 16, 101)[0];

        // All outputs are exactly 0.5: the boundary is included.
        let mask = predict_mask(&zeroed, sample, 0.5).unwrap();
        assert!(mask.iter().all(|&v| v == 1));

        let mask = predict_mask(&params, sample, 1.0).unwrap();
        assert!(mask.iter().all(|&v| v == 0));

        let mask = predict_mask(&params, sample, 0.0).unwrap();
        assert!(mask.iter().all(|&v| v == 1));
    }

    #[test]
    fn lung_mode_runs_with_three_channels() {
        // Same operations, different configuration: 3 input channels and a
        // lung-style target.
        let cfg = UNetConfig {
            input_channels: 3,
            output_channels: 2,
            depth: 1,
            base_width: 2,
            image_side: 8,
        };
        let params = init_unet::<f32>(&cfg, 110).unwrap();
        let plane = 64;
        let mut input = vec![0.3f32; 3 * plane];
        for p in 20..40 {
            input[p] = 0.9;
        }
        let mut target = vec![0.0f32; 2 * plane];
        for p in 0..plane {
            let lung = (20..40).contains(&p);
            target[p] = if lung { 1.0 } else { 0.0 };
            target[plane + p] = 1.0 - target[p];
        }
        let sample = Sample {
            slide_id: SlideId {
                tag: "L".into(),
                volume: 0,
                slide: 0,
            },
            side: 8,
            input_channels: 3,
            input,
            target,
            has_lesion: false,
        };
        let samples = vec![sample];
        let tc = TrainConfig {
            learning_rate: 0.01,
            batch_size: 1,
            max_epochs: 2,
            patience: 2,
            shuffle: false,
            seed: 111,
            optimizer: OptimizerKind::Adam,
        };
        let (trained, log) = train(params, &samples, &samples, &tc).unwrap();
        assert_eq!(log.epochs.len(), 2);
        let mask = predict_mask(&trained, &samples[0], 0.5).unwrap();
        assert_eq!(mask.len(), plane);
    }
}
