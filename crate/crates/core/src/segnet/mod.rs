//! A small U-Net with hand-written forward and backward passes.
//!
//! The architecture follows the usual encoder/decoder scheme: per level two
//! 3x3 same-padded convolutions with ReLU and a 2x2 max-pool, a bottleneck,
//! nearest-neighbor upsampling with skip concatenation on the way back up,
//! and a 1x1 sigmoid head. Everything is generic over the scalar type so the
//! gradient-check suite can run the exact same code in f64.

mod net;
mod ops;
mod serialize;
mod train;

pub use net::{backward, bce_loss, forward, Batch};
pub use ops::FeatureMap;
pub use serialize::{load_checkpoint, save_checkpoint, train_log_csv};
pub use train::{
    evaluate_samples, predict_mask, train, EpochStats, Optimizer, OptimizerKind, StopReason,
    TrainLog,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegnetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("target is not one-hot at pixel {index}")]
    NonOneHotTarget { index: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("{which} set is empty")]
    EmptySet { which: &'static str },
    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

/// Floating-point element type for network math.
pub trait Scalar:
    num_traits::Float + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub input_channels: usize,
    pub output_channels: usize,
    pub depth: usize,
    pub base_width: usize,
    pub image_side: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_channels: 4,
            output_channels: 2,
            depth: 4,
            base_width: 16,
            image_side: 320,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), SegnetError> {
        if self.depth < 1 {
            return Err(SegnetError::InvalidConfig("depth must be at least 1".into()));
        }
        if self.input_channels < 1 || self.output_channels < 1 || self.base_width < 1 {
            return Err(SegnetError::InvalidConfig(
                "channel and width counts must be at least 1".into(),
            ));
        }
        let div = 1usize << self.depth;
        if self.image_side == 0 || self.image_side % div != 0 {
            return Err(SegnetError::InvalidConfig(format!(
                "image side {} is not divisible by 2^depth = {}",
                self.image_side, div
            )));
        }
        Ok(())
    }
}

/// Shape of one convolution layer in the canonical layer order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub out_channels: usize,
    pub in_channels: usize,
    pub ksize: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.ksize * self.ksize
    }
}

/// Canonical layer order: encoder levels top-down (a then b), bottleneck,
/// decoder levels bottom-up, 1x1 head.
pub fn layer_shapes(config: &UNetConfig) -> Vec<LayerShape> {
    let bw = config.base_width;
    let d = config.depth;
    let mut shapes = Vec::with_capacity(4 * d + 3);
    let mut conv = |name: String, in_c: usize, out_c: usize, k: usize| {
        shapes.push(LayerShape {
            name,
            out_channels: out_c,
            in_channels: in_c,
            ksize: k,
        });
    };
    for i in 0..d {
        let width = bw << i;
        let in_c = if i == 0 { config.input_channels } else { bw << (i - 1) };
        conv(format!("enc{i}a"), in_c, width, 3);
        conv(format!("enc{i}b"), width, width, 3);
    }
    let bot = bw << d;
    conv("bot_a".into(), bw << (d - 1), bot, 3);
    conv("bot_b".into(), bot, bot, 3);
    for i in (0..d).rev() {
        let width = bw << i;
        // Upsampled path (2*width) concatenated with the skip (width).
        conv(format!("dec{i}a"), 3 * width, width, 3);
        conv(format!("dec{i}b"), width, width, 3);
    }
    conv("head".into(), bw, config.output_channels, 1);
    shapes
}

/// Weights and bias of one convolution, laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub shape: LayerShape,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Every learnable tensor of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub config: UNetConfig,
    pub init_seed: u64,
    pub layers: Vec<ConvParams<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn zeros_like(&self) -> ParamSet<T> {
        ParamSet {
            config: self.config,
            init_seed: self.init_seed,
            layers: self
                .layers
                .iter()
                .map(|l| ConvParams {
                    shape: l.shape.clone(),
                    weights: vec![T::zero(); l.weights.len()],
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x = *x + *y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x = *x + *y;
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Convert element type, rounding through f64.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            config: self.config,
            init_seed: self.init_seed,
            layers: self
                .layers
                .iter()
                .map(|l| ConvParams {
                    shape: l.shape.clone(),
                    weights: l.weights.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Standard-normal draw via Box-Muller; one value per call, deterministic
/// for a given RNG stream.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fresh parameters: He-normal weights (std = sqrt(2/fan_in)) drawn in f64
/// from a seeded stream, zero biases.
pub fn init_unet<T: Scalar>(config: &UNetConfig, seed: u64) -> Result<ParamSet<T>, SegnetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_shapes(config)
        .into_iter()
        .map(|shape| {
            let fan_in = shape.in_channels * shape.ksize * shape.ksize;
            let std = (2.0 / fan_in as f64).sqrt();
            let weights = (0..shape.weight_len())
                .map(|_| T::from_f64(standard_normal(&mut rng) * std))
                .collect();
            let bias = vec![T::zero(); shape.out_channels];
            ConvParams {
                shape,
                weights,
                bias,
            }
        })
        .collect();
    Ok(ParamSet {
        config: *config,
        init_seed: seed,
        layers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub shuffle: bool,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0001,
            batch_size: 45,
            max_epochs: 200,
            patience: 10,
            shuffle: true,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SegnetError> {
        if !(self.learning_rate > 0.0) {
            return Err(SegnetError::InvalidTrainConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(SegnetError::InvalidTrainConfig("batch_size must be at least 1".into()));
        }
        if self.patience < 1 {
            return Err(SegnetError::InvalidTrainConfig("patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let config = UNetConfig {
            input_channels: 4,
            output_channels: 2,
            depth: 2,
            base_width: 4,
            image_side: 16,
        };
        let a: ParamSet<f32> = init_unet(&config, 11).unwrap();
        let b: ParamSet<f32> = init_unet(&config, 11).unwrap();
        assert_eq!(a, b);
        let c: ParamSet<f32> = init_unet(&config, 12).unwrap();
        assert_ne!(a, c);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        assert!(a
            .layers
            .iter()
            .all(|l| l.weights.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn side_must_divide_by_two_pow_depth() {
        let ok = UNetConfig {
            depth: 3,
            image_side: 320,
            ..UNetConfig::default()
        };
        assert!(ok.validate().is_ok());
        let bad = UNetConfig {
            depth: 4,
            image_side: 100,
            ..UNetConfig::default()
        };
        assert!(matches!(bad.validate(), Err(SegnetError::InvalidConfig(_))));
        assert!(init_unet::<f32>(&bad, 0).is_err());
    }

    #[test]
    fn layer_shapes_chain_consistently() {
        let config = UNetConfig {
            input_channels: 4,
            output_channels: 2,
            depth: 2,
            base_width: 8,
            image_side: 32,
        };
        let shapes = layer_shapes(&config);
        assert_eq!(shapes.len(), 4 * 2 + 3);
        assert_eq!(shapes[0].in_channels, 4);
        assert_eq!(shapes[0].out_channels, 8);
        // Bottleneck doubles once more.
        let bot = shapes.iter().find(|s| s.name == "bot_a").unwrap();
        assert_eq!(bot.out_channels, 32);
        // First decoder level sees upsampled 32 + skip 16 channels.
        let dec = shapes.iter().find(|s| s.name == "dec1a").unwrap();
        assert_eq!(dec.in_channels, 48);
        let head = shapes.last().unwrap();
        assert_eq!(head.ksize, 1);
        assert_eq!(head.in_channels, 8);
        assert_eq!(head.out_channels, 2);
    }

    #[test]
    fn cast_rounds_through_f64() {
        let config = UNetConfig {
            input_channels: 1,
            output_channels: 2,
            depth: 1,
            base_width: 2,
            image_side: 4,
        };
        let p64: ParamSet<f64> = init_unet(&config, 5).unwrap();
        let p32: ParamSet<f32> = init_unet(&config, 5).unwrap();
        assert_eq!(p64.cast::<f32>(), p32);
    }
}
