use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfmac::AccumulatorMode;
use crate::potnum::BitWidth;
use crate::quantizer::ClipParam;

/// One entry of a network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        outputs: usize,
        #[serde(default)]
        bits: Option<BitOverride>,
        #[serde(default)]
        gamma: Option<f64>,
    },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bits: Option<BitOverride>,
        #[serde(default)]
        gamma: Option<f64>,
    },
    Relu,
    Flatten,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitOverride {
    pub weights: Option<u8>,
    pub activations: Option<u8>,
    pub gradients: Option<u8>,
}

/// Network-wide PoT bit-widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BitConfig {
    pub weights: u8,
    pub activations: u8,
    pub gradients: u8,
    /// Gradient width for the last parametric layer.
    pub last_layer_gradients: u8,
}

impl Default for BitConfig {
    fn default() -> Self {
        BitConfig {
            weights: 5,
            activations: 5,
            gradients: 5,
            last_layer_gradients: 6,
        }
    }
}

/// Resolved bit-widths for one layer's W, A and G tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerBits {
    pub weights: BitWidth,
    pub activations: BitWidth,
    pub gradients: BitWidth,
}

impl LayerBits {
    pub fn uniform(bits: BitWidth) -> Self {
        LayerBits {
            weights: bits,
            activations: bits,
            gradients: bits,
        }
    }

    pub(crate) fn resolve(
        base: &BitConfig,
        over: Option<&BitOverride>,
        last_layer: bool,
    ) -> Result<Self> {
        let over = over.copied().unwrap_or_default();
        let g_default = if last_layer {
            base.last_layer_gradients
        } else {
            base.gradients
        };
        Ok(LayerBits {
            weights: BitWidth::new(over.weights.unwrap_or(base.weights))?,
            activations: BitWidth::new(over.activations.unwrap_or(base.activations))?,
            gradients: BitWidth::new(over.gradients.unwrap_or(g_default))?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SoftmaxCrossEntropy,
    /// `0.5 * sum (y - t)^2`, averaged over the batch.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Shape of one sample, without the batch dimension.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub bits: BitConfig,
    /// Default clipping ratio for every parametric layer.
    #[serde(default = "unit_gamma")]
    pub gamma: f64,
    /// Train the clipping ratios alongside the weights.
    #[serde(default)]
    pub learned_gamma: bool,
}

fn unit_gamma() -> f64 {
    1.0
}

impl NetworkSpec {
    /// A plain fully connected stack with ReLU between layers.
    pub fn mlp(sizes: &[usize]) -> Self {
        let mut layers = Vec::new();
        for (i, &out) in sizes.iter().enumerate().skip(1) {
            if i > 1 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Linear {
                outputs: out,
                bits: None,
                gamma: None,
            });
        }
        NetworkSpec {
            input_shape: vec![sizes[0]],
            layers,
            loss: LossKind::default(),
            bits: BitConfig::default(),
            gamma: 1.0,
            learned_gamma: false,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        ClipParam::new(self.gamma)?;
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "input shape {:?} must be non-empty with positive dimensions",
                self.input_shape
            )));
        }
        if !self
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. }))
        {
            return Err(Error::Config("network has no parametric layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    UntruncatedNormal,
    /// Normal resampled until within two standard deviations.
    TruncatedNormal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// PoT-quantized multiplication-free linear layers.
    #[default]
    Quantized,
    /// Full-precision baseline: no quantization, bias correction or clipping.
    Full,
}

/// Switches that remove one technique from the quantized path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Quantize with a fixed scale exponent of 0 instead of the layer-wise one.
    pub no_als_scaling: bool,
    pub no_wbc: bool,
    pub no_prc: bool,
}

impl Ablation {
    pub fn apply(&mut self, name: &str) -> Result<()> {
        match name {
            "no_als_scaling" => self.no_als_scaling = true,
            "no_wbc" => self.no_wbc = true,
            "no_prc" => self.no_prc = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (expected no_als_scaling, no_wbc or no_prc)"
                )))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs (0-based) at whose start the learning rate is decayed.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub seed: u64,
    pub accumulator: AccumulatorMode,
    pub precision: Precision,
    pub ablation: Ablation,
    pub init: InitKind,
    /// Zero the input gradient where ratio clipping was active.
    pub mask_clipped_gradients: bool,
    pub gamma_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 256,
            learning_rate: 0.1,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            momentum: 0.9,
            seed: 0,
            accumulator: AccumulatorMode::Wide,
            precision: Precision::Quantized,
            ablation: Ablation::default(),
            init: InitKind::UntruncatedNormal,
            mask_clipped_gradients: true,
            gamma_learning_rate: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("learning-rate decay factor must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        (0..decays).fold(self.learning_rate, |lr, _| lr * self.lr_decay_factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_steps() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            lr_decay_epochs: vec![2, 4],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 0.1);
        assert_eq!(cfg.learning_rate_at(2), 0.1 * 0.1);
        assert_eq!(cfg.learning_rate_at(9), 0.1 * 0.1 * 0.1);
    }

    #[test]
    fn rejects_bad_train_config() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut ab = Ablation::default();
        assert!(ab.apply("no_wbc").is_ok());
        assert!(ab.no_wbc);
        assert!(ab.apply("no_such").is_err());
    }

    #[test]
    fn layer_bits_resolution() {
        let base = BitConfig::default();
        let last = LayerBits::resolve(&base, None, true).unwrap();
        assert_eq!(last.gradients, BitWidth::B6);
        let over = BitOverride {
            weights: Some(4),
            ..BitOverride::default()
        };
        let inner = LayerBits::resolve(&base, Some(&over), false).unwrap();
        assert_eq!((inner.weights, inner.gradients), (BitWidth::B4, BitWidth::B5));
        let bad = BitOverride {
            activations: Some(9),
            ..BitOverride::default()
        };
        assert!(LayerBits::resolve(&base, Some(&bad), false).is_err());
    }
}
