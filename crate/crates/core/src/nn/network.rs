use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::quantizer::ClipParam;

use super::config::{InitKind, LayerBits, LayerSpec, LossKind, NetworkSpec};
use super::layers::{Conv2dLayer, FlattenLayer, Layer, LinearLayerState, PassContext, ReluLayer};
use super::tensor::Tensor;

/// A feed-forward stack of layers plus its loss head.
#[derive(Clone, Debug)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_shape: Vec<usize>,
    pub loss: LossKind,
}

impl Network {
    /// Builds the layer stack with zero weights; see [`init_weights`].
    pub fn from_spec(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let default_gamma = ClipParam::new(spec.gamma)?;
        let last_param = spec
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. }));
        let mut shape = spec.input_shape.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let is_last = Some(i) == last_param;
            let built = match layer {
                LayerSpec::Linear {
                    outputs,
                    bits,
                    gamma,
                } => {
                    let [inputs] = shape[..] else {
                        return Err(Error::Config(format!(
                            "layer {i}: linear layer needs a flat input, got {shape:?} (add a flatten layer)"
                        )));
                    };
                    if *outputs == 0 {
                        return Err(Error::Config(format!("layer {i}: zero outputs")));
                    }
                    let bits = LayerBits::resolve(&spec.bits, bits.as_ref(), is_last)?;
                    let gamma = gamma.map(ClipParam::new).transpose()?.unwrap_or(default_gamma);
                    let mut state = LinearLayerState::new(inputs, *outputs, bits, gamma);
                    state.learned_gamma = spec.learned_gamma;
                    shape = vec![*outputs];
                    Layer::Linear(state)
                }
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    bits,
                    gamma,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::Config(format!(
                            "layer {i}: conv2d needs a [channels, height, width] input, got {shape:?}"
                        )));
                    };
                    let bits = LayerBits::resolve(&spec.bits, bits.as_ref(), is_last)?;
                    let gamma = gamma.map(ClipParam::new).transpose()?.unwrap_or(default_gamma);
                    let mut conv = Conv2dLayer::new(
                        c,
                        h,
                        w,
                        *out_channels,
                        *kernel,
                        *stride,
                        *padding,
                        bits,
                        gamma,
                    )
                    .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                    conv.core.learned_gamma = spec.learned_gamma;
                    let (oh, ow) = conv.out_hw();
                    shape = vec![*out_channels, oh, ow];
                    Layer::Conv2d(conv)
                }
                LayerSpec::Relu => Layer::Relu(ReluLayer::default()),
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten(FlattenLayer::default())
                }
            };
            layers.push(built);
        }
        if shape.len() != 1 {
            return Err(Error::Config(format!(
                "network output must be flat, got {shape:?}"
            )));
        }
        Ok(Network {
            layers,
            input_shape: spec.input_shape.clone(),
            loss: spec.loss,
        })
    }

    pub fn output_size(&self) -> usize {
        self.params().last().map(|p| p.outputs()).unwrap_or(0)
    }

    /// Forward-pass MACs for one sample.
    pub fn fw_macs_per_sample(&self) -> usize {
        self.layers
            .iter()
            .map(|layer| match layer {
                Layer::Linear(p) => p.inputs() * p.outputs(),
                Layer::Conv2d(c) => {
                    let (oh, ow) = c.out_hw();
                    oh * ow * c.core.inputs() * c.core.outputs()
                }
                Layer::Relu(_) | Layer::Flatten(_) => 0,
            })
            .sum()
    }

    pub fn params(&self) -> Vec<&LinearLayerState> {
        self.layers.iter().filter_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut LinearLayerState> {
        self.layers.iter_mut().filter_map(Layer::params_mut).collect()
    }

    pub fn forward(&mut self, mut x: Tensor, ctx: &mut PassContext<'_>) -> Result<Tensor> {
        if x.shape.len() != self.input_shape.len() + 1 || x.shape[1..] != self.input_shape[..] {
            return Err(Error::shape("network input", &self.input_shape, &x.shape[1.min(x.shape.len())..]));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            ctx.layer = i;
            x = layer.forward(x, ctx)?;
            if let Some(bad) = x.first_non_finite() {
                return Err(Error::TrainingFault {
                    step: ctx.step,
                    layer: i,
                    detail: format!("non-finite output at element {bad}"),
                });
            }
        }
        Ok(x)
    }

    pub fn backward(&mut self, mut grad: Tensor, ctx: &mut PassContext<'_>) -> Result<()> {
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            ctx.layer = i;
            grad = layer.backward(grad, ctx)?;
        }
        Ok(())
    }

    pub fn clear_caches(&mut self) {
        for p in self.params_mut() {
            p.clear_cache();
        }
    }
}

/// Fan-in scaled normal initialization, `sigma = sqrt(2 / fan_in)`.
pub fn init_weights<R: Rng + ?Sized>(net: &mut Network, kind: InitKind, rng: &mut R) {
    for layer in net.params_mut() {
        let sigma = (2.0 / layer.inputs() as f64).sqrt();
        for w in layer.weight.data.iter_mut() {
            *w = sigma * sample_normal(kind, rng);
        }
    }
}

fn sample_normal<R: Rng + ?Sized>(kind: InitKind, rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        match kind {
            InitKind::UntruncatedNormal => return z,
            InitKind::TruncatedNormal if z.abs() <= 2.0 => return z,
            InitKind::TruncatedNormal => continue,
        }
    }
}

/// Loss value, gradient with respect to the network output, and the number
/// of correctly classified rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Tensor,
    pub correct: usize,
}

/// Softmax cross-entropy averaged over the batch.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    let (rows, classes) = (logits.rows(), logits.row_len());
    if labels.len() != rows {
        return Err(Error::Input(format!(
            "{} labels for a batch of {rows}",
            labels.len()
        )));
    }
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut correct = 0;
    let inv_rows = 1.0 / rows as f64;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Input(format!("label {label} >= {classes} classes")));
        }
        let z = &logits.data[r * classes..(r + 1) * classes];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += log_sum - z[label];
        let predicted = z
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > z[best] { i } else { best });
        if predicted == label {
            correct += 1;
        }
        let g = &mut grad[r * classes..(r + 1) * classes];
        for (gi, zi) in g.iter_mut().zip(z) {
            *gi = (zi - log_sum).exp() * inv_rows;
        }
        g[label] -= inv_rows;
    }
    Ok(LossOutput {
        loss: loss * inv_rows,
        grad: Tensor::new(grad, logits.shape.clone())?,
        correct,
    })
}

/// `0.5 * ||y - t||^2` averaged over the batch; `correct` counts rows whose
/// argmax matches the target's.
pub fn mse(outputs: &Tensor, targets: &[f64]) -> Result<LossOutput> {
    if targets.len() != outputs.len() {
        return Err(Error::Input(format!(
            "{} targets for {} outputs",
            targets.len(),
            outputs.len()
        )));
    }
    let rows = outputs.rows().max(1);
    let inv_rows = 1.0 / rows as f64;
    let diff: Vec<f64> = outputs.data.iter().zip(targets).map(|(y, t)| y - t).collect();
    let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>() * inv_rows;
    let width = outputs.row_len().max(1);
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
    };
    let correct = outputs
        .data
        .chunks(width)
        .zip(targets.chunks(width))
        .filter(|(y, t)| argmax(y) == argmax(t))
        .count();
    Ok(LossOutput {
        loss,
        grad: Tensor::new(diff.iter().map(|d| d * inv_rows).collect(), outputs.shape.clone())?,
        correct,
    })
}
