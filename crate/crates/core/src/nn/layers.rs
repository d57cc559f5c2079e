//! Layers of the training engine. Linear and convolution layers run the
//! multiplication-free path; ReLU, flatten and the loss stay in full precision.

use crate::error::{Error, Result};
use crate::mfmac::MacEngine;
use crate::quantizer::{
    self, ClipMask, ClipParam, QuantBlock, QuantStats, Scaling,
};

use super::config::{Ablation, LayerBits, Precision};
use super::tensor::{transpose, Tensor};

/// Zero-sentinel statistics per tensor class over some number of passes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TensorStats {
    pub weights: QuantStats,
    pub activations: QuantStats,
    pub gradients: QuantStats,
}

impl std::ops::AddAssign for TensorStats {
    fn add_assign(&mut self, rhs: Self) {
        self.weights += rhs.weights;
        self.activations += rhs.activations;
        self.gradients += rhs.gradients;
    }
}

/// Everything a layer needs to know about the current pass.
pub struct PassContext<'a> {
    pub engine: &'a MacEngine,
    pub precision: Precision,
    pub ablation: Ablation,
    pub mask_clipped_gradients: bool,
    pub step: u64,
    pub layer: usize,
    pub stats: TensorStats,
}

impl<'a> PassContext<'a> {
    pub fn new(engine: &'a MacEngine, precision: Precision) -> Self {
        PassContext {
            engine,
            precision,
            ablation: Ablation::default(),
            mask_clipped_gradients: true,
            step: 0,
            layer: 0,
            stats: TensorStats::default(),
        }
    }

    fn scaling(&self) -> Scaling {
        if self.ablation.no_als_scaling {
            Scaling::Fixed(0)
        } else {
            Scaling::Adaptive
        }
    }

    fn fault(&self, detail: impl Into<String>) -> Error {
        Error::TrainingFault {
            step: self.step,
            layer: self.layer,
            detail: detail.into(),
        }
    }
}

fn ensure_finite(values: &[f64], what: &str, ctx: &PassContext<'_>) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ctx.fault(format!("non-finite {what} at element {i}"))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug)]
enum LinearCache {
    Quantized {
        wq: QuantBlock,
        aq: QuantBlock,
        mask: ClipMask,
    },
    Full {
        input: Vec<f64>,
    },
}

/// A fully connected layer `y = A W^T` with full-precision master weights
/// `W` of shape `[outputs, inputs]`.
#[derive(Clone, Debug)]
pub struct LinearLayerState {
    pub weight: Tensor,
    pub gamma: ClipParam,
    pub learned_gamma: bool,
    pub bits: LayerBits,
    /// dL/dgamma from the last backward pass (learned-gamma mode).
    pub gamma_grad: f64,
    cache: Option<LinearCache>,
}

impl LinearLayerState {
    pub fn new(inputs: usize, outputs: usize, bits: LayerBits, gamma: ClipParam) -> Self {
        LinearLayerState {
            weight: Tensor::zeros(vec![outputs, inputs]),
            gamma,
            learned_gamma: false,
            bits,
            gamma_grad: 0.0,
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Quantized weights cached by the last forward pass.
    pub fn cached_weights(&self) -> Option<&QuantBlock> {
        match &self.cache {
            Some(LinearCache::Quantized { wq, .. }) => Some(wq),
            _ => None,
        }
    }

    pub fn cached_clip_mask(&self) -> Option<&ClipMask> {
        match &self.cache {
            Some(LinearCache::Quantized { mask, .. }) => Some(mask),
            _ => None,
        }
    }

    /// The weight block the quantized forward pass would use right now.
    pub fn quantize_weights(&self, engine: &MacEngine, ablation: Ablation) -> Result<QuantBlock> {
        let corrected;
        let source = if ablation.no_wbc {
            &self.weight.data
        } else {
            corrected = quantizer::weight_bias_correction(&self.weight.data)?;
            &corrected
        };
        let scaling = if ablation.no_als_scaling {
            Scaling::Fixed(0)
        } else {
            Scaling::Adaptive
        };
        engine
            .quantize(source, &self.weight.shape, self.bits.weights, scaling)
            .map(|(block, _)| block)
    }

    /// Forward over `rows` input rows of length `inputs()`.
    pub fn forward(&mut self, input: &[f64], rows: usize, ctx: &mut PassContext<'_>) -> Result<Vec<f64>> {
        let (k, n) = (self.inputs(), self.outputs());
        if input.len() != rows * k {
            return Err(Error::shape("linear input", &[rows, k], &[input.len()]));
        }
        ensure_finite(input, "activation", ctx)?;
        match ctx.precision {
            Precision::Full => {
                let out = ctx.engine.fp_matmul_nt(input, &self.weight.data, rows, k, n)?;
                self.cache = Some(LinearCache::Full {
                    input: input.to_vec(),
                });
                Ok(out)
            }
            Precision::Quantized => {
                let scaling = ctx.scaling();
                let corrected;
                let w_source = if ctx.ablation.no_wbc {
                    &self.weight.data
                } else {
                    corrected = quantizer::weight_bias_correction(&self.weight.data)?;
                    ctx.engine.record(crate::mfmac::OpCensus {
                        scalar_ops: 1,
                        ..Default::default()
                    });
                    &corrected
                };
                let (wq, wstats) =
                    ctx.engine
                        .quantize(w_source, &self.weight.shape, self.bits.weights, scaling)?;
                let (clipped, mask) = if ctx.ablation.no_prc {
                    (input.to_vec(), ClipMask::none(input.len(), 0.0))
                } else {
                    quantizer::ratio_clip(input, self.gamma)?
                };
                let (aq, astats) =
                    ctx.engine
                        .quantize(&clipped, &[rows, k], self.bits.activations, scaling)?;
                let out = ctx.engine.matmul_nt(&aq, &wq)?;
                ctx.stats.weights += wstats;
                ctx.stats.activations += astats;
                self.cache = Some(LinearCache::Quantized { wq, aq, mask });
                Ok(out)
            }
        }
    }

    /// Consumes the forward cache; stores dW in `weight.grad` and returns the
    /// gradient with respect to the layer input.
    pub fn backward(&mut self, grad_out: &[f64], rows: usize, ctx: &mut PassContext<'_>) -> Result<Vec<f64>> {
        let (k, n) = (self.inputs(), self.outputs());
        if grad_out.len() != rows * n {
            return Err(Error::shape("linear output gradient", &[rows, n], &[grad_out.len()]));
        }
        ensure_finite(grad_out, "gradient", ctx)?;
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Protocol("backward called without a cached forward pass".into()))?;
        let (grad_in, grad_w) = match cache {
            LinearCache::Full { input } => {
                let w_t = transpose(&self.weight.data, n, k);
                let grad_in = ctx.engine.fp_matmul_nt(grad_out, &w_t, rows, n, k)?;
                let g_t = transpose(grad_out, rows, n);
                let a_t = transpose(&input, rows, k);
                let grad_w = ctx.engine.fp_matmul_nt(&g_t, &a_t, n, rows, k)?;
                (grad_in, grad_w)
            }
            LinearCache::Quantized { wq, aq, mask } => {
                if aq.shape() != [rows, k] {
                    return Err(Error::Protocol(format!(
                        "cached activations have shape {:?}, gradient has {rows} rows",
                        aq.shape()
                    )));
                }
                let (gq, gstats) =
                    ctx.engine
                        .quantize(grad_out, &[rows, n], self.bits.gradients, ctx.scaling())?;
                ctx.stats.gradients += gstats;
                let mut grad_in = ctx.engine.matmul_nt(&gq, &wq.transpose()?)?;
                let grad_w = ctx.engine.matmul_nt(&gq.transpose()?, &aq.transpose()?)?;
                if self.learned_gamma && mask.clipped_count() > 0 {
                    // Each clipped element moves with +-max|A| * gamma.
                    let sum: f64 = mask
                        .as_slice()
                        .iter()
                        .enumerate()
                        .filter(|(_, c)| **c)
                        .map(|(i, _)| if aq.signs()[i] { -grad_in[i] } else { grad_in[i] })
                        .sum();
                    self.gamma_grad = sum * mask.max_abs();
                } else {
                    self.gamma_grad = 0.0;
                }
                if ctx.mask_clipped_gradients {
                    for (g, clipped) in grad_in.iter_mut().zip(mask.as_slice()) {
                        if *clipped {
                            *g = 0.0;
                        }
                    }
                }
                (grad_in, grad_w)
            }
        };
        ensure_finite(&grad_w, "weight gradient", ctx)?;
        self.weight.set_grad(grad_w)?;
        Ok(grad_in)
    }
}

/// 2-D convolution lowered to a [`LinearLayerState`] over image patches.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub core: LinearLayerState,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    batch: Option<usize>,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bits: LayerBits,
        gamma: ClipParam,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("convolution kernel and stride must be positive".into()));
        }
        if in_h + 2 * padding < kernel || in_w + 2 * padding < kernel {
            return Err(Error::Config(format!(
                "kernel {kernel} larger than padded input {in_h}x{in_w}"
            )));
        }
        Ok(Conv2dLayer {
            core: LinearLayerState::new(in_channels * kernel * kernel, out_channels, bits, gamma),
            in_channels,
            in_h,
            in_w,
            kernel,
            stride,
            padding,
            batch: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.core.outputs()
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// `[B, C, H, W]` to patch rows `[B * OH * OW, C * K * K]`.
    pub fn im2col(&self, input: &[f64], batch: usize) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let k = self.kernel;
        let cols = self.in_channels * k * k;
        let mut out = vec![0.0; batch * oh * ow * cols];
        let (h, w, p) = (self.in_h as isize, self.in_w as isize, self.padding as isize);
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * cols;
                    for c in 0..self.in_channels {
                        for ky in 0..k {
                            let y = (oy * self.stride + ky) as isize - p;
                            for kx in 0..k {
                                let x = (ox * self.stride + kx) as isize - p;
                                if y >= 0 && y < h && x >= 0 && x < w {
                                    let src = ((b * self.in_channels + c) * self.in_h + y as usize)
                                        * self.in_w
                                        + x as usize;
                                    out[row + (c * k + ky) * k + kx] = input[src];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds patch gradients.
    pub fn col2im(&self, patches: &[f64], batch: usize) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let k = self.kernel;
        let cols = self.in_channels * k * k;
        let mut out = vec![0.0; batch * self.in_channels * self.in_h * self.in_w];
        let (h, w, p) = (self.in_h as isize, self.in_w as isize, self.padding as isize);
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * cols;
                    for c in 0..self.in_channels {
                        for ky in 0..k {
                            let y = (oy * self.stride + ky) as isize - p;
                            for kx in 0..k {
                                let x = (ox * self.stride + kx) as isize - p;
                                if y >= 0 && y < h && x >= 0 && x < w {
                                    let dst = ((b * self.in_channels + c) * self.in_h + y as usize)
                                        * self.in_w
                                        + x as usize;
                                    out[dst] += patches[row + (c * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&mut self, input: &Tensor, ctx: &mut PassContext<'_>) -> Result<Tensor> {
        let expected = [self.in_channels, self.in_h, self.in_w];
        if input.shape.len() != 4 || input.shape[1..] != expected {
            return Err(Error::shape("conv2d input", &expected, &input.shape));
        }
        let batch = input.rows();
        let (oh, ow) = self.out_hw();
        let positions = oh * ow;
        let patches = self.im2col(&input.data, batch);
        let lowered = self.core.forward(&patches, batch * positions, ctx)?;
        let oc = self.out_channels();
        let mut out = vec![0.0; lowered.len()];
        for b in 0..batch {
            for p in 0..positions {
                for c in 0..oc {
                    out[(b * oc + c) * positions + p] = lowered[(b * positions + p) * oc + c];
                }
            }
        }
        self.batch = Some(batch);
        Tensor::new(out, vec![batch, oc, oh, ow])
    }

    pub fn backward(&mut self, grad: &Tensor, ctx: &mut PassContext<'_>) -> Result<Tensor> {
        let batch = self
            .batch
            .take()
            .ok_or_else(|| Error::Protocol("conv2d backward without forward".into()))?;
        let (oh, ow) = self.out_hw();
        let positions = oh * ow;
        let oc = self.out_channels();
        if grad.len() != batch * oc * positions {
            return Err(Error::shape("conv2d output gradient", &[batch, oc, oh, ow], &grad.shape));
        }
        let mut lowered = vec![0.0; grad.len()];
        for b in 0..batch {
            for p in 0..positions {
                for c in 0..oc {
                    lowered[(b * positions + p) * oc + c] = grad.data[(b * oc + c) * positions + p];
                }
            }
        }
        let grad_patches = self.core.backward(&lowered, batch * positions, ctx)?;
        Tensor::new(
            self.col2im(&grad_patches, batch),
            vec![batch, self.in_channels, self.in_h, self.in_w],
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct ReluLayer {
    active: Option<Vec<bool>>,
}

impl ReluLayer {
    pub fn forward(&mut self, mut input: Tensor) -> Tensor {
        let active: Vec<bool> = input.data.iter().map(|v| *v > 0.0).collect();
        for (v, on) in input.data.iter_mut().zip(&active) {
            if !on {
                *v = 0.0;
            }
        }
        self.active = Some(active);
        input
    }

    pub fn backward(&mut self, mut grad: Tensor) -> Result<Tensor> {
        let active = self
            .active
            .take()
            .ok_or_else(|| Error::Protocol("relu backward without forward".into()))?;
        if active.len() != grad.len() {
            return Err(Error::Protocol("relu gradient size changed since forward".into()));
        }
        for (g, on) in grad.data.iter_mut().zip(active) {
            if !on {
                *g = 0.0;
            }
        }
        Ok(grad)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FlattenLayer {
    input_shape: Option<Vec<usize>>,
}

impl FlattenLayer {
    pub fn forward(&mut self, mut input: Tensor) -> Tensor {
        let rows = input.rows();
        let len = input.row_len();
        self.input_shape = Some(std::mem::replace(&mut input.shape, vec![rows, len]));
        input
    }

    pub fn backward(&mut self, mut grad: Tensor) -> Result<Tensor> {
        grad.shape = self
            .input_shape
            .take()
            .ok_or_else(|| Error::Protocol("flatten backward without forward".into()))?;
        Ok(grad)
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Linear(LinearLayerState),
    Conv2d(Conv2dLayer),
    Relu(ReluLayer),
    Flatten(FlattenLayer),
}

impl Layer {
    pub fn forward(&mut self, input: Tensor, ctx: &mut PassContext<'_>) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => {
                let rows = input.rows();
                let out = l.forward(&input.data, rows, ctx)?;
                Tensor::new(out, vec![rows, l.outputs()])
            }
            Layer::Conv2d(c) => c.forward(&input, ctx),
            Layer::Relu(r) => Ok(r.forward(input)),
            Layer::Flatten(f) => Ok(f.forward(input)),
        }
    }

    pub fn backward(&mut self, grad: Tensor, ctx: &mut PassContext<'_>) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => {
                let rows = grad.rows();
                let out = l.backward(&grad.data, rows, ctx)?;
                Tensor::new(out, vec![rows, l.inputs()])
            }
            Layer::Conv2d(c) => c.backward(&grad, ctx),
            Layer::Relu(r) => r.backward(grad),
            Layer::Flatten(f) => f.backward(grad),
        }
    }

    /// The parametric core of linear and convolution layers.
    pub fn params(&self) -> Option<&LinearLayerState> {
        match self {
            Layer::Linear(l) => Some(l),
            Layer::Conv2d(c) => Some(&c.core),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut LinearLayerState> {
        match self {
            Layer::Linear(l) => Some(l),
            Layer::Conv2d(c) => Some(&mut c.core),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfmac::{reference_matmul, AccumulatorMode};
    use crate::potnum::BitWidth;

    fn layer(w: Vec<f64>, out: usize, inp: usize) -> LinearLayerState {
        let mut l = LinearLayerState::new(inp, out, LayerBits::uniform(BitWidth::B5), ClipParam::IDENTITY);
        l.weight.data = w;
        l
    }

    #[test]
    fn single_weight_degenerates_under_wbc() {
        let engine = MacEngine::new(AccumulatorMode::Wide);
        let mut ctx = PassContext::new(&engine, Precision::Quantized);
        let mut l = layer(vec![2.0], 1, 1);
        assert_eq!(l.forward(&[3.0], 1, &mut ctx).unwrap(), vec![0.0]);
    }

    #[test]
    fn zero_mean_pot_weights_match_exact_matmul() {
        let engine = MacEngine::default();
        let mut ctx = PassContext::new(&engine, Precision::Quantized);
        let w = vec![1.0, -2.0, 2.0, -1.0];
        let a = vec![0.5, 4.0, -1.0, 2.0];
        let mut l = layer(w.clone(), 2, 2);
        let out = l.forward(&a, 2, &mut ctx).unwrap();
        let w_t = transpose(&w, 2, 2);
        assert_eq!(out, reference_matmul(&a, &w_t, 2, 2, 2).unwrap());
        // Second forward on the same state is identical.
        let cached = l.cached_weights().unwrap().clone();
        assert_eq!(l.forward(&a, 2, &mut ctx).unwrap(), out);
        assert_eq!(l.cached_weights().unwrap(), &cached);
    }

    #[test]
    fn backward_requires_forward() {
        let engine = MacEngine::default();
        let mut ctx = PassContext::new(&engine, Precision::Quantized);
        let mut l = layer(vec![1.0, -1.0], 1, 2);
        assert!(matches!(l.backward(&[1.0], 1, &mut ctx), Err(Error::Protocol(_))));
        l.forward(&[1.0, 2.0], 1, &mut ctx).unwrap();
        l.backward(&[1.0], 1, &mut ctx).unwrap();
        assert!(!l.has_cache());
        assert!(l.backward(&[1.0], 1, &mut ctx).is_err());
    }

    #[test]
    fn zero_gradient_gives_zero_updates() {
        let engine = MacEngine::default();
        let mut ctx = PassContext::new(&engine, Precision::Quantized);
        let mut l = layer(vec![0.5, -0.25, 1.0, -2.0, 0.75, 0.1], 2, 3);
        l.forward(&[1.0, 2.0, 3.0, -1.0, 0.0, 0.5], 2, &mut ctx).unwrap();
        let g_in = l.backward(&[0.0; 4], 2, &mut ctx).unwrap();
        assert!(g_in.iter().all(|g| *g == 0.0));
        assert!(l.weight.grad.as_ref().unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn clipped_inputs_block_gradient() {
        let engine = MacEngine::default();
        let mut ctx = PassContext::new(&engine, Precision::Quantized);
        let mut l = layer(vec![1.0, -1.0, 0.5, -0.5], 1, 4);
        l.gamma = ClipParam::new(1e-6).unwrap();
        l.forward(&[1.0, -2.0, 3.0, -4.0], 1, &mut ctx).unwrap();
        let g_in = l.backward(&[1.0], 1, &mut ctx).unwrap();
        assert_eq!(g_in, vec![0.0; 4]);
    }

    #[test]
    fn non_finite_input_faults_with_layer_index() {
        let engine = MacEngine::default();
        let mut ctx = PassContext::new(&engine, Precision::Quantized);
        ctx.layer = 3;
        ctx.step = 7;
        let mut l = layer(vec![1.0, -1.0], 1, 2);
        match l.forward(&[f64::NAN, 1.0], 1, &mut ctx) {
            Err(Error::TrainingFault { step: 7, layer: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let conv = Conv2dLayer::new(2, 5, 4, 3, 3, 2, 1, LayerBits::uniform(BitWidth::B5), ClipParam::IDENTITY)
            .unwrap();
        let batch = 2;
        let n_in = batch * 2 * 5 * 4;
        let x: Vec<f64> = (0..n_in).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let cols = conv.im2col(&x, batch);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 5 % 13) as f64) - 6.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = conv.col2im(&y, batch);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
