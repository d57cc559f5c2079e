use crate::error::{Error, Result};

use super::layers::LinearLayerState;

const GAMMA_MIN: f64 = 1e-3;

/// Momentum SGD: `v = mu * v + g; w -= lr * v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    /// One velocity buffer per parametric layer.
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one update to every layer that holds a gradient. The clipping
    /// ratio of learned-gamma layers takes a plain gradient step clamped to
    /// `[1e-3, 1]`.
    pub fn step(
        &mut self,
        layers: &mut [&mut LinearLayerState],
        lr: f64,
        gamma_lr: f64,
    ) -> Result<()> {
        if self.velocity.len() != layers.len() {
            self.velocity = layers.iter().map(|l| vec![0.0; l.weight.len()]).collect();
        }
        for (layer, v) in layers.iter_mut().zip(self.velocity.iter_mut()) {
            let Some(grad) = layer.weight.grad.take() else {
                continue;
            };
            if v.len() != grad.len() {
                return Err(Error::Protocol(format!(
                    "momentum buffer of {} for {} weights",
                    v.len(),
                    grad.len()
                )));
            }
            for ((w, vi), g) in layer.weight.data.iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = self.momentum * *vi + g;
                *w -= lr * *vi;
            }
            if layer.learned_gamma {
                let g = (layer.gamma.gamma() - gamma_lr * layer.gamma_grad).clamp(GAMMA_MIN, 1.0);
                layer.gamma = crate::quantizer::ClipParam::new(g)?;
                layer.gamma_grad = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::LayerBits;
    use crate::potnum::BitWidth;
    use crate::quantizer::ClipParam;

    #[test]
    fn momentum_accumulates() {
        let mut layer = LinearLayerState::new(2, 1, LayerBits::uniform(BitWidth::B5), ClipParam::IDENTITY);
        let mut opt = Sgd::new(0.5);
        for _ in 0..2 {
            layer.weight.set_grad(vec![1.0, -2.0]).unwrap();
            opt.step(&mut [&mut layer], 0.1, 0.0).unwrap();
        }
        // v1 = g, v2 = 1.5 g; w = -0.1 * 2.5 g
        assert!((layer.weight.data[0] + 0.25).abs() < 1e-15);
        assert!((layer.weight.data[1] - 0.5).abs() < 1e-15);
        assert!(layer.weight.grad.is_none());
    }

    #[test]
    fn learned_gamma_is_clamped() {
        let mut layer = LinearLayerState::new(1, 1, LayerBits::uniform(BitWidth::B5), ClipParam::IDENTITY);
        layer.learned_gamma = true;
        layer.gamma_grad = -5.0;
        layer.weight.set_grad(vec![0.0]).unwrap();
        Sgd::new(0.9).step(&mut [&mut layer], 0.1, 1.0).unwrap();
        assert_eq!(layer.gamma.gamma(), 1.0);
        layer.gamma_grad = 50.0;
        layer.weight.set_grad(vec![0.0]).unwrap();
        Sgd::new(0.9).step(&mut [&mut layer], 0.1, 1.0).unwrap();
        assert_eq!(layer.gamma.gamma(), GAMMA_MIN);
    }
}
