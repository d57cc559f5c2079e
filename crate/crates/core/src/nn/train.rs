use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfmac::{MacEngine, OpCensus};
use crate::quantizer::ClipParam;

use super::config::{LossKind, NetworkSpec, TrainConfig};
use super::data::Dataset;
use super::layers::{PassContext, TensorStats};
use super::network::{init_weights, mse, softmax_cross_entropy, LossOutput, Network};
use super::optim::Sgd;
use super::tensor::Tensor;

/// Supervision for one batch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    /// Row-major regression targets, one row per sample.
    Values(&'a [f64]),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub correct: usize,
    pub rows: usize,
    pub saturations: u64,
    /// Operations performed by this step alone.
    pub census: OpCensus,
    pub stats: TensorStats,
}

impl StepMetrics {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.rows.max(1) as f64
    }
}

/// One row of the per-epoch metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub saturations: u64,
    pub weight_zero_fraction: f64,
    pub activation_zero_fraction: f64,
    pub gradient_zero_fraction: f64,
    pub mean_gamma: f64,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub step: u64,
    pub epoch: usize,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub weights: Vec<Vec<f64>>,
    pub gammas: Vec<f64>,
    pub velocity: Vec<Vec<f64>>,
    pub census: OpCensus,
}

pub struct Trainer {
    pub net: Network,
    pub config: TrainConfig,
    engine: MacEngine,
    rng: ChaCha8Rng,
    optimizer: Sgd,
    step: u64,
    epoch: usize,
    train_census: OpCensus,
}

impl Trainer {
    /// Builds and initializes a network from a seeded generator.
    pub fn new(spec: &NetworkSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut net = Network::from_spec(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_weights(&mut net, config.init, &mut rng);
        let engine = MacEngine::new(config.accumulator);
        Ok(Trainer {
            net,
            optimizer: Sgd::new(config.momentum),
            config,
            engine,
            rng,
            step: 0,
            epoch: 0,
            train_census: OpCensus::default(),
        })
    }

    pub fn engine(&self) -> &MacEngine {
        &self.engine
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Operations spent in training steps, excluding evaluation.
    pub fn train_census(&self) -> OpCensus {
        self.train_census
    }

    fn loss(net: &Network, out: &Tensor, targets: Targets<'_>) -> Result<LossOutput> {
        match (net.loss, targets) {
            (LossKind::SoftmaxCrossEntropy, Targets::Labels(l)) => softmax_cross_entropy(out, l),
            (LossKind::Mse, Targets::Values(v)) => mse(out, v),
            (LossKind::Mse, Targets::Labels(l)) => mse(out, &one_hot(l, out.row_len())?),
            (LossKind::SoftmaxCrossEntropy, Targets::Values(_)) => Err(Error::Input(
                "cross-entropy loss needs class labels".into(),
            )),
        }
    }

    /// Forward, loss, backward and one momentum-SGD update.
    pub fn train_step(&mut self, inputs: Tensor, targets: Targets<'_>) -> Result<StepMetrics> {
        let before = self.engine.census();
        let lr = self.config.learning_rate_at(self.epoch);
        let mut ctx = PassContext::new(&self.engine, self.config.precision);
        ctx.ablation = self.config.ablation;
        ctx.mask_clipped_gradients = self.config.mask_clipped_gradients;
        ctx.step = self.step;
        let rows = inputs.rows();
        let result = (|| {
            let out = self.net.forward(inputs, &mut ctx)?;
            let loss = Self::loss(&self.net, &out, targets)?;
            if !loss.loss.is_finite() {
                return Err(Error::TrainingFault {
                    step: self.step,
                    layer: self.net.layers.len(),
                    detail: "non-finite loss".into(),
                });
            }
            self.net.backward(loss.grad.clone(), &mut ctx)?;
            Ok(loss)
        })();
        let loss = match result {
            Ok(loss) => loss,
            Err(e) => {
                self.net.clear_caches();
                return Err(e);
            }
        };
        let stats = ctx.stats;
        let mut params = self.net.params_mut();
        self.optimizer
            .step(&mut params, lr, self.config.gamma_learning_rate)?;
        for (i, p) in params.iter().enumerate() {
            if let Some(bad) = p.weight.first_non_finite() {
                return Err(Error::TrainingFault {
                    step: self.step,
                    layer: i,
                    detail: format!("non-finite weight {bad} after update"),
                });
            }
        }
        let census = self.engine.census() - before;
        self.train_census += census;
        let metrics = StepMetrics {
            step: self.step,
            loss: loss.loss,
            correct: loss.correct,
            rows,
            saturations: census.saturations,
            census,
            stats,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Loss and accuracy over a dataset through the same quantized path.
    pub fn evaluate(&mut self, data: &Dataset) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(self.config.batch_size) {
            let (x, labels) = data.batch(chunk)?;
            let mut ctx = PassContext::new(&self.engine, self.config.precision);
            ctx.ablation = self.config.ablation;
            ctx.step = self.step;
            let out = self.net.forward(x, &mut ctx);
            self.net.clear_caches();
            let out = Self::loss(&self.net, &out?, Targets::Labels(&labels))?;
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
        }
        let n = data.len() as f64;
        Ok((loss_sum / n, correct as f64 / n))
    }

    /// One shuffled pass over `train`, then evaluation on `test`.
    pub fn train_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::Dataset("empty training set".into()));
        }
        let lr = self.config.learning_rate_at(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut saturations = 0;
        let mut stats = TensorStats::default();
        for chunk in order.chunks(self.config.batch_size) {
            let (x, labels) = train.batch(chunk)?;
            let m = self.train_step(x, Targets::Labels(&labels))?;
            loss_sum += m.loss * m.rows as f64;
            correct += m.correct;
            saturations += m.saturations;
            stats += m.stats;
        }
        let (test_loss, test_accuracy) = self.evaluate(test)?;
        let params = self.net.params();
        let mean_gamma =
            params.iter().map(|p| p.gamma.gamma()).sum::<f64>() / params.len() as f64;
        let n = train.len() as f64;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            learning_rate: lr,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            test_loss,
            test_accuracy,
            saturations,
            weight_zero_fraction: stats.weights.zero_fraction(),
            activation_zero_fraction: stats.activations.zero_fraction(),
            gradient_zero_fraction: stats.gradients.zero_fraction(),
            mean_gamma,
        };
        self.epoch += 1;
        Ok(metrics)
    }

    /// Runs the remaining configured epochs, reporting each as it finishes.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        mut on_epoch: impl FnMut(&EpochMetrics, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            let m = self.train_epoch(train, test)?;
            on_epoch(&m, self)?;
            all.push(m);
        }
        Ok(all)
    }

    pub fn state(&self) -> TrainerState {
        let params = self.net.params();
        TrainerState {
            step: self.step,
            epoch: self.epoch,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            weights: params.iter().map(|p| p.weight.data.clone()).collect(),
            gammas: params.iter().map(|p| p.gamma.gamma()).collect(),
            velocity: self.optimizer.velocity.clone(),
            census: self.train_census,
        }
    }

    pub fn restore(&mut self, state: &TrainerState) -> Result<()> {
        let mut params = self.net.params_mut();
        if state.weights.len() != params.len() || state.gammas.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} layers, network has {}",
                state.weights.len(),
                params.len()
            )));
        }
        if !state.velocity.is_empty() && state.velocity.len() != params.len() {
            return Err(Error::Checkpoint("momentum buffers do not match layers".into()));
        }
        for (i, p) in params.iter().enumerate() {
            let expect = p.weight.len();
            let bad = state.weights[i].len() != expect
                || state.velocity.get(i).is_some_and(|v| v.len() != expect);
            if bad {
                return Err(Error::Checkpoint(format!(
                    "layer {i}: checkpoint size does not match {expect} weights"
                )));
            }
        }
        for (i, p) in params.iter_mut().enumerate() {
            p.weight.data.clone_from(&state.weights[i]);
            p.weight.grad = None;
            p.gamma = ClipParam::new(state.gammas[i]).map_err(|e| Error::Checkpoint(e.to_string()))?;
            p.clear_cache();
        }
        self.optimizer.velocity.clone_from(&state.velocity);
        let mut rng = ChaCha8Rng::from_seed(state.rng_seed);
        rng.set_stream(state.rng_stream);
        rng.set_word_pos(state.rng_word_pos);
        self.rng = rng;
        self.step = state.step;
        self.epoch = state.epoch;
        self.train_census = state.census;
        Ok(())
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Input(format!("label {l} >= {classes} outputs")));
        }
        out[r * classes + l] = 1.0;
    }
    Ok(out)
}

/// True when the last `window` losses never decrease.
pub fn stalled(losses: &[f64], window: usize) -> bool {
    losses.len() > window
        && losses[losses.len() - window - 1..]
            .windows(2)
            .all(|w| !(w[1] < w[0]))
}
