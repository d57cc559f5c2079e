//! Multiplication-free training engine.

pub mod config;
pub mod data;
pub mod layers;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod train;

pub use config::{
    Ablation, BitConfig, BitOverride, InitKind, LayerBits, LayerSpec, LossKind, NetworkSpec,
    Precision, TrainConfig,
};
pub use data::{synthetic_clusters, Dataset, SyntheticSpec};
pub use layers::{Layer, LinearLayerState, PassContext, TensorStats};
pub use network::{init_weights, Network};
pub use tensor::Tensor;
pub use train::{EpochMetrics, StepMetrics, Targets, Trainer, TrainerState};
