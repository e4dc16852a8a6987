//! Differentiable MLP family with an explicit backbone/head split, the
//! dataset containers it trains on, and the loss functionals built on it.

mod dataset;
mod mlp;
mod objective;
mod population;
mod spec;

pub use dataset::{LabeledDataset, Side, TargetRef, Targets};
pub use mlp::{empirical_nll, forward, Predictive};
pub use objective::{gradient, DatasetNll, HalfSquaredNorm, LikelihoodModel, Objective};
pub use population::{population_loss, population_loss_mc, LossKind, PopulationLoss};
pub use spec::{Activation, LayerShape, ModelSpec, OutputKind, ParamVector};
