use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mean, rng_from, stable_sum, std_error, stream};
use crate::synth::{Conditional, TaskFamily};

use super::dataset::Side;
use super::mlp::Predictive;
use super::objective::LikelihoodModel;
use super::spec::{ModelSpec, OutputKind, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    /// `K(w) = E_{r(x)} KL(r(y|x) ‖ p(y|x,w))`.
    K,
    /// `L(w) = −E_{r(x,y)} log p(y|x,w)`.
    L,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationLoss {
    pub value: f64,
    /// Zero when evaluated by quadrature.
    pub std_error: f64,
}

fn gaussian_kl(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    (s2 / s1).ln() + (s1 * s1 + (m1 - m2) * (m1 - m2)) / (2.0 * s2 * s2) - 0.5
}

/// Pointwise `KL(r(·|x) ‖ p(·|x,w))` (or cross-entropy for `L`) with `y`
/// integrated out analytically.
fn pointwise(cond: &Conditional, pred: &Predictive, which: LossKind) -> f64 {
    let kl = match (cond, pred) {
        (Conditional::Gaussian { mean, sigma }, Predictive::Gaussian { mean: m, sigma: s }) => gaussian_kl(*mean, *sigma, *m, *s),
        (Conditional::Categorical(r), Predictive::Categorical(p)) => r
            .iter()
            .zip(p)
            .filter(|(rk, _)| **rk > 0.0)
            .map(|(rk, pk)| rk * (rk.ln() - pk.ln()))
            .sum(),
        _ => f64::NAN,
    };
    match which {
        LossKind::K => kl,
        LossKind::L => kl + cond.entropy(),
    }
}

fn check_compatible(spec: &ModelSpec, params: &ParamVector, task: &TaskFamily, side: Side) -> Result<()> {
    spec.check_params(params)?;
    if spec.input_dim != task.input_dim() {
        return Err(Error::invalid("model input dimension does not match task"));
    }
    match spec.output_kind {
        OutputKind::CategoricalSoftmax if task.is_classification() => {
            if spec.head_dim != task.n_labels(side) {
                return Err(Error::invalid(format!(
                    "model head has {} classes, {:?} side has {}",
                    spec.head_dim,
                    side,
                    task.n_labels(side)
                )));
            }
        }
        OutputKind::GaussianFixedSigma { .. } if !task.is_classification() => {}
        _ => return Err(Error::invalid("model output kind does not match task")),
    }
    Ok(())
}

/// `Kⁱ(w)` or `Lⁱ(w)`. Gaussian tasks with Gaussian outputs and at most
/// three input dimensions integrate `y` in closed form and `x` by
/// Gauss–Hermite quadrature; otherwise `y` is integrated analytically and
/// `x` by `mc_samples` fresh draws.
pub fn population_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    task: &TaskFamily,
    which: LossKind,
    side: Side,
    mc_samples: usize,
    seed: u64,
) -> Result<PopulationLoss> {
    check_compatible(spec, params, task, side)?;
    if mc_samples == 0 {
        return Err(Error::invalid("mc_samples must be at least 1"));
    }
    if let Some((nodes, weights)) = task.x_quadrature(side) {
        let terms: Vec<f64> = nodes
            .iter()
            .zip(&weights)
            .map(|(x, w)| w * pointwise(&task.conditional(side, x), &spec.predictive(&params.values, x), which))
            .collect();
        return Ok(PopulationLoss {
            value: stable_sum(&terms),
            std_error: 0.0,
        });
    }
    let data = task.sample(side, mc_samples, crate::numeric::derive_seed(seed, &[stream::EVAL]))?;
    let terms: Vec<f64> = (0..data.len())
        .map(|i| {
            let x = data.x(i);
            pointwise(&task.conditional(side, x), &spec.predictive(&params.values, x), which)
        })
        .collect();
    Ok(PopulationLoss {
        value: mean(&terms),
        std_error: std_error(&terms),
    })
}

/// Plain Monte Carlo over fresh `(x, y)` pairs:
/// `mean(log r(y|x) − log p(y|x,w))` for `K`, `mean(−log p)` for `L`.
pub fn population_loss_mc(
    spec: &ModelSpec,
    params: &ParamVector,
    task: &TaskFamily,
    which: LossKind,
    side: Side,
    mc_samples: usize,
    seed: u64,
) -> Result<PopulationLoss> {
    check_compatible(spec, params, task, side)?;
    if mc_samples < 2 {
        return Err(Error::invalid("need at least two Monte-Carlo samples"));
    }
    let mut rng = rng_from(seed, &[stream::EVAL, side.index()]);
    let data = task.sample_with(side, mc_samples, &mut rng)?;
    let terms: Vec<f64> = (0..data.len())
        .map(|i| {
            let (x, y) = (data.x(i), data.target(i));
            let log_p = spec.predictive(&params.values, x).log_prob(y);
            match which {
                LossKind::K => task.conditional(side, x).log_prob(y) - log_p,
                LossKind::L => -log_p,
            }
        })
        .collect();
    Ok(PopulationLoss {
        value: mean(&terms),
        std_error: std_error(&terms),
    })
}
