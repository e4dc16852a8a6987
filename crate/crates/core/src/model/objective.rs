use crate::error::{Error, Result};
use crate::numeric::PAIRWISE_THRESHOLD;

use super::dataset::LabeledDataset;
use super::mlp::Predictive;

/// A scalar loss over a flat parameter vector with its gradient.
///
/// `n_examples` is the number of data points the loss averages over; it
/// sets `n` in the tempered posterior and the range of minibatch indices.
/// Analytic losses report a nominal `n` and ignore batches.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    fn n_examples(&self) -> usize {
        1
    }

    /// Loss value; `grad` is overwritten with its gradient.
    fn value_grad(&self, w: &[f64], grad: &mut [f64]) -> Result<f64>;

    /// Loss and gradient on a minibatch (mean over `batch`).
    fn batch_value_grad(&self, w: &[f64], batch: &[usize], grad: &mut [f64]) -> Result<f64> {
        let _ = batch;
        self.value_grad(w, grad)
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        let mut g = vec![0.0; self.dim()];
        self.value_grad(w, &mut g)
    }
}

/// Conditional model `p(y | x, w)` that can be summed over a dataset.
pub trait LikelihoodModel: Send + Sync {
    fn n_params(&self) -> usize;

    /// `Σ_i weight_i · (−log p(y_i | x_i, w))` over `indices`, adding the
    /// matching weighted gradient into `grad` when given.
    fn sum_nll(
        &self,
        w: &[f64],
        data: &LabeledDataset,
        indices: &[usize],
        weights: Option<&[f64]>,
        grad: Option<&mut [f64]>,
    ) -> f64;

    fn predictive(&self, w: &[f64], x: &[f64]) -> Predictive;
}

/// Mean negative log likelihood of a model over a dataset.
pub struct DatasetNll<'a, M: LikelihoodModel + ?Sized> {
    model: &'a M,
    data: &'a LabeledDataset,
    weights: Option<&'a [f64]>,
    all: Vec<usize>,
}

impl<'a, M: LikelihoodModel + ?Sized> DatasetNll<'a, M> {
    pub fn new(model: &'a M, data: &'a LabeledDataset) -> Self {
        Self {
            model,
            data,
            weights: None,
            all: (0..data.len()).collect(),
        }
    }

    /// Weighted sum instead of a mean; weights are indexed by example.
    pub fn weighted(model: &'a M, data: &'a LabeledDataset, weights: &'a [f64]) -> Self {
        assert_eq!(weights.len(), data.len());
        Self {
            weights: Some(weights),
            ..Self::new(model, data)
        }
    }

    /// Chunked accumulation: index order inside chunks, pairwise across them.
    fn accumulate(&self, w: &[f64], indices: &[usize], grad: Option<&mut [f64]>) -> f64 {
        let dim = self.model.n_params();
        let chunks: Vec<&[usize]> = indices.chunks(PAIRWISE_THRESHOLD).collect();
        if chunks.len() <= 1 {
            let mut g = grad;
            if let Some(g) = g.as_deref_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
            return self.model.sum_nll(w, self.data, indices, self.weights, g);
        }
        let want_grad = grad.is_some();
        let partials: Vec<(f64, Vec<f64>)> = chunks
            .iter()
            .map(|c| {
                let mut g = if want_grad { vec![0.0; dim] } else { Vec::new() };
                let v = self
                    .model
                    .sum_nll(w, self.data, c, self.weights, want_grad.then_some(&mut g[..]));
                (v, g)
            })
            .collect();
        let (v, g) = pairwise_reduce(&partials);
        if let Some(out) = grad {
            out.copy_from_slice(&g);
        }
        v
    }
}

fn pairwise_reduce(parts: &[(f64, Vec<f64>)]) -> (f64, Vec<f64>) {
    if parts.len() == 1 {
        return parts[0].clone();
    }
    let mid = parts.len() / 2;
    let (lv, mut lg) = pairwise_reduce(&parts[..mid]);
    let (rv, rg) = pairwise_reduce(&parts[mid..]);
    for (a, b) in lg.iter_mut().zip(rg) {
        *a += b;
    }
    (lv + rv, lg)
}

impl<M: LikelihoodModel + ?Sized> Objective for DatasetNll<'_, M> {
    fn dim(&self) -> usize {
        self.model.n_params()
    }

    fn n_examples(&self) -> usize {
        self.data.len()
    }

    fn value_grad(&self, w: &[f64], grad: &mut [f64]) -> Result<f64> {
        let total = self.accumulate(w, &self.all, Some(grad));
        let scale = if self.weights.is_some() { 1.0 } else { 1.0 / self.all.len() as f64 };
        if scale != 1.0 {
            grad.iter_mut().for_each(|g| *g *= scale);
        }
        Ok(total * scale)
    }

    fn batch_value_grad(&self, w: &[f64], batch: &[usize], grad: &mut [f64]) -> Result<f64> {
        let total = self.accumulate(w, batch, Some(grad));
        let scale = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok(total * scale)
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        let total = self.accumulate(w, &self.all, None);
        Ok(if self.weights.is_some() { total } else { total / self.all.len() as f64 })
    }
}

/// `½‖w‖²`.
#[derive(Debug, Clone, Copy)]
pub struct HalfSquaredNorm {
    pub dim: usize,
}

impl Objective for HalfSquaredNorm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, w: &[f64], grad: &mut [f64]) -> Result<f64> {
        grad.copy_from_slice(w);
        Ok(0.5 * w.iter().map(|x| x * x).sum::<f64>())
    }
}

/// Gradient of `objective` at `params`, rejecting non-finite losses.
pub fn gradient(objective: &dyn Objective, params: &[f64]) -> Result<Vec<f64>> {
    if params.len() != objective.dim() {
        return Err(Error::invalid("parameter length does not match objective"));
    }
    let mut g = vec![0.0; params.len()];
    let v = objective.value_grad(params, &mut g)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss = {v}")));
    }
    Ok(g)
}
