//! Analytic objectives and a conjugate linear-Gaussian model, used as
//! oracles for the samplers and estimators.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{LabeledDataset, LikelihoodModel, Objective, Predictive, TargetRef};
use crate::numeric::rng_from;

/// `L(w) = ½ (w − c)ᵀ A (w − c)` with a nominal sample size `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLoss {
    /// Row-major `d × d`, symmetric.
    pub a: Vec<f64>,
    pub center: Vec<f64>,
    pub n: usize,
}

impl QuadraticLoss {
    pub fn new(a: Vec<f64>, center: Vec<f64>, n: usize) -> Result<Self> {
        let d = center.len();
        if d == 0 || a.len() != d * d {
            return Err(Error::invalid("quadratic matrix must be d × d"));
        }
        for i in 0..d {
            for j in 0..i {
                if (a[i * d + j] - a[j * d + i]).abs() > 1e-12 * (1.0 + a[i * d + j].abs()) {
                    return Err(Error::invalid("quadratic matrix must be symmetric"));
                }
            }
        }
        Ok(Self { a, center, n })
    }

    pub fn isotropic(d: usize, curvature: f64, n: usize) -> Self {
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            a[i * d + i] = curvature;
        }
        Self { a, center: vec![0.0; d], n }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn eval(&self, w: &[f64]) -> f64 {
        let d = self.dim();
        let r: Vec<f64> = w.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += r[i] * self.a[i * d + j] * r[j];
            }
        }
        0.5 * s
    }
}

impl Objective for QuadraticLoss {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn n_examples(&self) -> usize {
        self.n
    }

    fn value_grad(&self, w: &[f64], grad: &mut [f64]) -> Result<f64> {
        let d = self.center.len();
        for (i, g) in grad.iter_mut().enumerate().take(d) {
            *g = (0..d).map(|j| self.a[i * d + j] * (w[j] - self.center[j])).sum();
        }
        Ok(self.eval(w))
    }
}

/// `L(w) = ¼ Σ s_i (w_i − c_i)⁴`, a degenerate (non-regular) minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarticLoss {
    pub scale: Vec<f64>,
    pub center: Vec<f64>,
    pub n: usize,
}

impl QuarticLoss {
    pub fn eval(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(&self.center)
            .zip(&self.scale)
            .map(|((a, c), s)| 0.25 * s * (a - c).powi(4))
            .sum()
    }
}

impl Objective for QuarticLoss {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn n_examples(&self) -> usize {
        self.n
    }

    fn value_grad(&self, w: &[f64], grad: &mut [f64]) -> Result<f64> {
        for (i, g) in grad.iter_mut().enumerate().take(self.center.len()) {
            *g = self.scale[i] * (w[i] - self.center[i]).powi(3);
        }
        Ok(self.eval(w))
    }
}

/// A loss that ignores its argument.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantLoss {
    pub dim: usize,
    pub value: f64,
    pub n: usize,
}

impl Objective for ConstantLoss {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_examples(&self) -> usize {
        self.n
    }

    fn value_grad(&self, _w: &[f64], grad: &mut [f64]) -> Result<f64> {
        grad.fill(0.0);
        Ok(self.value)
    }
}

/// Random symmetric positive-definite matrix `Q diag(λ) Qᵀ` with
/// eigenvalues drawn uniformly from `[lo, hi]`.
pub fn random_spd(d: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed, &[]);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let eig: Vec<f64> = (0..d).map(|_| rng.random_range(lo..=hi)).collect();
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..d).map(|k| q[k][i] * eig[k] * q[k][j]).sum();
        }
    }
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = s;
            a[j * d + i] = s;
        }
    }
    a
}

/// `p(y | x, w) = N(wᵀx, σ²)`; every coordinate belongs to the backbone.
/// With `x ≡ [1]` this is the Gaussian location model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearGaussian {
    pub input_dim: usize,
    pub sigma: f64,
}

impl LinearGaussian {
    fn mean(&self, w: &[f64], x: &[f64]) -> f64 {
        w.iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

impl LikelihoodModel for LinearGaussian {
    fn n_params(&self) -> usize {
        self.input_dim
    }

    fn sum_nll(&self, w: &[f64], data: &LabeledDataset, indices: &[usize], weights: Option<&[f64]>, mut grad: Option<&mut [f64]>) -> f64 {
        let s2 = self.sigma * self.sigma;
        let log_norm = 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        let mut total = 0.0;
        for (k, &i) in indices.iter().enumerate() {
            let x = data.x(i);
            let TargetRef::Real(y) = data.target(i) else {
                return f64::NAN;
            };
            let c = weights.map_or(1.0, |wt| wt[k]);
            let r = self.mean(w, x) - y;
            total += c * (0.5 * r * r / s2 + log_norm);
            if let Some(g) = grad.as_deref_mut() {
                for (gj, xj) in g.iter_mut().zip(x) {
                    *gj += c * r * xj / s2;
                }
            }
        }
        total
    }

    fn predictive(&self, w: &[f64], x: &[f64]) -> Predictive {
        Predictive::Gaussian {
            mean: self.mean(w, x),
            sigma: self.sigma,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gradient;

    #[test]
    fn quadratic_gradient_matches_finite_difference() {
        let a = random_spd(3, 0.5, 2.0, 7);
        let q = QuadraticLoss::new(a, vec![0.1, -0.2, 0.3], 100).unwrap();
        let w = [0.4, 0.5, -0.6];
        let g = gradient(&q, &w).unwrap();
        for i in 0..3 {
            let h = 1e-6;
            let mut p = w;
            let mut m = w;
            p[i] += h;
            m[i] -= h;
            let fd = (q.eval(&p) - q.eval(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn random_spd_has_requested_trace_bounds() {
        let d = 4;
        let a = random_spd(d, 0.5, 2.0, 3);
        let tr: f64 = (0..d).map(|i| a[i * d + i]).sum();
        assert!(tr >= 0.5 * d as f64 - 1e-9 && tr <= 2.0 * d as f64 + 1e-9);
        for i in 0..d {
            for j in 0..d {
                assert_eq!(a[i * d + j], a[j * d + i]);
            }
        }
    }
}
