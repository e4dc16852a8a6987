use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

use super::dataset::{LabeledDataset, TargetRef};
use super::objective::{DatasetNll, LikelihoodModel, Objective};
use super::spec::{LayerShape, ModelSpec, OutputKind, ParamVector};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Predictive distribution `p(y | x, w)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictive {
    Categorical(Vec<f64>),
    Gaussian { mean: f64, sigma: f64 },
}

impl Predictive {
    pub fn log_prob(&self, y: TargetRef<'_>) -> f64 {
        match (self, y) {
            (Predictive::Categorical(p), TargetRef::Class(c)) => p[c].ln(),
            (Predictive::Gaussian { mean, sigma }, TargetRef::Real(y)) => {
                let z = (y - mean) / sigma;
                -0.5 * z * z - sigma.ln() - HALF_LN_2PI
            }
            _ => f64::NAN,
        }
    }
}

/// Per-call buffers for one forward/backward pass.
pub(crate) struct Tape {
    layers: Vec<LayerShape>,
    /// `acts[l]` is the input to layer `l`; the last entry holds the logits.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Tape {
    pub(crate) fn new(spec: &ModelSpec) -> Self {
        let layers = spec.layers();
        let mut acts = vec![vec![0.0; spec.input_dim]];
        let mut pre = Vec::new();
        for l in &layers {
            acts.push(vec![0.0; l.fan_out]);
            pre.push(vec![0.0; l.fan_out]);
        }
        let widest = layers.iter().map(|l| l.fan_out.max(l.fan_in)).max().unwrap_or(1);
        Self {
            layers,
            acts,
            pre,
            delta: vec![0.0; widest],
            delta_prev: vec![0.0; widest],
        }
    }

    /// Run the network; returns the output-layer values (logits or mean).
    pub(crate) fn run(&mut self, spec: &ModelSpec, w: &[f64], x: &[f64]) -> &[f64] {
        self.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (inputs, rest) = self.acts.split_at_mut(l + 1);
            let a_in = &inputs[l];
            let out = &mut rest[0];
            let weights = &w[layer.offset..layer.bias_offset()];
            let bias = &w[layer.bias_offset()..layer.offset + layer.len()];
            for o in 0..layer.fan_out {
                let row = &weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                let mut z = bias[o];
                for (wi, ai) in row.iter().zip(a_in.iter()) {
                    z += wi * ai;
                }
                if l == last {
                    out[o] = z;
                } else {
                    self.pre[l][o] = z;
                    out[o] = spec.activation.apply(z);
                }
            }
        }
        &self.acts[self.layers.len()]
    }

    /// Accumulate `scale * d(output)/dw · upstream` into `grad`, where
    /// `upstream` is the loss derivative w.r.t. the output layer. Must
    /// follow a `run` on the same `w`.
    pub(crate) fn backward(&mut self, spec: &ModelSpec, w: &[f64], upstream: &[f64], scale: f64, grad: &mut [f64]) {
        let n = self.layers.len();
        self.delta[..upstream.len()].copy_from_slice(upstream);
        for l in (0..n).rev() {
            let layer = self.layers[l];
            let a_in = &self.acts[l];
            let wb = layer.bias_offset();
            for o in 0..layer.fan_out {
                let d = scale * self.delta[o];
                if d != 0.0 {
                    let g_row = &mut grad[layer.offset + o * layer.fan_in..layer.offset + (o + 1) * layer.fan_in];
                    for (g, a) in g_row.iter_mut().zip(a_in.iter()) {
                        *g += d * a;
                    }
                }
                grad[wb + o] += d;
            }
            if l > 0 {
                let weights = &w[layer.offset..wb];
                for i in 0..layer.fan_in {
                    let mut s = 0.0;
                    for o in 0..layer.fan_out {
                        s += weights[o * layer.fan_in + i] * self.delta[o];
                    }
                    self.delta_prev[i] = s * spec.activation.derivative(self.pre[l - 1][i], a_in[i]);
                }
                std::mem::swap(&mut self.delta, &mut self.delta_prev);
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

pub fn forward(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> Result<Predictive> {
    spec.check_params(params)?;
    if x.len() != spec.input_dim {
        return Err(Error::invalid(format!(
            "input has dimension {}, spec expects {}",
            x.len(),
            spec.input_dim
        )));
    }
    let mut tape = Tape::new(spec);
    let out = tape.run(spec, &params.values, x);
    Ok(predictive_from_output(spec, out))
}

pub(crate) fn predictive_from_output(spec: &ModelSpec, out: &[f64]) -> Predictive {
    match spec.output_kind {
        OutputKind::CategoricalSoftmax => Predictive::Categorical(softmax(out)),
        OutputKind::GaussianFixedSigma { sigma } => Predictive::Gaussian { mean: out[0], sigma },
    }
}

/// Negative log likelihood of one example from output-layer values, and
/// its derivative w.r.t. those values written into `upstream`.
pub(crate) fn nll_from_output(spec: &ModelSpec, out: &[f64], y: TargetRef<'_>, upstream: Option<&mut [f64]>) -> f64 {
    match (spec.output_kind, y) {
        (OutputKind::CategoricalSoftmax, TargetRef::Class(c)) => {
            let lse = log_sum_exp(out);
            if let Some(up) = upstream {
                for (u, z) in up.iter_mut().zip(out) {
                    *u = (z - lse).exp();
                }
                up[c] -= 1.0;
            }
            lse - out[c]
        }
        (OutputKind::CategoricalSoftmax, TargetRef::Soft(r)) => {
            let lse = log_sum_exp(out);
            if let Some(up) = upstream {
                for ((u, z), rk) in up.iter_mut().zip(out).zip(r) {
                    *u = (z - lse).exp() - rk;
                }
            }
            lse - r.iter().zip(out).map(|(rk, z)| rk * z).sum::<f64>()
        }
        (OutputKind::GaussianFixedSigma { sigma }, TargetRef::Real(y)) => {
            let r = (out[0] - y) / sigma;
            if let Some(up) = upstream {
                up[0] = r / sigma;
            }
            0.5 * r * r + sigma.ln() + HALF_LN_2PI
        }
        _ => f64::NAN,
    }
}

impl LikelihoodModel for ModelSpec {
    fn n_params(&self) -> usize {
        self.param_count()
    }

    fn sum_nll(
        &self,
        w: &[f64],
        data: &LabeledDataset,
        indices: &[usize],
        weights: Option<&[f64]>,
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        let mut tape = Tape::new(self);
        let mut upstream = vec![0.0; self.head_dim];
        let mut total = 0.0;
        for &i in indices {
            let wt = weights.map_or(1.0, |ws| ws[i]);
            let out = tape.run(self, w, data.x(i));
            let want_grad = grad.is_some();
            let nll = nll_from_output(self, out, data.target(i), want_grad.then_some(&mut upstream[..]));
            total += wt * nll;
            if let Some(g) = grad.as_deref_mut() {
                tape.backward(self, w, &upstream, wt, g);
            }
        }
        total
    }

    fn predictive(&self, w: &[f64], x: &[f64]) -> Predictive {
        let mut tape = Tape::new(self);
        let out = tape.run(self, w, x);
        predictive_from_output(self, out)
    }
}

/// Mean negative log likelihood `L̂(w)` over `dataset`.
pub fn empirical_nll(spec: &ModelSpec, params: &ParamVector, dataset: &LabeledDataset) -> Result<f64> {
    spec.check_params(params)?;
    if dataset.is_empty() {
        return Err(Error::Degenerate("empty dataset".into()));
    }
    if dataset.input_dim() != spec.input_dim {
        return Err(Error::invalid("dataset input dimension does not match spec"));
    }
    DatasetNll::new(spec, dataset).value(&params.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Side, Targets};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cat_spec(hidden: Vec<usize>, c: usize) -> ModelSpec {
        ModelSpec::new(2, hidden, c, Activation::Tanh, OutputKind::CategoricalSoftmax).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let s = cat_spec(vec![3], 4);
        let p = ParamVector::new(vec![0.0; s.param_count()], s.backbone_boundary());
        match forward(&s, &p, &[0.3, -1.7]).unwrap() {
            Predictive::Categorical(probs) => {
                for q in probs {
                    assert!((q - 0.25).abs() < 1e-15);
                }
            }
            _ => panic!("expected categorical"),
        }
    }

    #[test]
    fn identity_linear_gaussian() {
        let s = ModelSpec::new(1, vec![], 1, Activation::Tanh, OutputKind::GaussianFixedSigma { sigma: 1.0 }).unwrap();
        let p = ParamVector::new(vec![1.0, 0.0], 0);
        assert_eq!(forward(&s, &p, &[2.0]).unwrap(), Predictive::Gaussian { mean: 2.0, sigma: 1.0 });
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let s = cat_spec(vec![3], 2);
        let p = ParamVector::new(vec![0.0; s.param_count()], s.backbone_boundary());
        assert!(matches!(forward(&s, &p, &[1.0]), Err(Error::InvalidInput(_))));
        let short = ParamVector::new(vec![0.0; 3], 0);
        assert!(forward(&s, &short, &[1.0, 2.0]).is_err());
    }

    /// Straight-line 2-8-3 tanh network evaluated with explicit loops.
    #[test]
    fn forward_matches_hand_evaluated_oracle() {
        let s = ModelSpec::new(2, vec![8], 3, Activation::Tanh, OutputKind::CategoricalSoftmax).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w: Vec<f64> = (0..s.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = [0.7, -1.3];
        let w1 = &w[0..16];
        let b1 = &w[16..24];
        let w2 = &w[24..48];
        let b2 = &w[48..51];
        let mut h = [0.0; 8];
        for j in 0..8 {
            h[j] = (w1[2 * j] * x[0] + w1[2 * j + 1] * x[1] + b1[j]).tanh();
        }
        let mut z = [0.0; 3];
        for k in 0..3 {
            z[k] = b2[k];
            for j in 0..8 {
                z[k] += w2[8 * k + j] * h[j];
            }
        }
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let tot: f64 = e.iter().sum();
        let p = ParamVector::new(w.clone(), s.backbone_boundary());
        let Predictive::Categorical(probs) = forward(&s, &p, &x).unwrap() else { panic!() };
        for k in 0..3 {
            assert!((probs[k] - e[k] / tot).abs() < 1e-10);
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nll_of_uniform_two_class_is_ln2() {
        let s = cat_spec(vec![], 2);
        let p = ParamVector::new(vec![0.0; s.param_count()], 0);
        let d = LabeledDataset::new(2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0], Targets::Classes(vec![0, 1, 1]), Side::Pretrain).unwrap();
        assert!((empirical_nll(&s, &p, &d).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn nll_zero_when_true_label_has_probability_one() {
        let s = ModelSpec::new(1, vec![], 2, Activation::Tanh, OutputKind::CategoricalSoftmax).unwrap();
        // logits (0, 1000) regardless of input sign as long as x = 1
        let p = ParamVector::new(vec![0.0, 0.0, 0.0, 1000.0], 0);
        let d = LabeledDataset::new(1, vec![1.0, 1.0], Targets::Classes(vec![1, 1]), Side::Pretrain).unwrap();
        assert_eq!(empirical_nll(&s, &p, &d).unwrap(), 0.0);
    }

    #[test]
    fn nll_matches_hand_summed_log_softmax() {
        // identity-like single layer: logits = W x with hand-picked W
        let s = ModelSpec::new(2, vec![], 3, Activation::Tanh, OutputKind::CategoricalSoftmax).unwrap();
        let w = vec![1.0, 0.0, 0.0, 1.0, 0.5, -0.5, 0.1, 0.2, -0.3];
        let p = ParamVector::new(w.clone(), 0);
        let xs = [[1.0, 2.0], [-1.0, 0.5], [0.0, -2.0]];
        let ys = [2usize, 0, 1];
        let d = LabeledDataset::from_rows(&xs.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), Targets::Classes(ys.to_vec()), Side::Pretrain).unwrap();
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let z: Vec<f64> = (0..3).map(|k| w[2 * k] * x[0] + w[2 * k + 1] * x[1] + w[6 + k]).collect();
            let lse = (z[0].exp() + z[1].exp() + z[2].exp()).ln();
            total += lse - z[y];
        }
        assert!((empirical_nll(&s, &p, &d).unwrap() - total / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_degenerate() {
        let s = cat_spec(vec![], 2);
        let p = ParamVector::new(vec![0.0; s.param_count()], 0);
        let d = LabeledDataset::new(2, vec![], Targets::Classes(vec![]), Side::Pretrain).unwrap();
        assert!(matches!(empirical_nll(&s, &p, &d), Err(Error::Degenerate(_))));
    }
}
