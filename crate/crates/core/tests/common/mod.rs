#![allow(dead_code)]

use fesel::model::{Activation, DatasetNll, LabeledDataset, ModelSpec, Objective, OutputKind, ParamVector, Side, Targets};
use fesel::numeric::rng_from;
use rand::Rng;

/// A small random model with matching random data.
pub struct Fixture {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub data: LabeledDataset,
}

pub fn fixture(seed: u64) -> Fixture {
    let mut rng = rng_from(seed, &[0xF1]);
    let input_dim = rng.random_range(1..=4);
    let depth = rng.random_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=6)).collect();
    let activation = if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Relu };
    let classify = rng.random_bool(0.5);
    let head_dim = if classify { rng.random_range(2..=4) } else { 1 };
    let output_kind = if classify {
        OutputKind::CategoricalSoftmax
    } else {
        OutputKind::GaussianFixedSigma { sigma: rng.random_range(0.5..2.0) }
    };
    let spec = ModelSpec::new(input_dim, hidden, head_dim, activation, output_kind).unwrap();
    // Jitter every coordinate so no ReLU pre-activation sits on its kink.
    let mut params = spec.init_params(&mut rng);
    for v in &mut params.values {
        *v += rng.random_range(-0.5..0.5);
    }
    let n = rng.random_range(1..=12);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..input_dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let targets = if classify {
        Targets::Classes((0..n).map(|_| rng.random_range(0..head_dim)).collect())
    } else {
        Targets::Real((0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
    };
    let data = LabeledDataset::from_rows(&rows, targets, Side::Pretrain).unwrap();
    Fixture { spec, params, data }
}

/// Worst per-coordinate relative error between the analytic gradient and a
/// central difference with step `h`. Denominators are floored at `floor`.
pub fn max_fd_rel_error(f: &Fixture, h: f64, floor: f64) -> f64 {
    let obj = DatasetNll::new(&f.spec, &f.data);
    let w = f.params.values.clone();
    let mut g = vec![0.0; w.len()];
    obj.value_grad(&w, &mut g).unwrap();
    let mut worst = 0.0f64;
    for i in 0..w.len() {
        let mut wp = w.clone();
        let mut wm = w.clone();
        wp[i] += h;
        wm[i] -= h;
        let fd = (obj.value(&wp).unwrap() - obj.value(&wm).unwrap()) / (2.0 * h);
        let denom = g[i].abs().max(fd.abs()).max(floor);
        worst = worst.max((g[i] - fd).abs() / denom);
    }
    worst
}
