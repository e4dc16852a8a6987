//! Deterministic numerical integration: adaptive Gauss–Kronrod on intervals
//! (nested for low-dimensional boxes) and Gauss–Hermite rules for Gaussian
//! expectations.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Piece {
    fn eq(&self, o: &Self) -> bool {
        self.error == o.error
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Piece {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&o.error)
    }
}

/// Adaptive Gauss–Kronrod (7/15) integral of `f` over the union of the
/// consecutive intervals given by `breaks`. Returns `(value, error_estimate)`.
pub fn integrate_breaks<F: FnMut(f64) -> f64>(mut f: F, breaks: &[f64], rel_tol: f64, abs_tol: f64) -> (f64, f64) {
    let mut heap = BinaryHeap::new();
    for w in breaks.windows(2) {
        let (v, e) = gk15(&mut f, w[0], w[1]);
        heap.push(Piece { a: w[0], b: w[1], value: v, error: e });
    }
    for _ in 0..20_000 {
        let total: f64 = heap.iter().map(|p| p.value).sum();
        let err: f64 = heap.iter().map(|p| p.error).sum();
        if err <= abs_tol.max(rel_tol * total.abs()) {
            break;
        }
        let worst = heap.pop().expect("nonempty");
        let mid = 0.5 * (worst.a + worst.b);
        let (lv, le) = gk15(&mut f, worst.a, mid);
        let (rv, re) = gk15(&mut f, mid, worst.b);
        heap.push(Piece { a: worst.a, b: mid, value: lv, error: le });
        heap.push(Piece { a: mid, b: worst.b, value: rv, error: re });
    }
    let mut pieces = heap.into_vec();
    pieces.sort_by(|p, q| p.a.total_cmp(&q.a));
    (pieces.iter().map(|p| p.value).sum(), pieces.iter().map(|p| p.error).sum())
}

pub fn integrate<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> (f64, f64) {
    integrate_breaks(f, &[a, b], rel_tol, abs_tol)
}

/// Breakpoints clustering geometrically around `center` inside
/// `[center - half_width, center + half_width]`, so a narrow peak at the
/// center is resolved from the first pass.
pub fn centered_breaks(center: f64, half_width: f64, levels: usize) -> Vec<f64> {
    let mut right: Vec<f64> = (0..levels).map(|k| half_width * 0.5f64.powi(k as i32)).collect();
    right.reverse();
    let mut out: Vec<f64> = right.iter().rev().map(|r| center - r).collect();
    out.push(center);
    out.extend(right.iter().map(|r| center + r));
    out
}

/// Integral over a box `∏ [center_i ± half_width]` in up to three
/// dimensions by nested adaptive quadrature.
pub fn integrate_box<F: Fn(&[f64]) -> f64>(f: &F, center: &[f64], half_width: f64, rel_tol: f64) -> Result<f64> {
    if center.is_empty() || center.len() > 3 {
        return Err(Error::Unsupported(format!(
            "quadrature supports 1 to 3 dimensions, got {}",
            center.len()
        )));
    }
    let mut point = center.to_vec();
    Ok(nested(f, center, half_width, rel_tol, 0, &mut point))
}

fn nested<F: Fn(&[f64]) -> f64>(f: &F, center: &[f64], hw: f64, tol: f64, axis: usize, point: &mut Vec<f64>) -> f64 {
    let breaks = centered_breaks(center[axis], hw, 12);
    let last = axis + 1 == center.len();
    let mut local = point.clone();
    let (v, _) = integrate_breaks(
        |t| {
            local[axis] = t;
            if last {
                f(&local)
            } else {
                let mut p = local.clone();
                nested(f, center, hw, tol, axis + 1, &mut p)
            }
        },
        &breaks,
        tol,
        0.0,
    );
    *point = local;
    v
}

/// Physicists' Gauss–Hermite rule: `∫ e^{-x²} f(x) dx ≈ Σ w_i f(x_i)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Nodes and weights for `E[f(Z)]`, `Z ~ N(0, 1)`.
pub fn standard_normal_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite(n);
    let s = std::f64::consts::SQRT_2;
    let norm = std::f64::consts::PI.sqrt();
    (x.iter().map(|v| v * s).collect(), w.iter().map(|v| v / norm).collect())
}

/// Tensor-product rule for `E[f(X)]`, `X ~ N(mean, sigma² I)`.
pub fn isotropic_normal_rule(mean: &[f64], sigma: f64, per_dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (t, wt) = standard_normal_rule(per_dim);
    let d = mean.len();
    let total = per_dim.pow(d as u32);
    let mut nodes = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut x = Vec::with_capacity(d);
        let mut w = 1.0;
        for m in mean {
            let k = rem % per_dim;
            rem /= per_dim;
            x.push(m + sigma * t[k]);
            w *= wt[k];
        }
        nodes.push(x);
        weights.push(w);
    }
    (nodes, weights)
}
