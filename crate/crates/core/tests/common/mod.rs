//! Test-only oracles. Nothing here calls into the kernels under test except
//! where a test explicitly composes them.

#![allow(dead_code)]

use promptpool::{PoolMode, PoolingSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

/// Strictly positive weights normalized to unit mass.
pub fn random_scores(rng: &mut impl Rng, t: usize, w: usize, h: usize) -> Tensor {
    let raw: Vec<f64> = (0..t * w * h)
        .map(|_| rng.random_range(0.05..1.0))
        .collect();
    let total: f64 = raw.iter().sum();
    Tensor::from_f64(vec![t, w, h], raw.into_iter().map(|x| x / total).collect()).unwrap()
}

pub fn random_spec(rng: &mut impl Rng, grid: [usize; 3], mode: PoolMode) -> PoolingSpec {
    let mut kernel = [1; 3];
    let mut stride = [1; 3];
    for a in 0..3 {
        kernel[a] = rng.random_range(1..=grid[a].min(4));
        stride[a] = rng.random_range(1..=3);
    }
    PoolingSpec::new(kernel, stride, mode).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Straight seven-loop evaluation of windowed pooling.
pub fn naive_pool(v: &Tensor, s: &Tensor, spec: &PoolingSpec) -> (Vec<usize>, Vec<f64>) {
    let sh = v.shape();
    let (t, w, h, d) = (sh[0], sh[1], sh[2], sh[3]);
    let [kt, kw, kh] = spec.kernel;
    let [dt, dw, dh] = spec.stride;
    let (ot, ow, oh) = ((t - kt) / dt + 1, (w - kw) / dw + 1, (h - kh) / dh + 1);
    let vi = |a: usize, b: usize, c: usize, e: usize| v.data()[((a * w + b) * h + c) * d + e];
    let si = |a: usize, b: usize, c: usize| s.data()[(a * w + b) * h + c];
    let mut out = Vec::with_capacity(ot * ow * oh * d);
    for a in 0..ot {
        for b in 0..ow {
            for c in 0..oh {
                // argmax over the window, first strict maximum in (i, j, k) order
                let mut best = (f64::NEG_INFINITY, (0, 0, 0));
                let mut mass = 0.0;
                for i in 0..kt {
                    for j in 0..kw {
                        for k in 0..kh {
                            let sv = si(a * dt + i, b * dw + j, c * dh + k);
                            mass += sv;
                            if sv > best.0 {
                                best = (sv, (a * dt + i, b * dw + j, c * dh + k));
                            }
                        }
                    }
                }
                for e in 0..d {
                    let mut weighted = 0.0;
                    let mut plain = 0.0;
                    for i in 0..kt {
                        for j in 0..kw {
                            for k in 0..kh {
                                let (x, y, z) = (a * dt + i, b * dw + j, c * dh + k);
                                weighted += vi(x, y, z, e) * si(x, y, z);
                                plain += vi(x, y, z, e);
                            }
                        }
                    }
                    out.push(match spec.mode {
                        PoolMode::WeightedSumLiteral => weighted,
                        PoolMode::WeightedAverage => weighted / mass,
                        PoolMode::Max => {
                            let (x, y, z) = best.1;
                            vi(x, y, z, e)
                        }
                        PoolMode::AverageBaseline => plain / (kt * kw * kh) as f64,
                    });
                }
            }
        }
    }
    (vec![ot, ow, oh, d], out)
}

/// Central differences of `f` at every coordinate of `x`.
pub fn central_differences(x: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-6)`, maximized over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Row-vector times matrix, one token at a time.
#[allow(clippy::needless_range_loop)]
pub fn naive_project(v: &Tensor, m: &Tensor) -> Vec<f64> {
    let d = v.shape()[3];
    let out_d = m.shape()[1];
    let mut out = Vec::new();
    for token in v.data().chunks(d) {
        for c in 0..out_d {
            let mut acc = 0.0;
            for r in 0..d {
                acc += token[r] * m.data()[r * out_d + c];
            }
            out.push(acc);
        }
    }
    out
}
