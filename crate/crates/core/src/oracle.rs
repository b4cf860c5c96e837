//! Direct-definition reference computations.
//!
//! Nothing here calls into the optimised paths; each function is the
//! textbook loop for its quantity. Tests and the `verify` command compare
//! the library against these.

use crate::fft::ComplexVector;
use crate::tensor::{Scalar, Tensor};

/// O(L²) DFT. `inverse` uses the positive exponent and the `1/L` factor.
pub fn naive_dft(x: &ComplexVector<f64>, inverse: bool) -> ComplexVector<f64> {
    let n = x.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        for j in 0..n {
            // (k*j) mod n keeps the angle accurate for long inputs.
            let ang = sign * std::f64::consts::TAU * ((k * j) % n) as f64 / n as f64;
            let (s, c) = ang.sin_cos();
            re[k] += x.re[j] * c - x.im[j] * s;
            im[k] += x.re[j] * s + x.im[j] * c;
        }
    }
    if inverse {
        re.iter_mut().for_each(|v| *v /= n as f64);
        im.iter_mut().for_each(|v| *v /= n as f64);
    }
    ComplexVector { re, im }
}

/// `c_i = Σ_j z[(i-j) mod N] v_j`.
pub fn circular_convolve_naive<T: Scalar>(z: &[T], v: &[T]) -> Vec<T> {
    let n = z.len();
    (0..n)
        .map(|i| (0..n).map(|j| z[(i + n - j) % n] * v[j]).sum())
        .collect()
}

/// `c_i = Σ_j z[(j-i) mod N] v_j`.
pub fn circular_correlate_naive<T: Scalar>(z: &[T], v: &[T]) -> Vec<T> {
    let n = z.len();
    (0..n)
        .map(|i| (0..n).map(|j| z[(j + n - i) % n] * v[j]).sum())
        .collect()
}

pub fn matmul_triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let p = b.cols();
    assert_eq!(k, b.rows());
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut s = 0.0;
            for kk in 0..k {
                s += a.at(i, kk) * b.at(kk, j);
            }
            out[i * p + j] = s;
        }
    }
    Tensor::matrix(m, p, out).expect("finite product")
}

pub fn column_mean(a: &Tensor) -> Vec<f64> {
    (0..a.cols())
        .map(|j| (0..a.rows()).map(|i| a.at(i, j)).sum::<f64>() / a.rows() as f64)
        .collect()
}

fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Multi-head scaled dot-product attention written element by element.
/// Heads take contiguous column blocks of the projections.
pub fn attention_loops(
    x: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    heads: usize,
    causal: bool,
) -> Tensor {
    let n = x.rows();
    let d = w_q.cols();
    let dh = d / heads;
    let proj = |w: &Tensor, i: usize, c: usize| -> f64 {
        (0..x.cols()).map(|k| x.at(i, k) * w.at(k, c)).sum()
    };
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let limit = if causal { i + 1 } else { n };
            let scores: Vec<f64> = (0..limit)
                .map(|j| {
                    (0..dh)
                        .map(|c| proj(w_q, i, h * dh + c) * proj(w_k, j, h * dh + c))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let p = softmax_slice(&scores);
            for c in 0..dh {
                out[i * d + h * dh + c] = (0..limit)
                    .map(|j| p[j] * proj(w_v, j, h * dh + c))
                    .sum();
            }
        }
    }
    Tensor::matrix(n, d, out).expect("finite attention")
}

/// Mean cross-entropy over rows that carry a target.
pub fn cross_entropy_loops(logits: &Tensor, targets: &[Option<usize>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[*t];
            count += 1;
        }
    }
    total / count as f64
}

/// The circulant matrix written out by its index rule:
/// `row_shift` gives `M[i][j] = w[(j-i) mod N]`, otherwise `M[i][j] = w[(i-j) mod N]`.
pub fn circulant_by_definition(w: &[f64], row_shift: bool) -> Tensor {
    let n = w.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let idx = if row_shift { (j + n - i) % n } else { (i + n - j) % n };
            out[i * n + j] = w[idx];
        }
    }
    Tensor::matrix(n, n, out).expect("finite circulant")
}
