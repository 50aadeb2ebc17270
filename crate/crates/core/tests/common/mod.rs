//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the library's numerical kernels.

#![allow(dead_code)]

use lrag_core::toy_lm::ToyLm;
use lrag_core::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-32 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Singular values from the eigenvalues of the smaller Gram matrix.
pub fn gram_singular_values(w: &Matrix) -> Vec<f64> {
    let (m, n) = w.shape();
    let gram: Vec<Vec<f64>> = if n <= m {
        (0..n)
            .map(|i| (0..n).map(|j| (0..m).map(|k| w.get(k, i) * w.get(k, j)).sum()).collect())
            .collect()
    } else {
        (0..m)
            .map(|i| (0..m).map(|j| (0..n).map(|k| w.get(i, k) * w.get(j, k)).sum()).collect())
            .collect()
    };
    symmetric_eigenvalues(gram).into_iter().map(|e| e.max(0.0).sqrt()).collect()
}

/// Natural-log entropy of a spectrum normalized to sum one.
pub fn spectral_entropy(sigma: &[f64]) -> f64 {
    let total: f64 = sigma.iter().sum();
    sigma
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum()
}

fn vec_mat(x: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * w.get(i, j);
        }
    }
    out
}

fn rms(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let d = (ms + 1e-6).sqrt();
    x.iter().zip(gain).map(|(v, g)| v / d * g).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn sinusoid(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((i - i % 2) as f64 / d as f64);
            let a = pos as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Causal attention written as a plain loop over heads, queries and keys.
pub fn naive_attention(w_q: &Matrix, w_k: &Matrix, w_v: &Matrix, x: &[Vec<f64>], n_heads: usize) -> Vec<Vec<f64>> {
    let d = w_q.cols();
    let dh = d / n_heads;
    let q: Vec<Vec<f64>> = x.iter().map(|r| vec_mat(r, w_q)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| vec_mat(r, w_k)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| vec_mat(r, w_v)).collect();
    let mut out = vec![vec![0.0; d]; x.len()];
    for h in 0..n_heads {
        for i in 0..x.len() {
            let mut scores = Vec::new();
            for j in 0..=i {
                let mut s = 0.0;
                for c in h * dh..(h + 1) * dh {
                    s += q[i][c] * k[j][c];
                }
                scores.push(s / (dh as f64).sqrt());
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..=i {
                for c in h * dh..(h + 1) * dh {
                    out[i][c] += e[j] / z * v[j][c];
                }
            }
        }
    }
    out
}

/// Straight-line forward pass: every block runs, no shortcuts.
/// Returns the last-position states and the final logits.
pub fn naive_forward(lm: &ToyLm, tokens: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = lm.d_model();
    let n_heads = lm.config().n_heads;
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let pe = sinusoid(i, d);
            (0..d).map(|c| lm.embedding().get(t, c) + pe[c]).collect()
        })
        .collect();
    let last = tokens.len() - 1;
    let mut states = vec![x[last].clone()];
    for b in lm.blocks() {
        let normed: Vec<Vec<f64>> = x.iter().map(|r| rms(r, &b.norm1)).collect();
        let heads = naive_attention(&b.w_q, &b.w_k, &b.w_v, &normed, n_heads);
        for (xi, hi) in x.iter_mut().zip(&heads) {
            let o = vec_mat(hi, &b.w_o);
            for c in 0..d {
                xi[c] += o[c];
            }
        }
        for xi in x.iter_mut() {
            let hidden: Vec<f64> = vec_mat(&rms(xi, &b.norm2), &b.mlp_in).into_iter().map(gelu).collect();
            let o = vec_mat(&hidden, &b.mlp_out);
            for c in 0..d {
                xi[c] += o[c];
            }
        }
        states.push(x[last].clone());
    }
    let logits = vec_mat(&rms(&x[last], lm.final_norm()), lm.unembedding());
    (states, logits)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
