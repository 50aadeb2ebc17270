//! Synthetic weight matrices with prescribed singular spectra, for exercising
//! the TD analysis on models whose answer is known in advance.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg;
use crate::matrix::Matrix;
use crate::seeds;
use crate::tensor_store::TensorStore;

/// Geometric spectrum `σ_i = exp(-λ i)` of length `r` whose normalized
/// entropy equals `target` (clamped to `[0, ln r]`).
pub fn spectrum_with_entropy(r: usize, target: f64) -> Vec<f64> {
    assert!(r >= 1);
    let max = (r as f64).ln();
    let target = target.clamp(0.0, max);
    let geometric = |lambda: f64| -> Vec<f64> { (0..r).map(|i| (-lambda * i as f64).exp()).collect() };
    let entropy_at = |lambda: f64| -> f64 {
        let s = geometric(lambda);
        let total: f64 = s.iter().sum();
        let p: Vec<f64> = s.iter().map(|x| x / total).collect();
        linalg::entropy(&p).expect("normalized by construction")
    };
    if target >= max {
        return vec![1.0; r];
    }
    // Entropy falls monotonically as λ grows.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while entropy_at(hi) > target && hi < 1e6 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if entropy_at(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    geometric(0.5 * (lo + hi))
}

/// Haar-like random orthogonal matrix (Gram-Schmidt on a Gaussian draw).
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut q = Matrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            q.set(i, j, x);
        }
    }
    q
}

/// `Q1 · diag(sigma) · Q2ᵀ` for fresh random orthogonal `Q1`, `Q2`.
pub fn matrix_with_spectrum<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    sigma: &[f64],
    rng: &mut R,
) -> Matrix {
    let q1 = random_orthogonal(rows, rng);
    let q2 = random_orthogonal(cols, rng);
    q1.matmul(&Matrix::diag(rows, cols, sigma)).matmul(&q2.transpose())
}

/// Store holding one `dim × dim` matrix per layer, named by substituting the
/// layer index into `pattern`, with TD equal to each entry of `entropies`.
pub fn store_with_entropies(entropies: &[f64], dim: usize, pattern: &str, seed: u64) -> TensorStore {
    let mut rng = seeds::stream(seed, "synth.weights");
    let mut store = TensorStore::new();
    for (layer, &h) in entropies.iter().enumerate() {
        let sigma = spectrum_with_entropy(dim, h);
        let w = matrix_with_spectrum(dim, dim, &sigma, &mut rng);
        store
            .insert(pattern.replacen("{}", &layer.to_string(), 1), w)
            .expect("layer names are distinct");
    }
    store.set_metadata("model_label", format!("synthetic-{}-layer", entropies.len()));
    store
}

/// Three-block entropy profile with uniform noise of amplitude `noise`.
/// `levels` gives the block values; `bounds` the two block boundaries.
pub fn three_block_entropies<R: Rng + ?Sized>(
    layers: usize,
    bounds: (usize, usize),
    levels: [f64; 3],
    noise: f64,
    rng: &mut R,
) -> Vec<f64> {
    (0..layers)
        .map(|i| {
            let base = if i < bounds.0 {
                levels[0]
            } else if i < bounds.1 {
                levels[1]
            } else {
                levels[2]
            };
            base + if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_hits_target_entropy() {
        for &(r, h) in &[(4, 0.0), (4, 1.0), (16, 2.3), (64, 4.0), (8, 8f64.ln())] {
            let s = spectrum_with_entropy(r, h);
            let total: f64 = s.iter().sum();
            let p: Vec<f64> = s.iter().map(|x| x / total).collect();
            let got = linalg::entropy(&p).unwrap();
            assert!((got - h).abs() < 1e-9, "r={r} h={h} got={got}");
        }
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = seeds::stream(3, "t");
        let q = random_orthogonal(6, &mut rng);
        let qtq = q.transpose().matmul(&q);
        assert!(qtq.sub(&Matrix::identity(6)).frobenius_norm() < 1e-12);
    }
}
