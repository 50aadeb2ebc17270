//! Seeded linearly separable retrieval task for exercising training.

use rand_distr::{Distribution, StandardNormal};

use crate::matrix::{normalized, Matrix};
use crate::seeds;

/// Representations whose positive documents are noisy images of the reps
/// under a hidden random linear map, mixed among random distractors.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableTask {
    pub reps: Vec<Vec<f64>>,
    /// `positives[i] = [i]`: the first `reps.len()` rows of `docs` are the
    /// positives, the rest distractors.
    pub positives: Vec<Vec<usize>>,
    pub docs: Matrix,
}

impl SeparableTask {
    pub fn generate(num_reps: usize, num_docs: usize, d_model: usize, d_emb: usize, noise: f64, seed: u64) -> Self {
        assert!(num_docs >= num_reps, "every rep needs its own positive");
        let mut rng = seeds::stream(seed, "separable-task");
        let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let map = Matrix::new(d_model, d_emb, gauss(d_model * d_emb)).expect("finite");
        let reps: Vec<Vec<f64>> = (0..num_reps).map(|_| gauss(d_model)).collect();
        let mut rows = Vec::with_capacity(num_docs);
        for r in &reps {
            let clean = normalized(&map.left_mul(r));
            let jitter = gauss(d_emb);
            let noisy: Vec<f64> = clean.iter().zip(&jitter).map(|(c, j)| c + noise * j / (d_emb as f64).sqrt()).collect();
            rows.push(normalized(&noisy));
        }
        while rows.len() < num_docs {
            rows.push(normalized(&gauss(d_emb)));
        }
        Self {
            positives: (0..num_reps).map(|i| vec![i]).collect(),
            reps,
            docs: Matrix::from_rows(&rows).expect("finite rows"),
        }
    }
}
