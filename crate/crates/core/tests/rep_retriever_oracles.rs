//! Adapter, InfoNCE and training checked against recomputation, brute-force
//! loops, a hand-derived two-document gradient and finite differences.

mod common;

use common::{max_abs_diff, random_matrix, random_vec, rng};
use lrag_core::linalg::gelu;
use lrag_core::rep_retriever::{
    candidate_layers, infonce_batch, infonce_single, loss_and_gradients, relevance_score, train_on_embeddings,
    windowed_means, LossForm, MlpAdapter, SeparableTask, TrainBatch, TrainConfig,
};
use lrag_core::retrieval::{DocEncoder, Document};
use lrag_core::text::Vocabulary;
use lrag_core::Matrix;
use proptest::prelude::*;
use rand::Rng;

fn scaled_adapter(seed: u64, d_model: usize, d_hidden: usize, d_emb: usize, scale: f64) -> MlpAdapter {
    let mut g = rng(seed);
    MlpAdapter::from_parts(
        random_matrix(&mut g, d_model, d_hidden).scale(scale),
        random_vec(&mut g, d_hidden).iter().map(|x| x * scale).collect(),
        random_matrix(&mut g, d_hidden, d_emb).scale(scale),
        random_vec(&mut g, d_emb).iter().map(|x| x * scale).collect(),
    )
    .unwrap()
}

fn random_batch(seed: u64, n: usize, m: usize, d_model: usize, d_emb: usize) -> TrainBatch {
    let mut g = rng(seed);
    let reps = (0..n).map(|_| random_vec(&mut g, d_model)).collect();
    let positives = (0..n)
        .map(|_| {
            let k = g.random_range(1..=2.min(m));
            let mut p: Vec<usize> = (0..k).map(|_| g.random_range(0..m)).collect();
            p.sort_unstable();
            p.dedup();
            p
        })
        .collect();
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let v = random_vec(&mut g, d_emb);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    TrainBatch {
        reps,
        positives,
        doc_embeddings: Matrix::from_rows(&rows).unwrap(),
    }
}

/// `w2ᵀ GELU(w1ᵀ r + b1) + b2` with explicit index loops.
fn recompute_adapter(g: &MlpAdapter, r: &[f64]) -> Vec<f64> {
    let hidden: Vec<f64> = (0..g.d_hidden())
        .map(|k| gelu((0..g.d_model()).map(|i| r[i] * g.w1.get(i, k)).sum::<f64>() + g.b1[k]))
        .collect();
    (0..g.d_emb())
        .map(|j| (0..g.d_hidden()).map(|k| hidden[k] * g.w2.get(k, j)).sum::<f64>() + g.b2[j])
        .collect()
}

/// Loss from scratch: scores, log-softmax and pair terms in plain loops.
fn brute_loss(g: &MlpAdapter, b: &TrainBatch, tau: f64, form: LossForm, normalize: bool) -> f64 {
    let m = b.doc_embeddings.rows();
    let mut terms = Vec::new();
    for (r, pos) in b.reps.iter().zip(&b.positives) {
        let mut u = recompute_adapter(g, r);
        if normalize {
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= n);
        }
        let s: Vec<f64> = (0..m)
            .map(|j| u.iter().zip(b.doc_embeddings.row(j)).map(|(a, c)| a * c).sum::<f64>() / tau)
            .collect();
        let z: f64 = s.iter().map(|x| x.exp()).sum();
        for &p in pos {
            terms.push(s[p].exp() / z);
        }
    }
    match form {
        LossForm::Standard => terms.iter().map(|q| -q.ln()).sum::<f64>() / terms.len() as f64,
        LossForm::Literal => -terms.iter().sum::<f64>().ln(),
    }
}

#[test]
fn adapter_matches_recomputation() {
    for seed in 0..10 {
        let g = MlpAdapter::init(6, 4, seed);
        let r = random_vec(&mut rng(seed + 100), 6);
        assert!(max_abs_diff(&g.forward(&r).unwrap(), &recompute_adapter(&g, &r)) < 1e-14);
    }
}

#[test]
fn relevance_is_the_composed_dot_product() {
    let vocab = Vocabulary::from_words(["alpha", "beta", "gamma"]);
    let enc = DocEncoder::new(vocab, 5, 2, true);
    let g = scaled_adapter(3, 4, 8, 5, 1.0);
    let r = random_vec(&mut rng(4), 4);
    let doc = Document::new("x", "alpha", "beta beta gamma");
    let z = recompute_adapter(&g, &r);
    let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
    let e = enc.encode("alpha beta beta gamma").unwrap();
    let want: f64 = z.iter().zip(&e).map(|(a, b)| a / n * b).sum();
    assert!((relevance_score(&g, &enc, &r, &doc).unwrap() - want).abs() < 1e-12);
}

#[test]
fn single_loss_matches_formula() {
    let scores = random_vec(&mut rng(8), 8);
    for pos in 0..8 {
        for tau in [0.05, 0.5, 2.0] {
            let (p, loss) = infonce_single(&scores, pos, tau).unwrap();
            let z: f64 = scores.iter().map(|s| (s / tau).exp()).sum();
            let want = (scores[pos] / tau).exp() / z;
            assert!((p - want).abs() < 1e-14);
            assert!((loss + want.ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_loss_matches_brute_force() {
    for seed in 0..10 {
        let g = scaled_adapter(seed, 5, 10, 4, 0.5);
        let b = random_batch(seed, 6, 9, 5, 4);
        for form in [LossForm::Standard, LossForm::Literal] {
            for normalize in [true, false] {
                let got = infonce_batch(&g, &b, 0.1, form, normalize).unwrap();
                let want = brute_loss(&g, &b, 0.1, form, normalize);
                assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "{form:?} {normalize}");
            }
        }
    }
}

/// One rep, two docs, no normalization. With `Δ = (s₊ - s₋)/τ`,
/// `∂L/∂b2 = -(1 - σ(Δ)) (d₊ - d₋) / τ` and `∂L/∂w2[k] = h_k ∂L/∂b2`.
#[test]
fn two_document_gradient_closed_form() {
    for seed in 0..10 {
        let g = scaled_adapter(seed, 3, 6, 4, 1.0);
        let mut b = random_batch(seed + 50, 1, 2, 3, 4);
        b.positives = vec![vec![0]];
        let tau = 0.3;
        let r = &b.reps[0];
        let z = recompute_adapter(&g, r);
        let (d_pos, d_neg) = (b.doc_embeddings.row(0), b.doc_embeddings.row(1));
        let dot = |x: &[f64]| z.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        let delta = (dot(d_pos) - dot(d_neg)) / tau;
        let sigmoid = 1.0 / (1.0 + (-delta).exp());
        let db2: Vec<f64> = d_pos
            .iter()
            .zip(d_neg)
            .map(|(p, n)| -(1.0 - sigmoid) * (p - n) / tau)
            .collect();
        let (loss, grad) = loss_and_gradients(&g, &b, tau, LossForm::Standard, false).unwrap();
        assert!((loss - (-sigmoid.ln())).abs() < 1e-12);
        assert!(max_abs_diff(&grad.b2, &db2) < 1e-12);
        let hidden: Vec<f64> = (0..6)
            .map(|k| gelu((0..3).map(|i| r[i] * g.w1.get(i, k)).sum::<f64>() + g.b1[k]))
            .collect();
        for k in 0..6 {
            let want: Vec<f64> = db2.iter().map(|d| hidden[k] * d).collect();
            assert!(max_abs_diff(grad.w2.row(k), &want) < 1e-12);
        }
    }
}

fn assert_gradients_match_fd(g: &MlpAdapter, b: &TrainBatch, tau: f64, form: LossForm, normalize: bool) {
    let (_, grad) = loss_and_gradients(g, b, tau, form, normalize).unwrap();
    let analytic: Vec<f64> = grad.params().collect();
    let h = 1e-5;
    let mut probe = g.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + h;
        let up = infonce_batch(&probe, b, tau, form, normalize).unwrap();
        *probe.param_mut(i) = orig - h;
        let down = infonce_batch(&probe, b, tau, form, normalize).unwrap();
        *probe.param_mut(i) = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        assert!(rel < 1e-4, "param {i}: analytic {a}, fd {fd}, {form:?} normalize={normalize}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..20 {
        let g = scaled_adapter(seed, 4, 8, 3, 0.7);
        let b = random_batch(seed + 1000, 5, 7, 4, 3);
        for form in [LossForm::Standard, LossForm::Literal] {
            for normalize in [true, false] {
                assert_gradients_match_fd(&g, &b, 0.2, form, normalize);
            }
        }
    }
}

#[test]
fn separable_task_trains_to_high_recall() {
    let t = SeparableTask::generate(64, 256, 64, 32, 0.1, 0);
    let init = MlpAdapter::init(64, 32, 0);
    let cfg = TrainConfig {
        in_batch_negatives: false,
        ..TrainConfig::default()
    };
    let report = train_on_embeddings(&init, &t.reps, &t.positives, &t.docs, true, &cfg).unwrap();
    assert_eq!(report.loss_history.len(), 500);
    let (_, recall) = *report.eval_recall.last().unwrap();
    assert!(recall >= 0.95, "recall {recall}");
    let w = windowed_means(&report.loss_history, 20);
    assert!(w.windows(2).all(|p| p[1] <= p[0]));
    // Deterministic given the seed.
    let again = train_on_embeddings(&init, &t.reps, &t.positives, &t.docs, true, &cfg).unwrap();
    assert_eq!(report.loss_history, again.loss_history);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_ignores_score_shift(scores in prop::collection::vec(-3.0f64..3.0, 2..12), c in -50.0f64..50.0, tau in 0.05f64..2.0) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        let (_, a) = infonce_single(&scores, 0, tau).unwrap();
        let (_, b) = infonce_single(&shifted, 0, tau).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn sharper_temperature_helps_a_leading_positive(scores in prop::collection::vec(-1.0f64..1.0, 2..12), t1 in 0.05f64..2.0, t2 in 0.05f64..2.0) {
        let mut scores = scores;
        scores[0] = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 0.1;
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let (_, l_lo) = infonce_single(&scores, 0, lo).unwrap();
        let (_, l_hi) = infonce_single(&scores, 0, hi).unwrap();
        prop_assert!(l_lo <= l_hi + 1e-12);
    }

    #[test]
    fn literal_loss_never_exceeds_standard(seed in any::<u64>()) {
        let g = scaled_adapter(seed, 4, 8, 3, 1.0);
        let b = random_batch(seed, 4, 6, 4, 3);
        let std = infonce_batch(&g, &b, 0.1, LossForm::Standard, true).unwrap();
        let lit = infonce_batch(&g, &b, 0.1, LossForm::Literal, true).unwrap();
        prop_assert!(std >= 0.0);
        prop_assert!(lit <= std + 1e-12);
    }

    #[test]
    fn candidates_are_clipped_sorted_unique(k in 1usize..6, n in 0usize..5, l in 0usize..40, layers in 1usize..40) {
        let c = candidate_layers(k, n, l, layers);
        prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(c.iter().all(|&x| x <= layers));
        prop_assert!(c.contains(&l.min(layers)));
        prop_assert!(c.len() <= 2 * n + 1);
    }
}
