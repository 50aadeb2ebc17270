//! Logit lens: read every captured hidden state through the unembedding and
//! follow how chosen tokens gain or lose probability with depth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::linalg::softmax_unchecked;
use crate::toy_lm::{argmax, Capture, ToyLm, ToyLmError};

#[derive(Debug, Error)]
pub enum LogitLensError {
    #[error("hidden state has {got} entries, model width is {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("hidden state has non-finite entries")]
    NonFinite,
    #[error("tracked token {token} out of range for vocabulary of {vocab_size}")]
    TrackedOutOfRange { token: usize, vocab_size: usize },
    #[error(transparent)]
    Model(#[from] ToyLmError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogitLensTrace {
    /// One distribution per captured state.
    pub distributions: Vec<Vec<f64>>,
    /// Token id → probability at each captured state.
    pub tracked: BTreeMap<usize, Vec<f64>>,
    pub argmax_per_layer: Vec<usize>,
    pub apply_final_norm: bool,
}

/// `softmax(W_U h)`, with the model's final norm applied to `h` first when
/// `apply_final_norm` is set.
pub fn lens_distribution(lm: &ToyLm, h: &[f64], apply_final_norm: bool) -> Result<Vec<f64>, LogitLensError> {
    if h.len() != lm.d_model() {
        return Err(LogitLensError::DimensionMismatch {
            got: h.len(),
            expected: lm.d_model(),
        });
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(LogitLensError::NonFinite);
    }
    Ok(softmax_unchecked(&lm.logits(h, apply_final_norm)))
}

pub fn token_trajectory(
    lm: &ToyLm,
    tokens: &[usize],
    tracked_ids: &[usize],
    apply_final_norm: bool,
) -> Result<LogitLensTrace, LogitLensError> {
    let vocab_size = lm.config().vocab_size;
    if let Some(&t) = tracked_ids.iter().find(|&&t| t >= vocab_size) {
        return Err(LogitLensError::TrackedOutOfRange { token: t, vocab_size });
    }
    let trace = lm.forward(tokens, Capture::Last)?;
    let distributions = trace
        .states
        .iter()
        .map(|h| lens_distribution(lm, h, apply_final_norm))
        .collect::<Result<Vec<_>, _>>()?;
    let tracked = tracked_ids
        .iter()
        .map(|&t| (t, distributions.iter().map(|p| p[t]).collect()))
        .collect();
    let argmax_per_layer = distributions.iter().map(|p| argmax(p)).collect();
    Ok(LogitLensTrace {
        distributions,
        tracked,
        argmax_per_layer,
        apply_final_norm,
    })
}

impl LogitLensTrace {
    pub fn num_states(&self) -> usize {
        self.distributions.len()
    }

    /// Plot-ready rows `layer,token_id,probability` for the tracked tokens.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,token_id,probability\n");
        for (token, probs) in &self.tracked {
            for (layer, p) in probs.iter().enumerate() {
                writeln!(out, "{layer},{token},{p:e}").expect("writing to a String");
            }
        }
        out
    }

    /// Layer at which a tracked token is most probable (first on ties).
    pub fn peak_layer(&self, token: usize) -> Option<usize> {
        let probs = self.tracked.get(&token)?;
        Some(argmax(probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::toy_lm::{init_toy_lm, ToyLmConfig};

    fn identity_lm() -> ToyLm {
        let config = ToyLmConfig {
            vocab_size: 2,
            d_model: 2,
            n_layers: 0,
            n_heads: 1,
            d_head: 2,
            max_seq: 4,
            seed: 0,
        };
        ToyLm::from_parts(config, Matrix::zeros(2, 2), vec![], vec![1.0; 2], Matrix::identity(2)).unwrap()
    }

    #[test]
    fn closed_form_two_thirds() {
        let p = lens_distribution(&identity_lm(), &[2f64.ln(), 0.0], false).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_state_is_uniform() {
        let lm = init_toy_lm(ToyLmConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_head: 4,
            max_seq: 8,
            seed: 1,
        })
        .unwrap();
        let p = lens_distribution(&lm, &[0.0; 8], false).unwrap();
        assert!(p.iter().all(|&x| (x - 0.1).abs() < 1e-15));
        assert!(matches!(
            lens_distribution(&lm, &[0.0; 3], false),
            Err(LogitLensError::DimensionMismatch { got: 3, expected: 8 })
        ));
    }

    #[test]
    fn empty_tracked_set_and_range_check() {
        let lm = identity_lm();
        let t = token_trajectory(&lm, &[1], &[], true).unwrap();
        assert!(t.tracked.is_empty());
        assert_eq!(t.num_states(), 1);
        assert_eq!(t.argmax_per_layer.len(), 1);
        assert!(matches!(
            token_trajectory(&lm, &[1], &[2], true),
            Err(LogitLensError::TrackedOutOfRange { token: 2, .. })
        ));
    }

    #[test]
    fn csv_layout() {
        let lm = identity_lm();
        let t = token_trajectory(&lm, &[0], &[1], false).unwrap();
        let csv = t.to_csv();
        assert_eq!(csv.lines().next(), Some("layer,token_id,probability"));
        assert_eq!(csv.lines().count(), 2);
    }
}
