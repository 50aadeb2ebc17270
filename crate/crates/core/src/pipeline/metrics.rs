//! Retrieval recall and answer containment.

use std::collections::HashSet;

use crate::retrieval::RetrievalResult;

use super::PipelineError;

/// `|retrieved ∩ gold| / |gold|` over the ranked list as returned.
pub fn recall_at_k(retrieved: &RetrievalResult, gold_ids: &[String]) -> Result<f64, PipelineError> {
    let gold: HashSet<&str> = gold_ids.iter().map(String::as_str).collect();
    if gold.is_empty() {
        return Err(PipelineError::EmptyGold);
    }
    let found: HashSet<&str> = retrieved.ids().filter(|id| gold.contains(id)).collect();
    Ok(found.len() as f64 / gold.len() as f64)
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Case-insensitive containment after collapsing whitespace runs. An empty
/// gold answer never matches.
pub fn accuracy_contains(prediction: &str, gold: &str) -> bool {
    let gold = normalize(gold);
    !gold.is_empty() && normalize(prediction).contains(&gold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(ids: &[&str]) -> RetrievalResult {
        RetrievalResult {
            ranked: ids.iter().map(|s| (s.to_string(), 0.0)).collect(),
            k_requested: ids.len().max(1),
        }
    }

    fn gold(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn recall_table() {
        assert_eq!(recall_at_k(&result(&["A", "C"]), &gold(&["A", "B"])).unwrap(), 0.5);
        assert_eq!(recall_at_k(&result(&["B", "x", "A"]), &gold(&["A", "B"])).unwrap(), 1.0);
        assert_eq!(recall_at_k(&result(&["x", "y"]), &gold(&["A"])).unwrap(), 0.0);
        assert_eq!(recall_at_k(&result(&[]), &gold(&["A"])).unwrap(), 0.0);
        assert!(matches!(recall_at_k(&result(&["A"]), &[]), Err(PipelineError::EmptyGold)));
    }

    #[test]
    fn containment_table() {
        assert!(accuracy_contains("the answer is 13 june 1946", "13 June 1946"));
        assert!(!accuracy_contains("unknown", "Rune Gerhardsen"));
        assert!(accuracy_contains("Rune  Gerhardsen", "rune gerhardsen"));
        assert!(!accuracy_contains("anything", "  "));
    }
}
