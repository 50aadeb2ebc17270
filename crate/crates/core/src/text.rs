//! Word-level tokenizer and closed vocabulary shared by the language model,
//! BM25 and the document encoder.

use std::collections::{BTreeMap, HashMap};

/// Reserved id for out-of-vocabulary words.
pub const UNK_ID: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Word ↔ id map; id 0 is always [`UNK_TOKEN`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary over `words` (after UNK), in the given order. Duplicates
    /// keep their first position.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = vec![UNK_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(UNK_TOKEN.to_string(), UNK_ID);
        for w in words {
            let w = w.into();
            if !index.contains_key(&w) {
                index.insert(w.clone(), list.len());
                list.push(w);
            }
        }
        Self { words: list, index }
    }

    /// Builds from raw texts: words ranked by frequency (desc), then
    /// alphabetically, keeping at most `max_size - 1` of them.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in tokenize(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(
            ranked
                .into_iter()
                .take(max_size.saturating_sub(1))
                .map(|(w, _)| w),
        )
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(UNK_TOKEN, String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.words).expect("string list serializes")
    }

    /// Inverse of [`Vocabulary::to_json`]; the first word must be UNK.
    pub fn from_json(s: &str) -> Result<Self, String> {
        let words: Vec<String> = serde_json::from_str(s).map_err(|e| e.to_string())?;
        match words.first() {
            Some(w) if w == UNK_TOKEN => Ok(Self::from_words(words.into_iter().skip(1))),
            _ => Err(format!("vocabulary must start with `{UNK_TOKEN}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_rules() {
        assert_eq!(
            tokenize("What is the date of birth of Mina Gerhardsen's father?"),
            vec!["what", "is", "the", "date", "of", "birth", "of", "mina", "gerhardsens", "father"]
        );
        assert_eq!(tokenize("  13 June,  1946. "), vec!["13", "june", "1946"]);
        assert!(tokenize("?!.,").is_empty());
    }

    #[test]
    fn vocabulary_roundtrip_and_unk() {
        let v = Vocabulary::build(["b a a", "c a b"], 10);
        assert_eq!(v.words(), &["<unk>", "a", "b", "c"]);
        assert_eq!(v.encode("A zzz c"), vec![1, UNK_ID, 3]);
        assert_eq!(v.decode(&[1, 0]), "a <unk>");
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back.id("c"), 3);
        assert!(Vocabulary::from_json(r#"["a"]"#).is_err());
    }

    #[test]
    fn vocabulary_cap_keeps_most_frequent() {
        let v = Vocabulary::build(["x x x y y z"], 3);
        assert_eq!(v.words(), &["<unk>", "x", "y"]);
    }
}
