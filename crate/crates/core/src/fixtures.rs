//! Bundled reference data: the fifteen expert-coding sentences with their
//! published difficulty and readability values.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// One reference sentence and the values reported for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceQuote {
    pub id: String,
    pub text: String,
    pub length: usize,
    pub assumed_difficulty: u8,
    pub mean_difficulty: f64,
    pub flesch_reading_ease: f64,
    pub coleman_liau: f64,
    pub ari: f64,
    pub difficult_words: usize,
    pub syllables: usize,
}

const REFERENCE_QUOTES_JSON: &str = include_str!("../data/reference_quotes.json");

pub fn reference_quotes() -> &'static [ReferenceQuote] {
    static QUOTES: OnceLock<Vec<ReferenceQuote>> = OnceLock::new();
    QUOTES.get_or_init(|| serde_json::from_str(REFERENCE_QUOTES_JSON).expect("bundled reference quotes parse"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_quotes() {
        let q = reference_quotes();
        assert_eq!(q.len(), 15);
        assert_eq!(q[0].id, "Quote1");
        assert_eq!(q[0].text, "She doesn't always understand correctly what I say.");
        assert!(q[3].text.contains('\u{2019}'));
    }
}
