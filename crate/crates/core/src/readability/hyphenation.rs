//! Liang-style hyphenation over a Hunspell/LibreOffice `hyph_*.dic` pattern
//! file. Syllables are counted as hyphenation points plus one.

use std::collections::HashMap;
use std::sync::OnceLock;

const EN_US_PATTERNS: &str = include_str!("../../data/hyph_en_US.dic");

const IGNORED_PREFIXES: [&str; 6] =
    ["%", "#", "LEFTHYPHENMIN", "RIGHTHYPHENMIN", "COMPOUNDLEFTHYPHENMIN", "COMPOUNDRIGHTHYPHENMIN"];

#[derive(Debug, Clone)]
pub struct HyphenationPatterns {
    /// Letter sequence -> (offset of first non-zero value, values).
    patterns: HashMap<String, (usize, Vec<u8>)>,
    max_len: usize,
    left_min: usize,
    right_min: usize,
}

impl HyphenationPatterns {
    /// Parses a pattern file. The first line names the encoding and is skipped.
    pub fn parse(source: &str) -> Self {
        let mut patterns = HashMap::new();
        for line in source.lines().skip(1) {
            let line = line.trim();
            if line.is_empty() || IGNORED_PREFIXES.iter().any(|p| line.starts_with(p)) {
                continue;
            }
            let mut letters = String::new();
            let mut values = Vec::new();
            let mut pending = 0u8;
            for c in line.chars() {
                if let Some(d) = c.to_digit(10) {
                    pending = d as u8;
                } else {
                    values.push(pending);
                    letters.push(c);
                    pending = 0;
                }
            }
            values.push(pending);
            let Some(start) = values.iter().position(|&v| v != 0) else { continue };
            let end = values.iter().rposition(|&v| v != 0).expect("has a non-zero value") + 1;
            patterns.insert(letters, (start, values[start..end].to_vec()));
        }
        let max_len = patterns.keys().map(|k| k.chars().count()).max().unwrap_or(0);
        Self { patterns, max_len, left_min: 2, right_min: 2 }
    }

    /// The bundled US English patterns.
    pub fn en_us() -> &'static Self {
        static EN_US: OnceLock<HyphenationPatterns> = OnceLock::new();
        EN_US.get_or_init(|| Self::parse(EN_US_PATTERNS))
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// Character offsets at which `word` may be hyphenated, excluding points
    /// closer than two characters to either end.
    pub fn positions(&self, word: &str) -> Vec<usize> {
        let word: Vec<char> = word.to_lowercase().chars().collect();
        let mut pointed = Vec::with_capacity(word.len() + 2);
        pointed.push('.');
        pointed.extend(&word);
        pointed.push('.');

        let mut points = vec![0u8; pointed.len() + 1];
        let mut key = String::new();
        for i in 0..pointed.len().saturating_sub(1) {
            let stop = (i + self.max_len).min(pointed.len());
            key.clear();
            for &c in &pointed[i..stop] {
                key.push(c);
                if let Some((offset, values)) = self.patterns.get(&key) {
                    for (k, &v) in values.iter().enumerate() {
                        let slot = &mut points[i + offset + k];
                        *slot = (*slot).max(v);
                    }
                }
            }
        }

        let n = word.len();
        points
            .iter()
            .enumerate()
            .filter(|&(_, &v)| v % 2 == 1)
            .map(|(i, _)| i - 1)
            .filter(|&p| p >= self.left_min && p + self.right_min <= n)
            .collect()
    }

    pub fn syllables(&self, word: &str) -> usize {
        self.positions(word).len() + 1
    }

    /// Inserts `-` at every hyphenation point; handy for inspecting output.
    pub fn hyphenate(&self, word: &str) -> String {
        let cuts = self.positions(word);
        let mut out = String::new();
        for (i, c) in word.chars().enumerate() {
            if cuts.contains(&i) {
                out.push('-');
            }
            out.push(c);
        }
        out
    }
}
