//! Lexicon-based readability: word, sentence and syllable counts plus the
//! Flesch Reading Ease, Coleman–Liau and Automated Readability indices.

pub mod hyphenation;

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::fixtures::{reference_quotes, ReferenceQuote};
pub use hyphenation::HyphenationPatterns;

const EASY_WORDS: &str = include_str!("../data/easy_words.txt");

#[derive(Debug, thiserror::Error)]
pub enum ReadabilityError {
    #[error("text is empty")]
    EmptyText,
    #[error("cannot read easy-word list {path}: {source}")]
    EasyWords { path: String, source: std::io::Error },
    #[error("unknown syllable method {0:?} (expected hyphenation or vowel-groups)")]
    UnknownSyllableMethod(String),
}

/// How syllables are counted when building a profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyllableMethod {
    /// Hyphenation points from the bundled US English pattern file, plus one.
    #[default]
    Hyphenation,
    /// The vowel-group heuristic of [`count_syllables`].
    VowelGroups,
}

impl FromStr for SyllableMethod {
    type Err = ReadabilityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hyphenation" => Ok(Self::Hyphenation),
            "vowel-groups" | "heuristic" => Ok(Self::VowelGroups),
            other => Err(ReadabilityError::UnknownSyllableMethod(other.to_string())),
        }
    }
}

/// Familiar words that never count as difficult.
#[derive(Debug, Clone, PartialEq)]
pub struct EasyWords(HashSet<String>);

impl EasyWords {
    /// The bundled Dale–Chall familiar-word list.
    pub fn builtin() -> &'static Self {
        static BUILTIN: OnceLock<EasyWords> = OnceLock::new();
        BUILTIN.get_or_init(|| Self::parse(EASY_WORDS))
    }

    /// One word per line (or whitespace separated); case-insensitive.
    pub fn parse(list: &str) -> Self {
        Self(list.split_whitespace().map(|w| normalize_apostrophes(&w.to_lowercase())).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReadabilityError> {
        let path = path.as_ref();
        std::fs::read_to_string(path)
            .map(|s| Self::parse(&s))
            .map_err(|source| ReadabilityError::EasyWords { path: path.display().to_string(), source })
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadabilityProfile {
    pub char_length: usize,
    pub word_count: usize,
    pub sentence_count: usize,
    pub syllable_count: usize,
    pub difficult_word_count: usize,
    pub letter_count: usize,
    pub non_space_char_count: usize,
    pub flesch_reading_ease: f64,
    pub coleman_liau: f64,
    pub ari: f64,
}

impl ReadabilityProfile {
    /// Recomputes the three indices from the stored counts.
    pub fn from_counts(
        char_length: usize,
        word_count: usize,
        sentence_count: usize,
        syllable_count: usize,
        difficult_word_count: usize,
        letter_count: usize,
        non_space_char_count: usize,
    ) -> Self {
        let w = word_count as f64;
        let s = sentence_count as f64;
        let words_per_sentence = w / s;
        let flesch_reading_ease = 206.835 - 1.015 * words_per_sentence - 84.6 * (syllable_count as f64 / w);
        let letters_per_100 = letter_count as f64 / w * 100.0;
        let sentences_per_100 = s / w * 100.0;
        let coleman_liau = 0.0588 * letters_per_100 - 0.296 * sentences_per_100 - 15.8;
        let ari = 4.71 * (non_space_char_count as f64 / w) + 0.5 * words_per_sentence - 21.43;
        Self {
            char_length,
            word_count,
            sentence_count,
            syllable_count,
            difficult_word_count,
            letter_count,
            non_space_char_count,
            flesch_reading_ease,
            coleman_liau,
            ari,
        }
    }
}

/// Profile builder with a chosen syllable method and easy-word list.
#[derive(Debug, Clone)]
pub struct Analyzer<'a> {
    pub syllables: SyllableMethod,
    pub easy_words: &'a EasyWords,
}

impl Default for Analyzer<'static> {
    fn default() -> Self {
        Self { syllables: SyllableMethod::default(), easy_words: EasyWords::builtin() }
    }
}

impl<'a> Analyzer<'a> {
    pub fn new(syllables: SyllableMethod, easy_words: &'a EasyWords) -> Self {
        Self { syllables, easy_words }
    }

    pub fn syllables_in(&self, word: &str) -> usize {
        match self.syllables {
            SyllableMethod::Hyphenation => HyphenationPatterns::en_us().syllables(word),
            SyllableMethod::VowelGroups => count_syllables(word),
        }
    }

    pub fn profile(&self, text: &str) -> Result<ReadabilityProfile, ReadabilityError> {
        if text.trim().is_empty() {
            return Err(ReadabilityError::EmptyText);
        }
        let words = words(text);
        if words.is_empty() {
            return Err(ReadabilityError::EmptyText);
        }
        let mut syllables = 0;
        let mut difficult = BTreeSet::new();
        for w in &words {
            let n = self.syllables_in(w);
            syllables += n;
            if n >= 2 && !self.easy_words.contains(w) {
                difficult.insert(w.to_lowercase());
            }
        }
        Ok(ReadabilityProfile::from_counts(
            text.chars().count(),
            words.len(),
            count_sentences(text),
            syllables,
            difficult.len(),
            text.chars().filter(|c| c.is_alphabetic()).count(),
            text.chars().filter(|c| !c.is_whitespace()).count(),
        ))
    }
}

/// Profile with the default analyzer (hyphenation syllables, bundled list).
pub fn profile(text: &str) -> Result<ReadabilityProfile, ReadabilityError> {
    Analyzer::default().profile(text)
}

fn normalize_apostrophes(s: &str) -> String {
    s.replace('\u{2019}', "'")
}

/// Whitespace-separated tokens with leading and trailing punctuation removed.
/// Interior apostrophes and hyphens are kept; curly apostrophes become `'`.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|tok| normalize_apostrophes(tok.trim_matches(|c: char| !c.is_alphanumeric())))
        .filter(|w| !w.is_empty())
        .collect()
}

const TERMINATORS: [char; 4] = ['.', '!', '?', '\u{2026}'];
const CLOSERS: [char; 8] = ['"', '\'', '\u{201D}', '\u{2019}', ')', ']', '}', '\u{00BB}'];

/// Sentences end at a run of `. ! ? …` that is followed by whitespace, a
/// closing quote or bracket, or the end of the text. Segments without any
/// word are not counted; nonempty text has at least one sentence.
pub fn count_sentences(text: &str) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0;
    let mut segment = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if TERMINATORS.contains(&c) {
            let start = i;
            while i < chars.len() && TERMINATORS.contains(&chars[i]) {
                i += 1;
            }
            let ends = i == chars.len() || chars[i].is_whitespace() || CLOSERS.contains(&chars[i]);
            if ends {
                if !words(&segment).is_empty() {
                    count += 1;
                }
                segment.clear();
            } else {
                segment.extend(&chars[start..i]);
            }
            continue;
        }
        segment.push(c);
        i += 1;
    }
    if !words(&segment).is_empty() {
        count += 1;
    }
    count.max(1)
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y')
}

/// Vowel-group syllable heuristic.
///
/// Counts maximal runs of `aeiouy` (a leading `y` is a consonant), drops a
/// silent final `e` (but not consonant + `le`), a silent `e` in `-es`/`-ed`
/// endings, and adds one for `n't` after a consonant. Hyphenated parts are
/// counted separately. Never returns less than 1.
pub fn count_syllables(word: &str) -> usize {
    let word = normalize_apostrophes(&word.to_lowercase());
    word.split('-').map(syllables_in_part).sum::<usize>().max(1)
}

fn syllables_in_part(part: &str) -> usize {
    let letters: String = part.chars().filter(|c| c.is_alphabetic() || *c == '\'').collect();
    let core: Vec<char> = letters.chars().filter(|c| c.is_alphabetic()).collect();
    if core.is_empty() {
        return 0;
    }
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < core.len() {
        if is_vowel(core[i]) && !(i == 0 && core[i] == 'y') {
            let start = i;
            while i < core.len() && is_vowel(core[i]) {
                i += 1;
            }
            groups.push((start, i));
        } else {
            i += 1;
        }
    }
    let n = core.len();
    let mut count = groups.len();
    if let (true, Some(&(a, b))) = (groups.len() > 1, groups.last()) {
        let lone_e_at = |pos: usize| a == pos && b == pos + 1 && core[pos] == 'e';
        let silent_final_e = lone_e_at(n - 1) && !(n >= 3 && core[n - 2] == 'l' && !is_vowel(core[n - 3]));
        let silent_es = n > 3
            && core[n - 1] == 's'
            && lone_e_at(n - 2)
            && !matches!(core[n - 3], 's' | 'x' | 'z' | 'c' | 'g')
            && !(core[n - 3] == 'h' && matches!(core[n - 4], 'c' | 's'));
        let silent_ed = n > 3 && core[n - 1] == 'd' && lone_e_at(n - 2) && !matches!(core[n - 3], 't' | 'd');
        if silent_final_e || silent_es || silent_ed {
            count -= 1;
        }
    }
    let lc: Vec<char> = letters.chars().collect();
    if lc.len() > 3 && letters.ends_with("n't") && !is_vowel(lc[lc.len() - 4]) && lc[lc.len() - 4] != '\'' {
        count += 1;
    }
    count.max(1)
}

/// Measured against published values for one reference sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceRow {
    pub id: String,
    pub profile: ReadabilityProfile,
    pub expected_length: usize,
    pub expected_syllables: usize,
    pub expected_difficult_words: usize,
    pub expected_fre: f64,
    pub expected_cli: f64,
    pub expected_ari: f64,
}

impl ConformanceRow {
    pub fn length_delta(&self) -> i64 {
        self.profile.char_length as i64 - self.expected_length as i64
    }

    pub fn syllable_rel_error(&self) -> f64 {
        (self.profile.syllable_count as f64 - self.expected_syllables as f64) / self.expected_syllables as f64
    }

    pub fn fre_delta(&self) -> f64 {
        self.profile.flesch_reading_ease - self.expected_fre
    }

    pub fn cli_delta(&self) -> f64 {
        self.profile.coleman_liau - self.expected_cli
    }

    pub fn ari_delta(&self) -> f64 {
        self.profile.ari - self.expected_ari
    }

    /// Human-readable list of every value that differs from the table.
    pub fn deviations(&self) -> Vec<String> {
        let p = &self.profile;
        let mut out = Vec::new();
        if p.char_length != self.expected_length {
            out.push(format!("length {} vs {}", p.char_length, self.expected_length));
        }
        if p.syllable_count != self.expected_syllables {
            out.push(format!(
                "syllables {} vs {} ({:+.1}%)",
                p.syllable_count,
                self.expected_syllables,
                100.0 * self.syllable_rel_error()
            ));
        }
        if p.difficult_word_count != self.expected_difficult_words {
            out.push(format!("difficult words {} vs {}", p.difficult_word_count, self.expected_difficult_words));
        }
        for (name, got, want) in [
            ("FRE", p.flesch_reading_ease, self.expected_fre),
            ("CLI", p.coleman_liau, self.expected_cli),
            ("ARI", p.ari, self.expected_ari),
        ] {
            if (got - want).abs() >= 0.005 {
                out.push(format!("{name} {got:.2} vs {want:.2} ({:+.2})", got - want));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub syllable_method: SyllableMethod,
    pub rows: Vec<ConformanceRow>,
}

impl ConformanceReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("readability conformance ({:?} syllables)\n", self.syllable_method);
        for row in &self.rows {
            let dev = row.deviations();
            if dev.is_empty() {
                let _ = writeln!(out, "{}: exact", row.id);
            } else {
                let _ = writeln!(out, "{}: {}", row.id, dev.join("; "));
            }
        }
        out
    }
}

/// Profiles every bundled reference sentence and compares with the table.
pub fn conformance_report(analyzer: &Analyzer<'_>) -> ConformanceReport {
    conformance_report_for(analyzer, reference_quotes())
}

pub fn conformance_report_for(analyzer: &Analyzer<'_>, quotes: &[ReferenceQuote]) -> ConformanceReport {
    let rows = quotes
        .iter()
        .map(|q| ConformanceRow {
            id: q.id.clone(),
            profile: analyzer.profile(&q.text).expect("reference quotes are nonempty"),
            expected_length: q.length,
            expected_syllables: q.syllables,
            expected_difficult_words: q.difficult_words,
            expected_fre: q.flesch_reading_ease,
            expected_cli: q.coleman_liau,
            expected_ari: q.ari,
        })
        .collect();
    ConformanceReport { syllable_method: analyzer.syllables, rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const QUOTE1: &str = "She doesn't always understand correctly what I say.";
    const QUOTE2: &str = "I can ask the voice assistant what the weather is like.";

    #[test]
    fn quote1_profile() {
        let p = profile(QUOTE1).unwrap();
        assert_eq!(p.char_length, 51);
        assert_eq!(p.word_count, 8);
        assert_eq!(p.sentence_count, 1);
        assert_eq!(p.syllable_count, 14);
        assert_eq!(p.difficult_word_count, 1);
    }

    #[test]
    fn quote2_profile() {
        let p = profile(QUOTE2).unwrap();
        assert_eq!(p.char_length, 55);
        assert_eq!(p.syllable_count, 14);
        assert_eq!(p.difficult_word_count, 1);
    }

    #[test]
    fn heuristic_agrees_on_short_quotes() {
        let a = Analyzer::new(SyllableMethod::VowelGroups, EasyWords::builtin());
        assert_eq!(a.profile(QUOTE1).unwrap().syllable_count, 14);
        assert_eq!(a.profile(QUOTE2).unwrap().syllable_count, 14);
    }

    #[test]
    fn cat() {
        let p = profile("Cat.").unwrap();
        assert_eq!((p.word_count, p.sentence_count, p.syllable_count), (1, 1, 1));
        assert_relative_eq!(p.flesch_reading_ease, 121.22, epsilon = 1e-9);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(profile("  \n"), Err(ReadabilityError::EmptyText)));
        assert!(matches!(profile("..."), Err(ReadabilityError::EmptyText)));
    }

    #[test]
    fn syllable_examples() {
        assert_eq!(count_syllables("say"), 1);
        assert_eq!(count_syllables("understand"), 3);
        assert_eq!(count_syllables("e"), 1);
        assert_eq!(count_syllables("doesn't"), 2);
        assert_eq!(count_syllables("don't"), 1);
        assert_eq!(count_syllables("table"), 2);
        assert_eq!(count_syllables("make"), 1);
        assert_eq!(count_syllables("free"), 1);
        assert_eq!(count_syllables("comes"), 1);
        assert_eq!(count_syllables("boxes"), 2);
        assert_eq!(count_syllables("changed"), 1);
        assert_eq!(count_syllables("wanted"), 2);
        assert_eq!(count_syllables("yes"), 1);
        assert_eq!(count_syllables("well-paid"), 2);
    }

    #[test]
    fn sentence_rules() {
        assert_eq!(count_sentences("Hi there. How are you? Fine!"), 3);
        assert_eq!(count_sentences("Wait... what"), 2);
        assert_eq!(count_sentences("Wait\u{2026} what"), 2);
        assert_eq!(count_sentences("...there are memes"), 1);
        assert_eq!(count_sentences("version 1.5 is out"), 1);
        assert_eq!(count_sentences("He said \"stop.\" Then left."), 2);
        assert_eq!(count_sentences("no terminator"), 1);
    }

    #[test]
    fn word_rules() {
        assert_eq!(words("(it's a very-large laptop) ok!"), ["it's", "a", "very-large", "laptop", "ok"]);
        assert_eq!(words("I\u{2019}d lay"), ["I'd", "lay"]);
        assert!(words(" -- ... ").is_empty());
    }

    #[test]
    fn difficult_words_are_distinct() {
        let p = profile("correctly correctly Correctly").unwrap();
        assert_eq!(p.difficult_word_count, 1);
    }

    #[test]
    fn easy_word_override() {
        let list = EasyWords::parse("correctly\nassistant");
        let a = Analyzer::new(SyllableMethod::Hyphenation, &list);
        assert_eq!(a.profile(QUOTE1).unwrap().difficult_word_count, 3);
    }

    #[test]
    fn method_parse() {
        assert_eq!("vowel-groups".parse::<SyllableMethod>().unwrap(), SyllableMethod::VowelGroups);
        assert!("x".parse::<SyllableMethod>().is_err());
    }
}
