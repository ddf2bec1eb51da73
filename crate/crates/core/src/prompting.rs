//! Prompt templates, few-shot exemplar selection, prompt rendering and
//! cleaning of raw model output into a code.
//!
//! Rendered layout (the instruction keeps or drops its final period depending
//! on the [`Terminator`]):
//!
//! ```text
//! <instruction>
//! Here are examples:        <- only when exemplars are given
//! Sentence: <quote 1>
//! Code: <code 1>
//! ...
//! Sentence: <target quote>
//! Code:
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::QuoteCodePair;

const BUILTIN_TEMPLATES: &str = include_str!("../data/prompts.toml");

/// Lead-in line placed before few-shot exemplars.
pub const EXAMPLES_HEADER: &str = "Here are examples:";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("quote is empty")]
    EmptyQuote,
    #[error("requested {k} examples but the pool only has {pool}")]
    NotEnoughExamples { k: usize, pool: usize },
    #[error("shot count must be one of 0, 1, 3, 5; got {0}")]
    InvalidShotCount(usize),
    #[error("model output is empty after cleaning")]
    EmptyGeneration,
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template file: {0}")]
    TemplateFile(String),
    #[error("an embedded quote or code repeats the instruction text, which makes the prompt ambiguous")]
    InstructionEmbedded,
}

/// How the instruction line ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Terminator {
    #[default]
    Period,
    #[serde(alias = "newline")]
    LineBreak,
}

impl Terminator {
    pub fn as_str(self) -> &'static str {
        match self {
            Terminator::Period => "period",
            Terminator::LineBreak => "linebreak",
        }
    }
}

impl fmt::Display for Terminator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Terminator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "period" | "." => Ok(Self::Period),
            "linebreak" | "newline" | "\\n" => Ok(Self::LineBreak),
            other => Err(format!("unknown terminator {other:?}")),
        }
    }
}

/// Entry of the template data file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub id: String,
    #[serde(default)]
    pub name: String,
    pub text: String,
}

/// A template bound to a terminator variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
    pub terminator: Terminator,
}

impl PromptTemplate {
    /// The instruction line as it appears in the rendered prompt.
    pub fn instruction(&self) -> &str {
        match self.terminator {
            Terminator::Period => &self.text,
            Terminator::LineBreak => self.text.strip_suffix('.').unwrap_or(&self.text),
        }
    }
}

#[derive(Debug, Deserialize)]
struct TemplateFile {
    template: Vec<TemplateSpec>,
}

/// The set of available templates, loaded from TOML.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateLibrary {
    templates: Vec<TemplateSpec>,
}

impl TemplateLibrary {
    /// The six built-in open-coding instructions, P1 to P6.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_TEMPLATES).expect("bundled templates parse")
    }

    pub fn from_toml_str(s: &str) -> Result<Self, PromptError> {
        let file: TemplateFile = toml::from_str(s).map_err(|e| PromptError::TemplateFile(e.to_string()))?;
        for (i, t) in file.template.iter().enumerate() {
            if t.text.trim().is_empty() {
                return Err(PromptError::TemplateFile(format!("template {i} has empty text")));
            }
            if file.template[..i].iter().any(|o| o.id == t.id) {
                return Err(PromptError::TemplateFile(format!("duplicate template id {:?}", t.id)));
            }
        }
        Ok(Self { templates: file.template })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let s = std::fs::read_to_string(path).map_err(|e| PromptError::TemplateFile(e.to_string()))?;
        Self::from_toml_str(&s)
    }

    pub fn specs(&self) -> &[TemplateSpec] {
        &self.templates
    }

    pub fn get(&self, id: &str, terminator: Terminator) -> Result<PromptTemplate, PromptError> {
        self.templates
            .iter()
            .find(|t| t.id == id)
            .map(|t| PromptTemplate { id: t.id.clone(), text: t.text.clone(), terminator })
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }
}

/// Number of in-context examples; one of 0, 1, 3 or 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct ShotCount(usize);

impl ShotCount {
    pub const ALLOWED: [usize; 4] = [0, 1, 3, 5];

    pub fn new(k: usize) -> Result<Self, PromptError> {
        if Self::ALLOWED.contains(&k) {
            Ok(Self(k))
        } else {
            Err(PromptError::InvalidShotCount(k))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for ShotCount {
    type Error = PromptError;

    fn try_from(k: usize) -> Result<Self, Self::Error> {
        Self::new(k)
    }
}

impl From<ShotCount> for usize {
    fn from(k: ShotCount) -> usize {
        k.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotConfig {
    pub k: ShotCount,
    pub selection_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub template_id: String,
    pub terminator: Terminator,
    pub shot_ids: Vec<String>,
}

/// Draws `k` exemplars uniformly without replacement. The pool is ordered by
/// id first, so the draw depends only on the pool's ids, `k` and `seed`.
/// Output is in draw order.
pub fn select_examples(pool: &[QuoteCodePair], k: usize, seed: u64) -> Result<Vec<QuoteCodePair>, PromptError> {
    if k > pool.len() {
        return Err(PromptError::NotEnoughExamples { k, pool: pool.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut sorted: Vec<&QuoteCodePair> = pool.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, sorted.len(), k)
        .into_iter()
        .map(|i| sorted[i].clone())
        .collect())
}

pub fn render_prompt(
    template: &PromptTemplate,
    quote: &str,
    examples: &[QuoteCodePair],
) -> Result<RenderedPrompt, PromptError> {
    if quote.trim().is_empty() {
        return Err(PromptError::EmptyQuote);
    }
    let instruction = template.instruction();
    let embedded = std::iter::once(quote)
        .chain(examples.iter().flat_map(|e| [e.quote.as_str(), e.code.as_str()]));
    for s in embedded {
        if s.contains(instruction) {
            return Err(PromptError::InstructionEmbedded);
        }
    }

    let mut text = String::with_capacity(instruction.len() + quote.len() + 32);
    text.push_str(instruction);
    text.push('\n');
    if !examples.is_empty() {
        text.push_str(EXAMPLES_HEADER);
        text.push('\n');
        for ex in examples {
            text.push_str("Sentence: ");
            text.push_str(&ex.quote);
            text.push_str("\nCode: ");
            text.push_str(&ex.code);
            text.push('\n');
        }
    }
    text.push_str("Sentence: ");
    text.push_str(quote);
    text.push_str("\nCode:");

    Ok(RenderedPrompt {
        text,
        template_id: template.id.clone(),
        terminator: template.terminator,
        shot_ids: examples.iter().map(|e| e.id.clone()).collect(),
    })
}

const QUOTE_PAIRS: [(char, char); 6] =
    [('"', '"'), ('\'', '\''), ('`', '`'), ('\u{201c}', '\u{201d}'), ('\u{2018}', '\u{2019}'), ('«', '»')];
const TERMINAL: [char; 6] = ['.', '!', '?', ';', ':', '\u{2026}'];

fn clean_step(s: &str) -> &str {
    let mut s = s.trim();
    s = s.lines().next().unwrap_or("").trim();
    for (open, close) in QUOTE_PAIRS {
        if s.chars().count() >= 2 && s.starts_with(open) && s.ends_with(close) {
            s = &s[open.len_utf8()..s.len() - close.len_utf8()];
            break;
        }
    }
    s.trim_end_matches(TERMINAL).trim()
}

/// Turns raw model text into a code: first non-blank line, trimmed, with
/// surrounding quotation marks and trailing terminal punctuation removed.
/// Applying it twice gives the same result as applying it once.
pub fn postprocess_code(raw: &str) -> Result<String, PromptError> {
    let mut current = raw;
    loop {
        let next = clean_step(current);
        if next == current {
            break;
        }
        current = next;
    }
    if current.is_empty() {
        Err(PromptError::EmptyGeneration)
    } else {
        Ok(current.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;

    fn p(id: &str, q: &str, c: &str) -> QuoteCodePair {
        QuoteCodePair { id: id.into(), quote: q.into(), code: c.into(), source: "s".into(), split: Split::Train }
    }

    #[test]
    fn builtin_library_has_six_prompts() {
        let lib = TemplateLibrary::builtin();
        assert_eq!(lib.specs().len(), 6);
        assert_eq!(lib.get("P1", Terminator::Period).unwrap().text, "Summarize the main idea of a sentence.");
        assert_eq!(lib.get("P6", Terminator::Period).unwrap().text, "What is the gist of this sentence?");
        assert!(matches!(lib.get("P9", Terminator::Period), Err(PromptError::UnknownTemplate(_))));
    }

    #[test]
    fn zero_shot_layout() {
        let t = TemplateLibrary::builtin().get("P1", Terminator::Period).unwrap();
        let r = render_prompt(&t, "X", &[]).unwrap();
        assert_eq!(r.text, "Summarize the main idea of a sentence.\nSentence: X\nCode:");
        assert!(r.shot_ids.is_empty());
    }

    #[test]
    fn one_shot_layout() {
        let t = TemplateLibrary::builtin().get("P1", Terminator::Period).unwrap();
        let r = render_prompt(&t, "X", &[p("e1", "q1", "c1")]).unwrap();
        assert_eq!(
            r.text,
            "Summarize the main idea of a sentence.\nHere are examples:\nSentence: q1\nCode: c1\nSentence: X\nCode:"
        );
        assert_eq!(r.shot_ids, ["e1"]);
    }

    #[test]
    fn terminator_variants() {
        let lib = TemplateLibrary::builtin();
        let period = lib.get("P3", Terminator::Period).unwrap();
        let newline = lib.get("P3", Terminator::LineBreak).unwrap();
        assert!(period.instruction().ends_with("thematic coding."));
        assert!(newline.instruction().ends_with("thematic coding"));
        let a = render_prompt(&period, "Q", &[]).unwrap().text;
        let b = render_prompt(&newline, "Q", &[]).unwrap().text;
        assert_eq!(a.replacen("coding.\n", "coding\n", 1), b);
    }

    #[test]
    fn empty_quote_rejected() {
        let t = TemplateLibrary::builtin().get("P1", Terminator::Period).unwrap();
        assert!(matches!(render_prompt(&t, "  ", &[]), Err(PromptError::EmptyQuote)));
    }

    #[test]
    fn instruction_inside_quote_rejected() {
        let t = TemplateLibrary::builtin().get("P6", Terminator::Period).unwrap();
        let err = render_prompt(&t, "He asked: What is the gist of this sentence?", &[]).unwrap_err();
        assert!(matches!(err, PromptError::InstructionEmbedded));
    }

    #[test]
    fn selection_edge_cases() {
        let pool: Vec<_> = (0..10).map(|i| p(&format!("id{i:02}"), "q", "c")).collect();
        assert!(select_examples(&pool, 0, 7).unwrap().is_empty());
        let a = select_examples(&pool, 3, 7).unwrap();
        assert_eq!(a, select_examples(&pool, 3, 7).unwrap());
        assert_eq!(a.len(), 3);
        assert!(matches!(select_examples(&pool[..2], 3, 7), Err(PromptError::NotEnoughExamples { k: 3, pool: 2 })));
    }

    #[test]
    fn full_pool_is_a_permutation() {
        let pool: Vec<_> = (0..5).map(|i| p(&format!("id{i}"), "q", "c")).collect();
        let picked = select_examples(&pool, 5, 11).unwrap();
        let mut ids: Vec<_> = picked.iter().map(|e| e.id.clone()).collect();
        ids.sort();
        assert_eq!(ids, ["id0", "id1", "id2", "id3", "id4"]);
    }

    #[test]
    fn selection_ignores_pool_order() {
        let pool: Vec<_> = (0..8).map(|i| p(&format!("id{i}"), "q", "c")).collect();
        let mut reversed = pool.clone();
        reversed.reverse();
        assert_eq!(select_examples(&pool, 3, 5).unwrap(), select_examples(&reversed, 3, 5).unwrap());
    }

    #[test]
    fn shot_count_validation() {
        assert!(ShotCount::new(3).is_ok());
        assert!(matches!(ShotCount::new(2), Err(PromptError::InvalidShotCount(2))));
    }

    #[test]
    fn postprocess_examples() {
        assert_eq!(postprocess_code("\"weather forecast\"\nExplanation...").unwrap(), "weather forecast");
        assert_eq!(postprocess_code("weather").unwrap(), "weather");
        assert!(matches!(postprocess_code("   \n"), Err(PromptError::EmptyGeneration)));
        assert_eq!(postprocess_code("\n  “Device Feature.”  ").unwrap(), "Device Feature");
        assert!(matches!(postprocess_code("\"...\""), Err(PromptError::EmptyGeneration)));
    }

    #[test]
    fn custom_template_file() {
        let lib = TemplateLibrary::from_toml_str("[[template]]\nid = \"X\"\ntext = \"Name the theme.\"\n").unwrap();
        assert_eq!(lib.get("X", Terminator::LineBreak).unwrap().instruction(), "Name the theme");
        assert!(TemplateLibrary::from_toml_str("[[template]]\nid = \"X\"\ntext = \"a\"\n[[template]]\nid = \"X\"\ntext = \"b\"\n").is_err());
    }
}
