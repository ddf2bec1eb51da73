//! Lexical (ROUGE-1/2/L) and embedding-based (BERTScore-style greedy
//! matching) similarity between a generated code and the golden code.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::stats::MeanStd;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("{0} token set is empty")]
    EmptyTokenSet(&'static str),
    #[error("{side} token {index} has a zero-norm embedding")]
    DegenerateVector { side: &'static str, index: usize },
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("no scores to aggregate")]
    NothingToAggregate,
}

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// F1 is pinned to 0 when precision + recall is 0.
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall != 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1 }
    }

    fn from_overlap(overlap: usize, candidate_units: usize, reference_units: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Self::new(ratio(overlap, candidate_units), ratio(overlap, reference_units))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
}

pub type BertScoreTriple = Prf;

/// Lowercases and splits on every maximal run of non-alphanumeric characters.
pub fn tokenize_for_rouge(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap: each candidate n-gram counts at most as many times
/// as it occurs in the reference.
fn ngram_overlap(candidate: &[String], reference: &[String], n: usize) -> usize {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    cand.iter().map(|(gram, &c)| c.min(refc.get(gram).copied().unwrap_or(0))).sum()
}

/// Length of the longest common subsequence, O(|a|*|b|) time and O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge(candidate: &str, reference: &str) -> RougeScores {
    rouge_tokens(&tokenize_for_rouge(candidate), &tokenize_for_rouge(reference))
}

pub fn rouge_tokens(cand: &[String], refr: &[String]) -> RougeScores {
    if cand.is_empty() || refr.is_empty() {
        return RougeScores::default();
    }
    let units = |t: &[String], n: usize| t.len().saturating_sub(n - 1);
    RougeScores {
        rouge1: Prf::from_overlap(ngram_overlap(cand, refr, 1), units(cand, 1), units(refr, 1)),
        rouge2: Prf::from_overlap(ngram_overlap(cand, refr, 2), units(cand, 2), units(refr, 2)),
        rouge_l: Prf::from_overlap(lcs_len(cand, refr), cand.len(), refr.len()),
    }
}

/// Tokens with one embedding vector each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddingSet {
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl TokenEmbeddingSet {
    /// Checks that tokens and vectors line up and share one non-zero dimension.
    pub fn new(tokens: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self, String> {
        if tokens.len() != vectors.len() {
            return Err(format!("{} tokens but {} vectors", tokens.len(), vectors.len()));
        }
        if let Some(first) = vectors.first() {
            if first.is_empty() {
                return Err("embedding dimension is 0".into());
            }
            if vectors.iter().any(|v| v.len() != first.len()) {
                return Err("vectors have differing dimensions".into());
            }
        }
        Ok(Self { tokens, vectors })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.vectors.first().map(Vec::len)
    }
}

/// Optional BERTScore refinements. Both are off by default.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BertScoreOptions {
    /// Per-token importance weights; tokens missing from the map weigh 1.
    pub idf: Option<HashMap<String, f64>>,
    /// Rescale each score as `(s - b) / (1 - b)`.
    pub baseline: Option<f64>,
}

fn unit_vectors(set: &TokenEmbeddingSet, side: &'static str) -> Result<Vec<Vec<f64>>, MetricError> {
    set.vectors
        .iter()
        .enumerate()
        .map(|(index, v)| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                Err(MetricError::DegenerateVector { side, index })
            } else {
                Ok(v.iter().map(|x| x / norm).collect())
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Greedy-matching similarity: each token is matched to its most similar
/// token (cosine) on the other side. Recall averages over reference tokens,
/// precision over candidate tokens.
pub fn bertscore(cand: &TokenEmbeddingSet, refr: &TokenEmbeddingSet) -> Result<BertScoreTriple, MetricError> {
    bertscore_with(cand, refr, &BertScoreOptions::default())
}

pub fn bertscore_with(
    cand: &TokenEmbeddingSet,
    refr: &TokenEmbeddingSet,
    options: &BertScoreOptions,
) -> Result<BertScoreTriple, MetricError> {
    if cand.is_empty() {
        return Err(MetricError::EmptyTokenSet("candidate"));
    }
    if refr.is_empty() {
        return Err(MetricError::EmptyTokenSet("reference"));
    }
    let (dc, dr) = (cand.dim().unwrap_or(0), refr.dim().unwrap_or(0));
    if dc != dr {
        return Err(MetricError::DimensionMismatch(dc, dr));
    }
    let cu = unit_vectors(cand, "candidate")?;
    let ru = unit_vectors(refr, "reference")?;
    let sim: Vec<Vec<f64>> = cu.iter().map(|c| ru.iter().map(|r| dot(c, r)).collect()).collect();

    let weight = |tok: &str| options.idf.as_ref().and_then(|m| m.get(tok).copied()).unwrap_or(1.0);
    let weighted_mean = |pairs: &mut dyn Iterator<Item = (f64, f64)>| {
        let (num, den) = pairs.fold((0.0, 0.0), |(n, d), (w, s)| (n + w * s, d + w));
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    };

    let precision = weighted_mean(&mut cand.tokens.iter().enumerate().map(|(i, t)| {
        (weight(t), sim[i].iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }));
    let recall = weighted_mean(&mut refr.tokens.iter().enumerate().map(|(j, t)| {
        (weight(t), sim.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
    }));

    let (precision, recall) = match options.baseline {
        Some(b) if b != 1.0 => ((precision - b) / (1.0 - b), (recall - b) / (1.0 - b)),
        _ => (precision, recall),
    };
    Ok(Prf::new(precision, recall))
}

/// Metrics for one candidate/reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairScores {
    pub rouge: RougeScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bertscore: Option<BertScoreTriple>,
}

/// Mean and population standard deviation of every metric component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n: usize,
    pub bert_precision: Option<MeanStd>,
    pub bert_recall: Option<MeanStd>,
    pub bert_f1: Option<MeanStd>,
    pub rouge1: PrfSummary,
    pub rouge2: PrfSummary,
    #[serde(rename = "rougeL")]
    pub rouge_l: PrfSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfSummary {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

fn summarize(values: impl Iterator<Item = Prf> + Clone) -> PrfSummary {
    let col = |f: fn(&Prf) -> f64| MeanStd::of(&values.clone().map(|p| f(&p)).collect::<Vec<_>>()).expect("nonempty");
    PrfSummary { precision: col(|p| p.precision), recall: col(|p| p.recall), f1: col(|p| p.f1) }
}

/// Aggregates per-pair scores. BERTScore columns are present only when every
/// pair carries a BERTScore.
pub fn aggregate_scores(per_pair: &[PairScores]) -> Result<ScoreReport, MetricError> {
    if per_pair.is_empty() {
        return Err(MetricError::NothingToAggregate);
    }
    let bert: Option<Vec<Prf>> = per_pair.iter().map(|p| p.bertscore).collect();
    let bert_col = |f: fn(&Prf) -> f64| {
        bert.as_ref().and_then(|b| MeanStd::of(&b.iter().map(f).collect::<Vec<_>>()))
    };
    Ok(ScoreReport {
        n: per_pair.len(),
        bert_precision: bert_col(|p| p.precision),
        bert_recall: bert_col(|p| p.recall),
        bert_f1: bert_col(|p| p.f1),
        rouge1: summarize(per_pair.iter().map(|p| p.rouge.rouge1)),
        rouge2: summarize(per_pair.iter().map(|p| p.rouge.rouge2)),
        rouge_l: summarize(per_pair.iter().map(|p| p.rouge.rouge_l)),
    })
}

/// Input line of the batch scoring format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringItem {
    pub id: String,
    pub candidate: String,
    pub reference: String,
}

/// Output line: the input plus flattened metric fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    pub candidate: String,
    pub reference: String,
    pub rouge1_p: f64,
    pub rouge1_r: f64,
    pub rouge1_f1: f64,
    pub rouge2_p: f64,
    pub rouge2_r: f64,
    pub rouge2_f1: f64,
    #[serde(rename = "rougeL_p")]
    pub rouge_l_p: f64,
    #[serde(rename = "rougeL_r")]
    pub rouge_l_r: f64,
    #[serde(rename = "rougeL_f1")]
    pub rouge_l_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bert_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bert_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bert_f1: Option<f64>,
}

impl ScoredItem {
    pub fn new(item: ScoringItem, scores: &PairScores) -> Self {
        let r = &scores.rouge;
        Self {
            id: item.id,
            candidate: item.candidate,
            reference: item.reference,
            rouge1_p: r.rouge1.precision,
            rouge1_r: r.rouge1.recall,
            rouge1_f1: r.rouge1.f1,
            rouge2_p: r.rouge2.precision,
            rouge2_r: r.rouge2.recall,
            rouge2_f1: r.rouge2.f1,
            rouge_l_p: r.rouge_l.precision,
            rouge_l_r: r.rouge_l.recall,
            rouge_l_f1: r.rouge_l.f1,
            bert_p: scores.bertscore.map(|b| b.precision),
            bert_r: scores.bertscore.map(|b| b.recall),
            bert_f1: scores.bertscore.map(|b| b.f1),
        }
    }

    pub fn scores(&self) -> PairScores {
        let prf = |p, r, f| Prf { precision: p, recall: r, f1: f };
        PairScores {
            rouge: RougeScores {
                rouge1: prf(self.rouge1_p, self.rouge1_r, self.rouge1_f1),
                rouge2: prf(self.rouge2_p, self.rouge2_r, self.rouge2_f1),
                rouge_l: prf(self.rouge_l_p, self.rouge_l_r, self.rouge_l_f1),
            },
            bertscore: match (self.bert_p, self.bert_r, self.bert_f1) {
                (Some(p), Some(r), Some(f)) => Some(prf(p, r, f)),
                _ => None,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn set(vectors: &[&[f64]]) -> TokenEmbeddingSet {
        TokenEmbeddingSet::new(
            (0..vectors.len()).map(|i| format!("t{i}")).collect(),
            vectors.iter().map(|v| v.to_vec()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize_for_rouge("Weather, today!"), ["weather", "today"]);
        assert_eq!(tokenize_for_rouge("don't"), ["don", "t"]);
        assert!(tokenize_for_rouge("").is_empty());
    }

    #[test]
    fn identical_strings_score_one() {
        let r = rouge("weather forecast today", "weather forecast today");
        assert_eq!(r.rouge1.f1, 1.0);
        assert_eq!(r.rouge2.f1, 1.0);
        assert_eq!(r.rouge_l.f1, 1.0);
    }

    #[test]
    fn unigram_example() {
        let r = rouge("the cat", "the cat sat");
        assert_eq!(r.rouge1.precision, 1.0);
        assert_relative_eq!(r.rouge1.recall, 2.0 / 3.0);
        assert_relative_eq!(r.rouge1.f1, 0.8, epsilon = 1e-15);
    }

    #[test]
    fn lcs_example() {
        let r = rouge("a c b", "a b c");
        assert_relative_eq!(r.rouge_l.precision, 2.0 / 3.0);
        assert_relative_eq!(r.rouge_l.recall, 2.0 / 3.0);
        assert_relative_eq!(r.rouge_l.f1, 2.0 / 3.0);
    }

    #[test]
    fn empty_side_scores_zero() {
        assert_eq!(rouge("", "a b"), RougeScores::default());
        assert_eq!(rouge("a b", "!!"), RougeScores::default());
    }

    #[test]
    fn clipped_counts() {
        // candidate repeats "the"; only one copy can match.
        let r = rouge("the the the", "the cat");
        assert_relative_eq!(r.rouge1.precision, 1.0 / 3.0);
        assert_relative_eq!(r.rouge1.recall, 1.0 / 2.0);
    }

    #[test]
    fn single_token_has_no_bigrams() {
        let r = rouge("weather", "weather");
        assert_eq!(r.rouge1.f1, 1.0);
        assert_eq!(r.rouge2, Prf::default());
    }

    #[test]
    fn bertscore_identity_and_orthogonal() {
        let a = set(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let s = bertscore(&a, &a).unwrap();
        assert_relative_eq!(s.f1, 1.0, epsilon = 1e-15);
        let o = bertscore(&set(&[&[1.0, 0.0]]), &set(&[&[0.0, 1.0]])).unwrap();
        assert_eq!((o.precision, o.recall, o.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bertscore_asymmetric_example() {
        let s = bertscore(&set(&[&[1.0, 0.0], &[0.0, 1.0]]), &set(&[&[1.0, 0.0]])).unwrap();
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.precision, 0.5);
        assert_relative_eq!(s.f1, 2.0 / 3.0);
    }

    #[test]
    fn bertscore_errors() {
        let empty = TokenEmbeddingSet::new(vec![], vec![]).unwrap();
        let one = set(&[&[1.0, 0.0]]);
        assert_eq!(bertscore(&empty, &one), Err(MetricError::EmptyTokenSet("candidate")));
        assert_eq!(bertscore(&one, &empty), Err(MetricError::EmptyTokenSet("reference")));
        let zero = set(&[&[0.0, 0.0]]);
        assert_eq!(bertscore(&one, &zero), Err(MetricError::DegenerateVector { side: "reference", index: 0 }));
        assert!(matches!(bertscore(&one, &set(&[&[1.0, 0.0, 0.0]])), Err(MetricError::DimensionMismatch(2, 3))));
    }

    #[test]
    fn bertscore_options() {
        let c = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = set(&[&[1.0, 0.0]]);
        let mut idf = HashMap::new();
        idf.insert("t1".to_string(), 3.0);
        let s = bertscore_with(&c, &r, &BertScoreOptions { idf: Some(idf), baseline: None }).unwrap();
        // candidate weights t0=1 (sim 1), t1=3 (sim 0)
        assert_relative_eq!(s.precision, 0.25);
        let b = bertscore_with(&c, &r, &BertScoreOptions { idf: None, baseline: Some(0.5) }).unwrap();
        assert_relative_eq!(b.precision, 0.0);
        assert_relative_eq!(b.recall, 1.0);
    }

    #[test]
    fn aggregate_two_pairs() {
        let mk = |f: f64| PairScores {
            rouge: RougeScores::default(),
            bertscore: Some(Prf { precision: f, recall: f, f1: f }),
        };
        let rep = aggregate_scores(&[mk(0.7), mk(0.8)]).unwrap();
        let f1 = rep.bert_f1.unwrap();
        assert_relative_eq!(f1.mean, 0.75, epsilon = 1e-15);
        assert_relative_eq!(f1.std, 0.05, epsilon = 1e-15);
        let single = aggregate_scores(&[mk(0.7)]).unwrap();
        assert_eq!(single.bert_f1.unwrap().std, 0.0);
        assert_eq!(aggregate_scores(&[]), Err(MetricError::NothingToAggregate));
    }

    #[test]
    fn aggregate_without_bertscore() {
        let rep = aggregate_scores(&[PairScores { rouge: rouge("a b", "a b"), bertscore: None }]).unwrap();
        assert!(rep.bert_f1.is_none());
        assert_eq!(rep.rouge1.f1.mean, 1.0);
    }
}
