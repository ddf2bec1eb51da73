//! Human-evaluation arithmetic: difficulty buckets, deviation from the golden
//! standard (DGS), Krippendorff's alpha and correlation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Source id of the golden-standard label.
pub const GOLD_SOURCE: &str = "GS";

#[derive(Debug, thiserror::Error)]
pub enum AgreementError {
    #[error("difficulty level {0} outside 1..=3")]
    InvalidLevel(u8),
    #[error("label rating {0} outside 1..=5")]
    InvalidRating(u8),
    #[error("no ratings given")]
    NoRatings,
    #[error("no expert rated both {source_id:?} and the golden standard on sentence {sentence:?}")]
    UndefinedDgs { source_id: String, sentence: String },
    #[error("no sentence has a defined deviation")]
    NoDefinedDgs,
    #[error("no unit has two or more values, nothing is pairable")]
    NoPairableValues,
    #[error("expected disagreement is zero: every pairable value is {0}, alpha is undefined")]
    DegenerateAlpha(String),
    #[error("need at least 3 paired values, got {0}")]
    InsufficientData(usize),
    #[error("series have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("{0} series has zero variance")]
    ZeroVariance(&'static str),
    #[error("sentence {0:?} has ratings but no difficulty bucket")]
    UnbucketedSentence(String),
    #[error("unknown {kind} {value:?}")]
    Unknown { kind: &'static str, value: String },
    #[error("rating matrix row {row}: {message}")]
    Matrix { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Difficulty class from the mean of experts' 1–3 ratings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Easy,
    Medium,
    Difficult,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Easy, Bucket::Medium, Bucket::Difficult];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Easy => "easy",
            Bucket::Medium => "medium",
            Bucket::Difficult => "difficult",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// easy ≤ 1.5 < medium < 2.5 ≤ difficult
pub fn bucket(mean_level: f64) -> Bucket {
    if mean_level <= 1.5 {
        Bucket::Easy
    } else if mean_level < 2.5 {
        Bucket::Medium
    } else {
        Bucket::Difficult
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyRating {
    pub rater: String,
    pub sentence: String,
    pub level: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultySummary {
    pub sentence: String,
    pub mean_level: f64,
    pub n_ratings: usize,
    pub bucket: Bucket,
}

/// Mean difficulty and bucket per sentence, ordered by sentence id.
pub fn summarize_difficulty(ratings: &[DifficultyRating]) -> Result<Vec<DifficultySummary>, AgreementError> {
    if ratings.is_empty() {
        return Err(AgreementError::NoRatings);
    }
    let mut per: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in ratings {
        if !(1..=3).contains(&r.level) {
            return Err(AgreementError::InvalidLevel(r.level));
        }
        per.entry(&r.sentence).or_default().push(r.level as f64);
    }
    Ok(per
        .into_iter()
        .map(|(sentence, levels)| {
            let mean_level = levels.iter().sum::<f64>() / levels.len() as f64;
            DifficultySummary { sentence: sentence.to_string(), mean_level, n_ratings: levels.len(), bucket: bucket(mean_level) }
        })
        .collect())
}

/// One expert's 1–5 rating of the label that `source` gave a sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRating {
    pub expert: String,
    pub sentence: String,
    pub source: String,
    pub value: u8,
}

impl LabelRating {
    /// True when the rated label was written by the rating expert themself,
    /// i.e. the source is `coder:<expert>`.
    pub fn is_self_rating(&self) -> bool {
        self.source.strip_prefix("coder:") == Some(self.expert.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DgsOptions {
    /// Drop ratings experts gave to their own Stage-1 labels. Off by default.
    #[serde(default)]
    pub exclude_self_ratings: bool,
}

fn validate(ratings: &[LabelRating]) -> Result<(), AgreementError> {
    match ratings.iter().find(|r| !(1..=5).contains(&r.value)) {
        Some(bad) => Err(AgreementError::InvalidRating(bad.value)),
        None => Ok(()),
    }
}

/// expert -> value for one (source, sentence); a repeated rating replaces
/// the earlier one.
fn ratings_of<'a>(
    ratings: &'a [LabelRating],
    source: &str,
    sentence: &str,
    options: &DgsOptions,
) -> HashMap<&'a str, f64> {
    ratings
        .iter()
        .filter(|r| r.source == source && r.sentence == sentence)
        .filter(|r| !(options.exclude_self_ratings && r.is_self_rating()))
        .map(|r| (r.expert.as_str(), r.value as f64))
        .collect()
}

/// Mean rating of `source`'s label minus mean rating of the golden standard,
/// both over the experts who rated both. Positive means rated above GS.
pub fn dgs(ratings: &[LabelRating], source: &str, sentence: &str) -> Result<f64, AgreementError> {
    dgs_with(ratings, source, sentence, &DgsOptions::default())
}

pub fn dgs_with(
    ratings: &[LabelRating],
    source: &str,
    sentence: &str,
    options: &DgsOptions,
) -> Result<f64, AgreementError> {
    validate(ratings)?;
    let src = ratings_of(ratings, source, sentence, options);
    let gold = ratings_of(ratings, GOLD_SOURCE, sentence, options);
    let mut both: Vec<&str> = src.keys().filter(|e| gold.contains_key(*e)).copied().collect();
    both.sort_unstable();
    if both.is_empty() {
        return Err(AgreementError::UndefinedDgs { source_id: source.to_string(), sentence: sentence.to_string() });
    }
    let n = both.len() as f64;
    let mean_src = both.iter().map(|e| src[e]).sum::<f64>() / n;
    let mean_gold = both.iter().map(|e| gold[e]).sum::<f64>() / n;
    Ok(mean_src - mean_gold)
}

/// Mean of the defined per-sentence deviations.
pub fn average_dgs(per_sentence: &[f64]) -> Result<f64, AgreementError> {
    if per_sentence.is_empty() {
        return Err(AgreementError::NoDefinedDgs);
    }
    Ok(per_sentence.iter().sum::<f64>() / per_sentence.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgsRow {
    pub source: String,
    pub sentence: String,
    pub bucket: Option<Bucket>,
    pub dgs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDgs {
    pub source: String,
    pub average_dgs: Option<f64>,
    pub defined: usize,
    /// Sentences without any expert who rated both labels.
    pub undefined: Vec<String>,
    pub by_bucket: BTreeMap<Bucket, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgsReport {
    pub rows: Vec<DgsRow>,
    pub sources: Vec<SourceDgs>,
}

impl DgsReport {
    /// `source,sentence,bucket,dgs` with blanks for missing values.
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("source,sentence,bucket,dgs\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(&r.source),
                csv_field(&r.sentence),
                r.bucket.map(Bucket::as_str).unwrap_or(""),
                r.dgs.map(|v| v.to_string()).unwrap_or_default()
            ));
        }
        out
    }

    /// One line per source: average, defined count, undefined count, per-bucket means.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("source,average_dgs,defined,undefined,easy,medium,difficult\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for s in &self.sources {
            let b = |k| opt(s.by_bucket.get(&k).copied().flatten());
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&s.source),
                opt(s.average_dgs),
                s.defined,
                s.undefined.len(),
                b(Bucket::Easy),
                b(Bucket::Medium),
                b(Bucket::Difficult)
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// DGS for every non-gold source on every sentence it was rated on, with
/// per-source averages and (when difficulty summaries are given) per-bucket
/// averages.
pub fn dgs_report(
    ratings: &[LabelRating],
    difficulty: Option<&[DifficultySummary]>,
    options: &DgsOptions,
) -> Result<DgsReport, AgreementError> {
    validate(ratings)?;
    let buckets: HashMap<&str, Bucket> =
        difficulty.unwrap_or(&[]).iter().map(|d| (d.sentence.as_str(), d.bucket)).collect();
    let mut pairs: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in ratings {
        pairs.entry(r.source.as_str()).or_default().insert(r.sentence.as_str());
    }
    let mut rows = Vec::new();
    let mut sources = Vec::new();
    for (source, sentences) in pairs {
        let mut defined = Vec::new();
        let mut undefined = Vec::new();
        let mut per_bucket: BTreeMap<Bucket, Vec<f64>> = BTreeMap::new();
        for sentence in sentences {
            let bucket = buckets.get(sentence).copied();
            if difficulty.is_some() && bucket.is_none() {
                return Err(AgreementError::UnbucketedSentence(sentence.to_string()));
            }
            let value = match dgs_with(ratings, source, sentence, options) {
                Ok(v) => Some(v),
                Err(AgreementError::UndefinedDgs { .. }) => None,
                Err(e) => return Err(e),
            };
            match value {
                Some(v) => {
                    defined.push(v);
                    if let Some(b) = bucket {
                        per_bucket.entry(b).or_default().push(v);
                    }
                }
                None => undefined.push(sentence.to_string()),
            }
            rows.push(DgsRow { source: source.to_string(), sentence: sentence.to_string(), bucket, dgs: value });
        }
        let by_bucket = if difficulty.is_some() {
            Bucket::ALL.iter().map(|b| (*b, per_bucket.get(b).and_then(|v| average_dgs(v).ok()))).collect()
        } else {
            BTreeMap::new()
        };
        sources.push(SourceDgs {
            source: source.to_string(),
            average_dgs: average_dgs(&defined).ok(),
            defined: defined.len(),
            undefined,
            by_bucket,
        });
    }
    Ok(DgsReport { rows, sources })
}

/// Mean rating per (source, bucket) with counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMean {
    pub source: String,
    pub bucket: Bucket,
    pub count: usize,
    pub mean: Option<f64>,
}

/// Every source is reported for all three buckets; empty buckets have
/// count 0 and no mean.
pub fn ratings_by_bucket(
    ratings: &[LabelRating],
    difficulty: &[DifficultySummary],
) -> Result<Vec<BucketMean>, AgreementError> {
    validate(ratings)?;
    let buckets: HashMap<&str, Bucket> = difficulty.iter().map(|d| (d.sentence.as_str(), d.bucket)).collect();
    let mut acc: BTreeMap<(&str, Bucket), (usize, f64)> = BTreeMap::new();
    let mut sources = BTreeSet::new();
    for r in ratings {
        let b = *buckets
            .get(r.sentence.as_str())
            .ok_or_else(|| AgreementError::UnbucketedSentence(r.sentence.clone()))?;
        sources.insert(r.source.as_str());
        let e = acc.entry((r.source.as_str(), b)).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += r.value as f64;
    }
    Ok(sources
        .into_iter()
        .flat_map(|s| Bucket::ALL.into_iter().map(move |b| (s, b)))
        .map(|(s, b)| {
            let (count, sum) = acc.get(&(s, b)).copied().unwrap_or((0, 0.0));
            BucketMean { source: s.to_string(), bucket: b, count, mean: (count > 0).then(|| sum / count as f64) }
        })
        .collect())
}

/// Measurement level for Krippendorff's alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Nominal,
    Ordinal,
    Interval,
}

impl FromStr for Scale {
    type Err = AgreementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nominal" => Ok(Self::Nominal),
            "ordinal" => Ok(Self::Ordinal),
            "interval" => Ok(Self::Interval),
            other => Err(AgreementError::Unknown { kind: "scale", value: other.to_string() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaResult {
    pub alpha: f64,
    pub scale: Scale,
    pub n_pairable: usize,
    pub observed_disagreement: f64,
    pub expected_disagreement: f64,
}

/// Alpha from a coincidence matrix over value indices `0..m`.
/// `delta2[c][k]` is the squared difference between values c and k.
fn alpha_from_units(
    units: &[Vec<usize>],
    m: usize,
    delta2: impl Fn(usize, usize, &[f64]) -> f64,
    scale: Scale,
    describe: impl Fn() -> String,
) -> Result<AlphaResult, AgreementError> {
    let mut o = vec![vec![0.0f64; m]; m];
    let mut n_pairable = 0usize;
    for unit in units.iter().filter(|u| u.len() >= 2) {
        n_pairable += unit.len();
        let w = 1.0 / (unit.len() - 1) as f64;
        for (a, &c) in unit.iter().enumerate() {
            for (b, &k) in unit.iter().enumerate() {
                if a != b {
                    o[c][k] += w;
                }
            }
        }
    }
    if n_pairable == 0 {
        return Err(AgreementError::NoPairableValues);
    }
    let marg: Vec<f64> = o.iter().map(|row| row.iter().sum()).collect();
    let n = n_pairable as f64;
    let mut d_o = 0.0;
    let mut d_e = 0.0;
    for c in 0..m {
        for k in 0..m {
            let d = delta2(c, k, &marg);
            d_o += o[c][k] * d;
            d_e += marg[c] * marg[k] * d;
        }
    }
    d_o /= n;
    d_e /= n * (n - 1.0);
    if d_e == 0.0 {
        return Err(AgreementError::DegenerateAlpha(describe()));
    }
    Ok(AlphaResult { alpha: 1.0 - d_o / d_e, scale, n_pairable, observed_disagreement: d_o, expected_disagreement: d_e })
}

/// Krippendorff's alpha over numeric values. `units` holds one row per item
/// with one cell per observer; `None` is a missing rating. Items with fewer
/// than two ratings are skipped.
pub fn krippendorff_alpha(units: &[Vec<Option<f64>>], scale: Scale) -> Result<AlphaResult, AgreementError> {
    let mut values: Vec<f64> = units.iter().flatten().flatten().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let index = |v: f64| values.binary_search_by(|x| x.total_cmp(&v)).expect("value collected above");
    let coded: Vec<Vec<usize>> = units.iter().map(|u| u.iter().flatten().map(|&v| index(v)).collect()).collect();
    let describe = || values.first().map(|v| v.to_string()).unwrap_or_default();
    match scale {
        Scale::Nominal => alpha_from_units(&coded, values.len(), |c, k, _| if c == k { 0.0 } else { 1.0 }, scale, describe),
        Scale::Interval => {
            alpha_from_units(&coded, values.len(), |c, k, _| (values[c] - values[k]).powi(2), scale, describe)
        }
        Scale::Ordinal => alpha_from_units(
            &coded,
            values.len(),
            |c, k, marg| {
                let (lo, hi) = if c <= k { (c, k) } else { (k, c) };
                let between: f64 = marg[lo..=hi].iter().sum();
                (between - (marg[c] + marg[k]) / 2.0).powi(2)
            },
            scale,
            describe,
        ),
    }
}

/// Nominal alpha over free-text labels; labels are equal when their trimmed,
/// lowercased forms are equal.
pub fn krippendorff_alpha_labels(units: &[Vec<Option<String>>]) -> Result<AlphaResult, AgreementError> {
    let mut labels: Vec<String> =
        units.iter().flatten().flatten().map(|l| l.trim().to_lowercase()).collect::<BTreeSet<_>>().into_iter().collect();
    labels.dedup();
    let coded: Vec<Vec<usize>> = units
        .iter()
        .map(|u| {
            u.iter()
                .flatten()
                .map(|l| labels.binary_search(&l.trim().to_lowercase()).expect("label collected above"))
                .collect()
        })
        .collect();
    let describe = || format!("{:?}", labels.first().cloned().unwrap_or_default());
    alpha_from_units(&coded, labels.len(), |c, k, _| if c == k { 0.0 } else { 1.0 }, Scale::Nominal, describe)
}

/// Items × observers matrix read from CSV. The header row names observers
/// after a leading item column; blank cells are missing.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    pub observers: Vec<String>,
    pub items: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl RatingMatrix {
    pub fn from_csv(reader: impl Read) -> Result<Self, AgreementError> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        let observers: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
        let mut items = Vec::new();
        let mut cells = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 2;
            if rec.len() > observers.len() + 1 {
                return Err(AgreementError::Matrix { row, message: format!("{} cells for {} observers", rec.len() - 1, observers.len()) });
            }
            items.push(rec.get(0).unwrap_or_default().to_string());
            let mut values = Vec::with_capacity(observers.len());
            for j in 0..observers.len() {
                let cell = rec.get(j + 1).unwrap_or("").trim();
                values.push(if cell.is_empty() {
                    None
                } else {
                    Some(cell.parse::<f64>().map_err(|_| AgreementError::Matrix {
                        row,
                        message: format!("cell {cell:?} is not a number"),
                    })?)
                });
            }
            cells.push(values);
        }
        Ok(Self { observers, items, cells })
    }

    pub fn alpha(&self, scale: Scale) -> Result<AlphaResult, AgreementError> {
        krippendorff_alpha(&self.cells, scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMethod {
    #[default]
    Pearson,
    Spearman,
}

impl FromStr for CorrelationMethod {
    type Err = AgreementError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pearson" => Ok(Self::Pearson),
            "spearman" => Ok(Self::Spearman),
            other => Err(AgreementError::Unknown { kind: "correlation method", value: other.to_string() }),
        }
    }
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AgreementError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 {
        return Err(AgreementError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(AgreementError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; ties share the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn correlate(x: &[f64], y: &[f64], method: CorrelationMethod) -> Result<f64, AgreementError> {
    if x.len() != y.len() {
        return Err(AgreementError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(AgreementError::InsufficientData(x.len()));
    }
    match method {
        CorrelationMethod::Pearson => pearson(x, y),
        CorrelationMethod::Spearman => pearson(&average_ranks(x), &average_ranks(y)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dr(sentence: &str, levels: &[u8]) -> Vec<DifficultyRating> {
        levels
            .iter()
            .enumerate()
            .map(|(i, &level)| DifficultyRating { rater: format!("r{i}"), sentence: sentence.into(), level })
            .collect()
    }

    fn lr(expert: &str, sentence: &str, source: &str, value: u8) -> LabelRating {
        LabelRating { expert: expert.into(), sentence: sentence.into(), source: source.into(), value }
    }

    #[test]
    fn difficulty_examples() {
        let cases = [(&[1, 2, 1, 2][..], 1.5, Bucket::Easy), (&[2, 2, 2, 3], 2.25, Bucket::Medium), (&[3, 3, 3, 2], 2.75, Bucket::Difficult)];
        for (levels, mean, b) in cases {
            let s = summarize_difficulty(&dr("s", levels)).unwrap();
            assert_eq!(s[0].mean_level, mean);
            assert_eq!(s[0].bucket, b);
        }
        assert!(matches!(summarize_difficulty(&dr("s", &[4])), Err(AgreementError::InvalidLevel(4))));
        assert!(matches!(summarize_difficulty(&[]), Err(AgreementError::NoRatings)));
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(bucket(1.0), Bucket::Easy);
        assert_eq!(bucket(1.5), Bucket::Easy);
        assert_eq!(bucket(1.50001), Bucket::Medium);
        assert_eq!(bucket(2.4999), Bucket::Medium);
        assert_eq!(bucket(2.5), Bucket::Difficult);
        assert_eq!(bucket(3.0), Bucket::Difficult);
    }

    #[test]
    fn dgs_examples() {
        let r = vec![lr("a", "s", "m", 5), lr("b", "s", "m", 4), lr("a", "s", GOLD_SOURCE, 3), lr("b", "s", GOLD_SOURCE, 3)];
        assert_eq!(dgs(&r, "m", "s").unwrap(), 1.5);
        assert_eq!(dgs(&r, GOLD_SOURCE, "s").unwrap(), 0.0);
        let mut extra = r.clone();
        extra.push(lr("c", "s", GOLD_SOURCE, 1));
        assert_eq!(dgs(&extra, "m", "s").unwrap(), 1.5);
        assert!(matches!(dgs(&r, "m", "other"), Err(AgreementError::UndefinedDgs { .. })));
        assert!(matches!(dgs(&[lr("a", "s", "m", 6)], "m", "s"), Err(AgreementError::InvalidRating(6))));
    }

    #[test]
    fn self_ratings_flag() {
        let r = vec![
            lr("a", "s", "coder:a", 5),
            lr("b", "s", "coder:a", 3),
            lr("a", "s", GOLD_SOURCE, 3),
            lr("b", "s", GOLD_SOURCE, 3),
        ];
        assert_eq!(dgs(&r, "coder:a", "s").unwrap(), 1.0);
        let opts = DgsOptions { exclude_self_ratings: true };
        assert_eq!(dgs_with(&r, "coder:a", "s", &opts).unwrap(), 0.0);
    }

    #[test]
    fn average_dgs_examples() {
        assert_eq!(average_dgs(&[1.5, -0.5]).unwrap(), 0.5);
        assert!(matches!(average_dgs(&[]), Err(AgreementError::NoDefinedDgs)));
    }

    #[test]
    fn report_excludes_undefined() {
        let r = vec![lr("a", "s1", "m", 4), lr("a", "s1", GOLD_SOURCE, 2), lr("b", "s2", "m", 5), lr("a", "s2", GOLD_SOURCE, 5)];
        let rep = dgs_report(&r, None, &DgsOptions::default()).unwrap();
        let m = rep.sources.iter().find(|s| s.source == "m").unwrap();
        assert_eq!(m.average_dgs, Some(2.0));
        assert_eq!(m.undefined, vec!["s2".to_string()]);
        assert!(rep.rows_csv().contains("m,s2,,\n"));
    }

    #[test]
    fn bucket_means() {
        let d = vec![DifficultySummary { sentence: "s".into(), mean_level: 1.0, n_ratings: 1, bucket: Bucket::Easy }];
        let out = ratings_by_bucket(&[lr("a", "s", "m", 4), lr("b", "s", "m", 4)], &d).unwrap();
        assert_eq!(out[0].mean, Some(4.0));
        assert_eq!(out[1].count, 0);
        assert_eq!(out[1].mean, None);
        assert!(matches!(ratings_by_bucket(&[lr("a", "x", "m", 4)], &d), Err(AgreementError::UnbucketedSentence(_))));
    }

    #[test]
    fn alpha_hand_fixture() {
        let units = vec![vec![Some(1.0), Some(1.0)], vec![Some(1.0), Some(2.0)]];
        let a = krippendorff_alpha(&units, Scale::Nominal).unwrap();
        assert_eq!(a.observed_disagreement, 0.5);
        assert_eq!(a.expected_disagreement, 0.5);
        assert_eq!(a.alpha, 0.0);
        assert_eq!(a.n_pairable, 4);
    }

    #[test]
    fn alpha_perfect_and_degenerate() {
        let units = vec![vec![Some(1.0), Some(1.0)], vec![Some(3.0), Some(3.0)], vec![Some(2.0), Some(2.0)]];
        for scale in [Scale::Nominal, Scale::Ordinal, Scale::Interval] {
            assert_eq!(krippendorff_alpha(&units, scale).unwrap().alpha, 1.0);
        }
        let same = vec![vec![Some(2.0), Some(2.0)]];
        assert!(matches!(krippendorff_alpha(&same, Scale::Nominal), Err(AgreementError::DegenerateAlpha(_))));
        let lonely = vec![vec![Some(2.0), None]];
        assert!(matches!(krippendorff_alpha(&lonely, Scale::Nominal), Err(AgreementError::NoPairableValues)));
    }

    #[test]
    fn alpha_reference_values() {
        // Krippendorff's reliability-data example (4 observers, 12 units).
        let raw = [
            [Some(1.), Some(1.), None, Some(1.)],
            [Some(2.), Some(2.), Some(3.), Some(2.)],
            [Some(3.), Some(3.), Some(3.), Some(3.)],
            [Some(3.), Some(3.), Some(3.), Some(3.)],
            [Some(2.), Some(2.), Some(2.), Some(2.)],
            [Some(1.), Some(2.), Some(3.), Some(4.)],
            [Some(4.), Some(4.), Some(4.), Some(4.)],
            [Some(1.), Some(1.), Some(2.), Some(1.)],
            [Some(2.), Some(2.), Some(2.), Some(2.)],
            [None, Some(5.), Some(5.), Some(5.)],
            [None, None, Some(1.), Some(1.)],
            [None, None, Some(3.), None],
        ];
        let units: Vec<Vec<Option<f64>>> = raw.iter().map(|r| r.to_vec()).collect();
        assert_relative_eq!(krippendorff_alpha(&units, Scale::Nominal).unwrap().alpha, 0.743, epsilon = 5e-4);
        assert_relative_eq!(krippendorff_alpha(&units, Scale::Ordinal).unwrap().alpha, 0.815, epsilon = 5e-4);
        assert_relative_eq!(krippendorff_alpha(&units, Scale::Interval).unwrap().alpha, 0.849, epsilon = 5e-4);
    }

    #[test]
    fn label_alpha() {
        let s = |v: &str| Some(v.to_string());
        let units = vec![vec![s("Weather"), s("weather ")], vec![s("fear"), s("anxiety")]];
        let a = krippendorff_alpha_labels(&units).unwrap();
        assert!(a.alpha < 1.0);
        let agree = vec![vec![s("a"), s("A")], vec![s("b"), s("b")]];
        assert_eq!(krippendorff_alpha_labels(&agree).unwrap().alpha, 1.0);
    }

    #[test]
    fn matrix_csv() {
        let m = RatingMatrix::from_csv("item,o1,o2\nx,1,1\ny,1,2\nz,,3\n".as_bytes()).unwrap();
        assert_eq!(m.observers, ["o1", "o2"]);
        assert_eq!(m.cells[2], vec![None, Some(3.0)]);
        assert_eq!(m.alpha(Scale::Nominal).unwrap().alpha, 0.0);
        assert!(RatingMatrix::from_csv("item,o1\nx,abc\n".as_bytes()).is_err());
    }

    #[test]
    fn correlation_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(correlate(&x, &x.map(|v| 2.0 * v + 1.0), CorrelationMethod::Pearson).unwrap(), 1.0);
        assert_relative_eq!(correlate(&x, &x.map(|v| -v), CorrelationMethod::Pearson).unwrap(), -1.0);
        assert_relative_eq!(correlate(&x, &x.map(|v: f64| v.powi(3)), CorrelationMethod::Spearman).unwrap(), 1.0);
        assert!(matches!(correlate(&x[..2], &x[..2], CorrelationMethod::Pearson), Err(AgreementError::InsufficientData(2))));
        assert!(matches!(correlate(&x, &[1.0; 4], CorrelationMethod::Pearson), Err(AgreementError::ZeroVariance("y"))));
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }
}
