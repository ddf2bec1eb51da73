//! Quote/code datasets: loading, merging, stratified splitting and summary
//! statistics.
//!
//! A dataset is an ordered list of [`QuoteCodePair`]s. Each pair carries the
//! golden-standard code agreed by the original coders, the study it came from
//! and a split tag.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::stats::{mean, population_std};

/// Source label given to records that do not name their study.
pub const DEFAULT_SOURCE: &str = "default";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("record {index}: {message}")]
    Schema { index: usize, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    FractionOutOfRange(f64),
    #[error("cannot infer dataset format from {0:?}; use jsonl or csv")]
    UnknownFormat(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which side of the train/test partition a pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "" | "unassigned" | "null" => Ok(Split::Unassigned),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One quote together with its golden-standard code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuoteCodePair {
    pub id: String,
    pub quote: String,
    pub code: String,
    pub source: String,
    pub split: Split,
}

/// Validated, immutable collection of pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pairs: Vec<QuoteCodePair>,
    sources: BTreeSet<String>,
}

impl Dataset {
    /// Builds a dataset, checking that quotes and codes are non-blank and ids
    /// are unique.
    pub fn new(pairs: Vec<QuoteCodePair>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for (index, pair) in pairs.iter().enumerate() {
            if pair.quote.trim().is_empty() {
                return Err(CorpusError::Schema { index, message: "quote is empty".into() });
            }
            if pair.code.trim().is_empty() {
                return Err(CorpusError::Schema { index, message: "code is empty".into() });
            }
            if !seen.insert(pair.id.as_str()) {
                return Err(CorpusError::DuplicateId(pair.id.clone()));
            }
        }
        let sources = pairs.iter().map(|p| p.source.clone()).collect();
        Ok(Self { pairs, sources })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn pairs(&self) -> &[QuoteCodePair] {
        &self.pairs
    }

    pub fn sources(&self) -> &BTreeSet<String> {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&QuoteCodePair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    /// Pairs tagged with `split`, in dataset order.
    pub fn split_pairs(&self, split: Split) -> Vec<&QuoteCodePair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    /// A new dataset holding only the pairs tagged with `split`.
    pub fn subset(&self, split: Split) -> Dataset {
        let pairs = self.pairs.iter().filter(|p| p.split == split).cloned().collect();
        Dataset::new(pairs).expect("subset of a valid dataset is valid")
    }

    pub fn into_pairs(self) -> Vec<QuoteCodePair> {
        self.pairs
    }
}

/// On-disk encodings understood by [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(ext) if ext == "jsonl" || ext == "ndjson" || ext == "json" => Ok(Self::Jsonl),
            Some(ext) if ext == "csv" => Ok(Self::Csv),
            _ => Err(CorpusError::UnknownFormat(path.display().to_string())),
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown dataset format {other:?}")),
        }
    }
}

/// Wire shape of one record; everything but `quote` and `code` is optional.
#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default)]
    quote: Option<String>,
    #[serde(default)]
    code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(default)]
    split: Option<String>,
}

fn from_raw(index: usize, raw: RawRecord) -> Result<QuoteCodePair, CorpusError> {
    let schema = |message: String| CorpusError::Schema { index, message };
    let quote = raw.quote.ok_or_else(|| schema("missing required field `quote`".into()))?;
    let code = raw.code.ok_or_else(|| schema("missing required field `code`".into()))?;
    if quote.trim().is_empty() {
        return Err(schema("quote is empty".into()));
    }
    if code.trim().is_empty() {
        return Err(schema("code is empty".into()));
    }
    let split = match raw.split {
        Some(s) => s.parse().map_err(schema)?,
        None => Split::Unassigned,
    };
    let id = match raw.id {
        Some(id) if !id.trim().is_empty() => id,
        _ => format!("row-{}", index + 1),
    };
    let source = raw
        .source
        .filter(|s| !s.trim().is_empty())
        .unwrap_or_else(|| DEFAULT_SOURCE.to_string());
    Ok(QuoteCodePair { id, quote, code, source, split })
}

/// Loads a dataset from `path`. Records without an id get `row-<n>` (1-based).
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, CorpusError> {
    let file = File::open(path)?;
    read_dataset(BufReader::new(file), format)
}

pub fn read_dataset<R: Read>(reader: R, format: DatasetFormat) -> Result<Dataset, CorpusError> {
    let mut pairs = Vec::new();
    match format {
        DatasetFormat::Jsonl => {
            let reader = BufReader::new(reader);
            let mut index = 0;
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let raw: RawRecord = serde_json::from_str(&line).map_err(|e| {
                    CorpusError::Schema { index, message: format!("invalid json: {e}") }
                })?;
                pairs.push(from_raw(index, raw)?);
                index += 1;
            }
        }
        DatasetFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
            let headers = rdr.headers()?.clone();
            for required in ["quote", "code"] {
                if !headers.iter().any(|h| h == required) {
                    if headers.is_empty() {
                        return Err(CorpusError::Empty);
                    }
                    return Err(CorpusError::Schema {
                        index: 0,
                        message: format!("csv header lacks required column `{required}`"),
                    });
                }
            }
            for (index, row) in rdr.deserialize::<RawRecord>().enumerate() {
                let raw = row.map_err(|e| CorpusError::Schema { index, message: e.to_string() })?;
                pairs.push(from_raw(index, raw)?);
            }
        }
    }
    if pairs.is_empty() {
        return Err(CorpusError::Empty);
    }
    Dataset::new(pairs)
}

fn to_raw(pair: &QuoteCodePair) -> RawRecord {
    RawRecord {
        id: Some(pair.id.clone()),
        quote: Some(pair.quote.clone()),
        code: Some(pair.code.clone()),
        source: Some(pair.source.clone()),
        split: match pair.split {
            Split::Unassigned => None,
            s => Some(s.as_str().to_string()),
        },
    }
}

pub fn write_dataset<W: Write>(dataset: &Dataset, writer: W, format: DatasetFormat) -> Result<(), CorpusError> {
    match format {
        DatasetFormat::Jsonl => {
            let mut w = BufWriter::new(writer);
            for pair in dataset.pairs() {
                serde_json::to_writer(&mut w, &to_raw(pair))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        DatasetFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            w.write_record(["id", "quote", "code", "source", "split"])?;
            for pair in dataset.pairs() {
                let split = match pair.split {
                    Split::Unassigned => "",
                    s => s.as_str(),
                };
                w.write_record([&pair.id, &pair.quote, &pair.code, &pair.source, split])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path, format: DatasetFormat) -> Result<(), CorpusError> {
    write_dataset(dataset, File::create(path)?, format)
}

/// Concatenates two datasets, labelling them `a` and `b` for id collisions.
pub fn merge(a: &Dataset, b: &Dataset) -> Dataset {
    merge_labeled(a, "a", b, "b")
}

/// Concatenates `a` then `b`. Ids present in both are rewritten to
/// `<label>/<id>` on both sides.
pub fn merge_labeled(a: &Dataset, label_a: &str, b: &Dataset, label_b: &str) -> Dataset {
    let ids_a: HashSet<&str> = a.pairs.iter().map(|p| p.id.as_str()).collect();
    let colliding: HashSet<String> = b
        .pairs
        .iter()
        .filter(|p| ids_a.contains(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    let relabel = |pair: &QuoteCodePair, label: &str| {
        let mut pair = pair.clone();
        if colliding.contains(&pair.id) {
            pair.id = format!("{label}/{}", pair.id);
        }
        pair
    };
    let mut pairs: Vec<QuoteCodePair> = a.pairs.iter().map(|p| relabel(p, label_a)).collect();
    pairs.extend(b.pairs.iter().map(|p| relabel(p, label_b)));
    // A rewritten id can still clash with an untouched one ("a/q1" existing
    // in b); fall back to numbering in that case.
    let mut seen = HashSet::new();
    for pair in &mut pairs {
        let base = pair.id.clone();
        let mut n = 2;
        while !seen.insert(pair.id.clone()) {
            pair.id = format!("{base}#{n}");
            n += 1;
        }
    }
    Dataset::new(pairs).expect("merge of valid datasets is valid")
}

/// Number of test pairs each source receives: proportional quotas
/// `n_s * fraction`, floored, with the remaining seats handed to the largest
/// fractional remainders so that the total is `round(total * fraction)`.
pub fn allocate_test_counts(
    source_sizes: &BTreeMap<String, usize>,
    test_fraction: f64,
) -> Result<BTreeMap<String, usize>, CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::FractionOutOfRange(test_fraction));
    }
    let total: usize = source_sizes.values().sum();
    let target = (total as f64 * test_fraction).round() as usize;
    let mut counts = BTreeMap::new();
    let mut remainders = Vec::with_capacity(source_sizes.len());
    let mut assigned = 0usize;
    for (source, &n) in source_sizes {
        let quota = n as f64 * test_fraction;
        let floor = quota.floor() as usize;
        assigned += floor;
        counts.insert(source.clone(), floor);
        remainders.push((quota - floor as f64, source.clone(), n));
    }
    remainders.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.cmp(&y.1)));
    let extra = target.saturating_sub(assigned);
    for (rem, source, n) in remainders.into_iter().take(extra) {
        let c = counts.get_mut(&source).expect("source present");
        if rem > 0.0 && *c < n {
            *c += 1;
        }
    }
    Ok(counts)
}

/// Stratified train/test split by source. Deterministic for a fixed seed.
pub fn split_dataset(d: &Dataset, test_fraction: f64, seed: u64) -> Result<Dataset, CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::FractionOutOfRange(test_fraction));
    }
    let mut by_source: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, pair) in d.pairs.iter().enumerate() {
        by_source.entry(pair.source.clone()).or_default().push(i);
    }
    let sizes = by_source.iter().map(|(s, v)| (s.clone(), v.len())).collect();
    let counts = allocate_test_counts(&sizes, test_fraction)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; d.pairs.len()];
    for (source, mut members) in by_source {
        members.shuffle(&mut rng);
        for &i in members.iter().take(counts[&source]) {
            is_test[i] = true;
        }
    }
    let pairs = d
        .pairs
        .iter()
        .zip(is_test)
        .map(|(p, test)| QuoteCodePair {
            split: if test { Split::Test } else { Split::Train },
            ..p.clone()
        })
        .collect();
    Dataset::new(pairs)
}

/// How lengths in [`DatasetStats`] are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthUnit {
    #[default]
    Chars,
    Tokens,
}

impl LengthUnit {
    pub fn measure(self, text: &str) -> usize {
        match self {
            LengthUnit::Chars => text.chars().count(),
            LengthUnit::Tokens => text.split_whitespace().count(),
        }
    }
}

impl FromStr for LengthUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chars" | "characters" => Ok(Self::Chars),
            "tokens" | "words" => Ok(Self::Tokens),
            other => Err(format!("unknown length unit {other:?}")),
        }
    }
}

/// Summary of one group of pairs (the whole dataset or one split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub total: usize,
    pub num_sources: usize,
    pub per_source: BTreeMap<String, usize>,
    pub unique_codes: usize,
    pub quote_len_mean: f64,
    pub quote_len_std: f64,
    pub code_len_mean: f64,
    pub code_len_std: f64,
}

/// Dataset-wide statistics plus a per-split breakdown. Standard deviations
/// are population standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub length_unit: LengthUnit,
    #[serde(flatten)]
    pub overall: SplitStats,
    pub splits: BTreeMap<Split, SplitStats>,
}

fn group_stats<'a>(pairs: impl Iterator<Item = &'a QuoteCodePair>, unit: LengthUnit) -> SplitStats {
    let mut per_source = BTreeMap::new();
    let mut codes = HashSet::new();
    let mut quote_lens = Vec::new();
    let mut code_lens = Vec::new();
    for p in pairs {
        *per_source.entry(p.source.clone()).or_insert(0) += 1;
        codes.insert(p.code.as_str());
        quote_lens.push(unit.measure(&p.quote) as f64);
        code_lens.push(unit.measure(&p.code) as f64);
    }
    SplitStats {
        total: quote_lens.len(),
        num_sources: per_source.len(),
        per_source,
        unique_codes: codes.len(),
        quote_len_mean: mean(&quote_lens).unwrap_or(0.0),
        quote_len_std: population_std(&quote_lens).unwrap_or(0.0),
        code_len_mean: mean(&code_lens).unwrap_or(0.0),
        code_len_std: population_std(&code_lens).unwrap_or(0.0),
    }
}

pub fn compute_stats(d: &Dataset) -> Result<DatasetStats, CorpusError> {
    compute_stats_with(d, LengthUnit::Chars)
}

pub fn compute_stats_with(d: &Dataset, unit: LengthUnit) -> Result<DatasetStats, CorpusError> {
    if d.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut groups: HashMap<Split, Vec<&QuoteCodePair>> = HashMap::new();
    for p in &d.pairs {
        groups.entry(p.split).or_default().push(p);
    }
    let splits = groups
        .into_iter()
        .map(|(split, members)| (split, group_stats(members.into_iter(), unit)))
        .collect();
    Ok(DatasetStats { length_unit: unit, overall: group_stats(d.pairs.iter(), unit), splits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, quote: &str, code: &str, source: &str) -> QuoteCodePair {
        QuoteCodePair {
            id: id.into(),
            quote: quote.into(),
            code: code.into(),
            source: source.into(),
            split: Split::Unassigned,
        }
    }

    #[test]
    fn loads_two_jsonl_rows() {
        let input = r#"{"id":"q1","quote":"I like it.","code":"liking","source":"s1"}
{"quote":"The food was cold.","code":"food quality","split":"test"}
"#;
        let d = read_dataset(input.as_bytes(), DatasetFormat::Jsonl).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.pairs()[1].id, "row-2");
        assert_eq!(d.pairs()[1].source, DEFAULT_SOURCE);
        assert_eq!(d.pairs()[1].split, Split::Test);
        assert_eq!(d.sources().len(), 2);
    }

    #[test]
    fn empty_code_is_schema_error_at_index() {
        let input = "{\"quote\":\"a\",\"code\":\"x\"}\n{\"quote\":\"b\",\"code\":\"  \"}\n";
        match read_dataset(input.as_bytes(), DatasetFormat::Jsonl) {
            Err(CorpusError::Schema { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_quote_names_record() {
        let input = "{\"code\":\"x\"}\n";
        let err = read_dataset(input.as_bytes(), DatasetFormat::Jsonl).unwrap_err();
        assert!(err.to_string().contains("record 0"), "{err}");
        assert!(err.to_string().contains("quote"), "{err}");
    }

    #[test]
    fn empty_file_is_empty_error() {
        assert!(matches!(read_dataset(&b""[..], DatasetFormat::Jsonl), Err(CorpusError::Empty)));
        assert!(matches!(read_dataset(&b""[..], DatasetFormat::Csv), Err(CorpusError::Empty)));
        assert!(matches!(
            read_dataset(&b"quote,code\n"[..], DatasetFormat::Csv),
            Err(CorpusError::Empty)
        ));
    }

    #[test]
    fn csv_with_quoted_fields() {
        let input = "id,quote,code,source,split\nq1,\"Well, \"\"fine\"\", I guess\",acceptance,s,train\n";
        let d = read_dataset(input.as_bytes(), DatasetFormat::Csv).unwrap();
        assert_eq!(d.pairs()[0].quote, "Well, \"fine\", I guess");
        assert_eq!(d.pairs()[0].split, Split::Train);
    }

    #[test]
    fn csv_requires_header_columns() {
        let err = read_dataset(&b"id,text\n1,a\n"[..], DatasetFormat::Csv).unwrap_err();
        assert!(matches!(err, CorpusError::Schema { .. }));
    }

    #[test]
    fn merge_identity_and_collisions() {
        let x = Dataset::new(vec![pair("q1", "a", "b", "s")]).unwrap();
        assert_eq!(merge(&x, &Dataset::empty()), x);

        let y = Dataset::new(vec![pair("q1", "c", "d", "t"), pair("q2", "e", "f", "t")]).unwrap();
        let m = merge(&x, &y);
        let ids: Vec<_> = m.pairs().iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["a/q1", "b/q1", "q2"]);
        assert_eq!(m.sources().len(), 2);
    }

    #[test]
    fn split_half_of_four() {
        let d = Dataset::new((0..4).map(|i| pair(&format!("q{i}"), "x", "y", "s")).collect()).unwrap();
        let s = split_dataset(&d, 0.5, 1).unwrap();
        assert_eq!(s.split_pairs(Split::Test).len(), 2);
        assert_eq!(s.split_pairs(Split::Train).len(), 2);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let d = Dataset::new(vec![pair("q", "x", "y", "s")]).unwrap();
        for f in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(split_dataset(&d, f, 0), Err(CorpusError::FractionOutOfRange(_))));
        }
    }

    #[test]
    fn split_is_deterministic() {
        let d = Dataset::new(
            (0..30).map(|i| pair(&format!("q{i}"), "x", "y", if i % 3 == 0 { "a" } else { "b" })).collect(),
        )
        .unwrap();
        assert_eq!(split_dataset(&d, 0.2, 9).unwrap(), split_dataset(&d, 0.2, 9).unwrap());
    }

    #[test]
    fn stats_hand_computed() {
        let d = Dataset::new(vec![pair("1", "ab", "x", "s"), pair("2", "abcd", "x", "s")]).unwrap();
        let s = compute_stats(&d).unwrap();
        assert_eq!(s.overall.quote_len_mean, 3.0);
        assert_eq!(s.overall.quote_len_std, 1.0);
        assert_eq!(s.overall.unique_codes, 1);

        let one = Dataset::new(vec![pair("1", "abc", "x", "s")]).unwrap();
        assert_eq!(compute_stats(&one).unwrap().overall.quote_len_std, 0.0);
        assert!(matches!(compute_stats(&Dataset::empty()), Err(CorpusError::Empty)));
    }

    #[test]
    fn token_lengths_are_configurable() {
        let d = Dataset::new(vec![pair("1", "one two three", "a b", "s")]).unwrap();
        let s = compute_stats_with(&d, LengthUnit::Tokens).unwrap();
        assert_eq!(s.overall.quote_len_mean, 3.0);
        assert_eq!(s.overall.code_len_mean, 2.0);
    }
}
