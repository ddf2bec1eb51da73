//! Generation-and-scoring sweeps over (endpoint × template × shot count),
//! persisted as inspectable run directories, plus the tabular reports built
//! from them.
//!
//! Run directory layout:
//!
//! ```text
//! <output_dir>/<run_id>/
//!   manifest.json           config digest, dataset hash, per-condition counts, cache stats
//!   conditions/<cond>.jsonl one record per test pair (generation, scores or error)
//!   aggregates.json         ScoreReport per condition
//!   report.csv              one row per condition, BERTScore P/R/F1 (+std) and ROUGE-1/2/L F1
//!   report.txt              the same table, aligned for reading
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, Dataset, DatasetFormat, QuoteCodePair, Split};
use crate::gateway::{CachingEmbedder, Gateway, GatewayError, ModelEndpoint, StubEmbedder, TokenEmbedder};
use crate::prompting::{render_prompt, select_examples, PromptTemplate, ShotCount, TemplateLibrary, Terminator};
use crate::stats::MeanStd;
use crate::text_metrics::{aggregate_scores, bertscore, rouge, PairScores, ScoreReport};

/// Seed used wherever a config leaves one unset.
pub const DEFAULT_SEED: u64 = 20240501;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Prompt(#[from] crate::prompting::PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("I/O at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("every cell of condition {condition} failed; first error: {first_error}")]
    ConditionFailed { condition: String, first_error: String },
    #[error("size sweep needs at least two distinct sizes, got {0}")]
    TooFewSizes(usize),
    #[error("size {size} appears twice for {series}")]
    DuplicateSize { series: String, size: usize },
    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub fraction: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_concurrency() -> usize {
    crate::gateway::DEFAULT_CONCURRENCY
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateChoice {
    pub id: String,
    #[serde(default)]
    pub terminator: Terminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricFlags {
    #[serde(default = "default_true")]
    pub rouge: bool,
    #[serde(default = "default_true")]
    pub bertscore: bool,
}

impl Default for MetricFlags {
    fn default() -> Self {
        Self { rouge: true, bertscore: true }
    }
}

/// Where token embeddings for BERTScore come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbeddingConfig {
    /// Hash-seeded vectors; offline and deterministic, for tests and dry runs.
    Stub {
        #[serde(default = "default_stub_dim")]
        dim: usize,
    },
    /// A token-level embedding server.
    Http {
        name: String,
        base_url: String,
        model_id: String,
        #[serde(default)]
        auth_env: Option<String>,
    },
}

fn default_stub_dim() -> usize {
    StubEmbedder::default().dim
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self::Stub { dim: default_stub_dim() }
    }
}

impl EmbeddingConfig {
    pub fn build(&self) -> Result<Box<dyn TokenEmbedder>, ExperimentError> {
        match self {
            EmbeddingConfig::Stub { dim } => Ok(Box::new(StubEmbedder { dim: *dim })),
            #[cfg(feature = "http")]
            EmbeddingConfig::Http { name, base_url, model_id, auth_env } => {
                let mut e = crate::gateway::HttpEmbedder::new(name.clone(), base_url.clone(), model_id.clone());
                e.auth_env = auth_env.clone();
                Ok(Box::new(e))
            }
            #[cfg(not(feature = "http"))]
            EmbeddingConfig::Http { .. } => Err(GatewayError::HttpDisabled.into()),
        }
    }
}

/// A sweep definition, read from TOML.
///
/// ```toml
/// dataset = "pairs.jsonl"
/// shot_counts = [0, 1]
/// selection_seed = 7
/// [split]                      # optional: re-split instead of using tags
/// fraction = 0.1
/// [[templates]]
/// id = "P1"
/// terminator = "period"        # or "linebreak"
/// [[endpoints]]
/// name = "local"
/// base_url = "http://localhost:8000/v1"
/// model_id = "my-model"
/// [embedding]
/// kind = "stub"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub split: Option<SplitConfig>,
    #[serde(default = "default_seed")]
    pub selection_seed: u64,
    pub shot_counts: Vec<ShotCount>,
    pub templates: Vec<TemplateChoice>,
    pub endpoints: Vec<ModelEndpoint>,
    #[serde(default)]
    pub metrics: MetricFlags,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub templates_file: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(s: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let mut cfg: Self = toml::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.dataset);
        cfg.cache_dir.iter_mut().for_each(resolve);
        cfg.output_dir.iter_mut().for_each(resolve);
        cfg.templates_file.iter_mut().for_each(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.endpoints.is_empty() {
            return bad("at least one endpoint is required");
        }
        if self.templates.is_empty() {
            return bad("at least one template is required");
        }
        if self.shot_counts.is_empty() {
            return bad("at least one shot count is required");
        }
        if !self.metrics.rouge && !self.metrics.bertscore {
            return bad("enable at least one of metrics.rouge and metrics.bertscore");
        }
        for (i, e) in self.endpoints.iter().enumerate() {
            e.validate()?;
            if self.endpoints[..i].iter().any(|o| o.name == e.name) {
                return Err(ExperimentError::Config(format!("endpoint name {:?} is used twice", e.name)));
            }
        }
        if let Some(s) = &self.split {
            if !(s.fraction > 0.0 && s.fraction < 1.0) {
                return bad("split.fraction must be in (0, 1)");
            }
        }
        Ok(())
    }

    pub fn template_library(&self) -> Result<TemplateLibrary, ExperimentError> {
        Ok(match &self.templates_file {
            Some(p) => TemplateLibrary::load(p)?,
            None => TemplateLibrary::builtin(),
        })
    }
}

/// SHA-256 over the canonical JSONL form of a dataset.
pub fn dataset_hash(d: &Dataset) -> String {
    let mut buf = Vec::new();
    corpus::write_dataset(d, &mut buf, DatasetFormat::Jsonl).expect("writing to memory succeeds");
    hex::encode(Sha256::digest(&buf))
}

/// Digest of everything that changes results. Paths, concurrency and
/// credentials are left out; the dataset enters by content and templates
/// by text.
pub fn config_digest(cfg: &ExperimentConfig, dataset_hash: &str, library: &TemplateLibrary) -> Result<String, ExperimentError> {
    let templates: Vec<serde_json::Value> = cfg
        .templates
        .iter()
        .map(|t| {
            let resolved = library.get(&t.id, t.terminator)?;
            Ok(serde_json::json!({"id": t.id, "terminator": t.terminator, "instruction": resolved.instruction()}))
        })
        .collect::<Result<_, ExperimentError>>()?;
    let endpoints: Vec<serde_json::Value> = cfg
        .endpoints
        .iter()
        .map(|e| serde_json::json!({"name": e.name, "base_url": e.base_url, "model_id": e.model_id, "params": e.params}))
        .collect();
    let embedding = match &cfg.embedding {
        EmbeddingConfig::Stub { dim } => serde_json::json!({"kind": "stub", "dim": dim}),
        EmbeddingConfig::Http { base_url, model_id, .. } => {
            serde_json::json!({"kind": "http", "base_url": base_url, "model_id": model_id})
        }
    };
    let canonical = serde_json::json!({
        "dataset": dataset_hash,
        "split": cfg.split,
        "selection_seed": cfg.selection_seed,
        "shot_counts": cfg.shot_counts,
        "templates": templates,
        "endpoints": endpoints,
        "metrics": cfg.metrics,
        "embedding": embedding,
    });
    Ok(hex::encode(Sha256::digest(canonical.to_string().as_bytes())))
}

/// One cell of the experiment matrix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionKey {
    pub endpoint: String,
    pub template_id: String,
    pub terminator: Terminator,
    pub k: usize,
}

impl ConditionKey {
    /// File-name-safe identifier, e.g. `local__P1-period__k3`.
    pub fn id(&self) -> String {
        let safe = |s: &str| -> String {
            s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
        };
        format!("{}__{}-{}__k{}", safe(&self.endpoint), safe(&self.template_id), self.terminator.as_str(), self.k)
    }
}

/// Outcome for one test pair under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub pair_id: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<PairScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CellRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none() && self.scores.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub key: ConditionKey,
    pub n_pairs: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub shot_ids: Vec<String>,
    pub scores: Option<ScoreReport>,
}

impl ConditionSummary {
    /// Summary over the successful cells, in the given order.
    pub fn from_cells(key: ConditionKey, shot_ids: Vec<String>, cells: &[CellRecord]) -> Self {
        let ok: Vec<PairScores> = cells.iter().filter(|c| c.is_ok()).filter_map(|c| c.scores).collect();
        Self {
            key,
            n_pairs: cells.len(),
            n_ok: ok.len(),
            n_failed: cells.len() - ok.len(),
            shot_ids,
            scores: aggregate_scores(&ok).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub network_calls: usize,
    pub reused_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionManifest {
    pub id: String,
    pub key: ConditionKey,
    pub n_pairs: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub config_digest: String,
    pub dataset_hash: String,
    pub embedder: String,
    pub n_test_pairs: usize,
    pub created_at: String,
    pub updated_at: String,
    pub conditions: Vec<ConditionManifest>,
    pub cache: CacheStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub summary: ConditionSummary,
    pub cells: Vec<CellRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub manifest: Manifest,
    pub conditions: Vec<ConditionResult>,
}

impl RunResult {
    pub fn summaries(&self) -> Vec<ConditionSummary> {
        self.conditions.iter().map(|c| c.summary.clone()).collect()
    }
}

/// Runtime knobs that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `output_dir` from the config.
    pub output_dir: Option<PathBuf>,
    /// Fail on cache misses instead of calling endpoints.
    pub offline: bool,
}

/// Test items and exemplar pool after applying the optional re-split.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Vec<QuoteCodePair>, Vec<QuoteCodePair>), ExperimentError> {
    let format = DatasetFormat::from_path(&cfg.dataset)?;
    let mut dataset = corpus::load_dataset(&cfg.dataset, format)?;
    if let Some(s) = cfg.split {
        dataset = corpus::split_dataset(&dataset, s.fraction, s.seed)?;
    }
    let tagged_test: Vec<QuoteCodePair> = dataset.split_pairs(Split::Test).into_iter().cloned().collect();
    let test = if tagged_test.is_empty() { dataset.pairs().to_vec() } else { tagged_test };
    let pool: Vec<QuoteCodePair> = dataset.split_pairs(Split::Train).into_iter().cloned().collect();
    Ok((dataset, test, pool))
}

fn now_rfc3339() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_cells(path: &Path) -> Result<Vec<CellRecord>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| ExperimentError::Parse { path: path.display().to_string(), message: e.to_string() })
        })
        .collect()
}

fn cells_jsonl(cells: &[CellRecord]) -> String {
    let mut out = String::new();
    for c in cells {
        out.push_str(&serde_json::to_string(c).expect("cell serializes"));
        out.push('\n');
    }
    out
}

/// Scores one generated code against its reference.
pub fn score_pair(
    candidate: &str,
    reference: &str,
    metrics: MetricFlags,
    embedder: &dyn TokenEmbedder,
) -> Result<PairScores, ExperimentError> {
    let rouge = if metrics.rouge { rouge(candidate, reference) } else { Default::default() };
    let bertscore = if metrics.bertscore {
        let c = embedder.embed_tokens(candidate)?;
        let r = embedder.embed_tokens(reference)?;
        Some(bertscore(&c, &r).map_err(|e| ExperimentError::Config(e.to_string()))?)
    } else {
        None
    };
    Ok(PairScores { rouge, bertscore })
}

struct CellJob<'a> {
    index: usize,
    pair: &'a QuoteCodePair,
}

/// Runs (or resumes) a sweep with the HTTP gateway.
#[cfg(feature = "http")]
pub fn run(cfg: &ExperimentConfig, options: &RunOptions) -> Result<RunResult, ExperimentError> {
    let mut gateway = Gateway::http().with_concurrency(cfg.concurrency).offline(options.offline);
    if let Some(dir) = &cfg.cache_dir {
        gateway = gateway.with_cache(crate::gateway::ResponseCache::open(dir)?);
    }
    let embedder = cfg.embedding.build()?;
    run_with(cfg, options, &gateway, embedder.as_ref())
}

/// Runs (or resumes) a sweep with a caller-supplied gateway and embedder.
/// Cells already stored successfully in the run directory are reused.
pub fn run_with(
    cfg: &ExperimentConfig,
    options: &RunOptions,
    gateway: &Gateway,
    embedder: &dyn TokenEmbedder,
) -> Result<RunResult, ExperimentError> {
    cfg.validate()?;
    let library = cfg.template_library()?;
    let (dataset, test, pool) = prepare_dataset(cfg)?;
    let data_hash = dataset_hash(&dataset);
    let digest = config_digest(cfg, &data_hash, &library)?;
    let run_id = digest[..16].to_string();
    let root = options.output_dir.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));
    let run_dir = root.join(&run_id);
    let cond_dir = run_dir.join("conditions");
    fs::create_dir_all(&cond_dir).map_err(io_err(&cond_dir))?;

    let previous: Option<Manifest> = fs::read_to_string(run_dir.join("manifest.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let created_at = previous.as_ref().map(|m| m.created_at.clone()).unwrap_or_else(now_rfc3339);

    let cache_embedder;
    let embedder: &dyn TokenEmbedder = match gateway.cache() {
        Some(cache) if cfg.metrics.bertscore => {
            cache_embedder = CachingEmbedder { inner: embedder, cache, offline: options.offline };
            &cache_embedder
        }
        _ => embedder,
    };

    let calls_before = gateway.network_calls();
    let hits = AtomicUsize::new(0);
    let misses = AtomicUsize::new(0);
    let mut reused = 0usize;
    let mut conditions = Vec::new();
    let mut manifests = Vec::new();
    let mut failure = None;

    'outer: for endpoint in &cfg.endpoints {
        for choice in &cfg.templates {
            let template = library.get(&choice.id, choice.terminator)?;
            for &shots in &cfg.shot_counts {
                let k = shots.get();
                let key = ConditionKey {
                    endpoint: endpoint.name.clone(),
                    template_id: template.id.clone(),
                    terminator: template.terminator,
                    k,
                };
                let id = key.id();
                let path = cond_dir.join(format!("{id}.jsonl"));
                let examples = select_examples(&pool, k, cfg.selection_seed)?;
                let shot_ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();

                let stored: BTreeMap<String, CellRecord> = if path.exists() {
                    read_cells(&path)?.into_iter().filter(|c| c.is_ok()).map(|c| (c.pair_id.clone(), c)).collect()
                } else {
                    BTreeMap::new()
                };
                let mut slots: Vec<Option<CellRecord>> = test.iter().map(|p| stored.get(&p.id).cloned()).collect();
                reused += slots.iter().filter(|s| s.is_some()).count();
                let jobs: Vec<CellJob> =
                    test.iter().enumerate().filter(|(i, _)| slots[*i].is_none()).map(|(index, pair)| CellJob { index, pair }).collect();

                let results = Mutex::new(Vec::with_capacity(jobs.len()));
                let next = AtomicUsize::new(0);
                let workers = cfg.concurrency.max(1).min(jobs.len().max(1));
                std::thread::scope(|scope| {
                    for _ in 0..workers {
                        scope.spawn(|| loop {
                            let j = next.fetch_add(1, Ordering::SeqCst);
                            let Some(job) = jobs.get(j) else { break };
                            let cell = run_cell(gateway, endpoint, &template, &examples, job.pair, cfg.metrics, embedder, &hits, &misses);
                            results.lock().unwrap_or_else(|p| p.into_inner()).push((job.index, cell));
                        });
                    }
                });
                for (index, cell) in results.into_inner().unwrap_or_else(|p| p.into_inner()) {
                    slots[index] = Some(cell);
                }
                let cells: Vec<CellRecord> = slots.into_iter().map(|c| c.expect("every slot filled")).collect();
                write_atomic(&path, cells_jsonl(&cells).as_bytes())?;

                let summary = ConditionSummary::from_cells(key.clone(), shot_ids, &cells);
                let errors: Vec<String> =
                    cells.iter().filter_map(|c| c.error.as_ref().map(|e| format!("{}: {e}", c.pair_id))).collect();
                manifests.push(ConditionManifest {
                    id: id.clone(),
                    key,
                    n_pairs: summary.n_pairs,
                    n_ok: summary.n_ok,
                    n_failed: summary.n_failed,
                    errors: errors.iter().take(20).cloned().collect(),
                });
                let all_failed = summary.n_ok == 0 && summary.n_pairs > 0;
                conditions.push(ConditionResult { summary, cells });
                if all_failed {
                    failure = Some(ExperimentError::ConditionFailed { condition: id, first_error: errors[0].clone() });
                    break 'outer;
                }
            }
        }
    }

    let manifest = Manifest {
        run_id: run_id.clone(),
        config_digest: digest,
        dataset_hash: data_hash,
        embedder: embedder.id(),
        n_test_pairs: test.len(),
        created_at,
        updated_at: now_rfc3339(),
        conditions: manifests,
        cache: CacheStats {
            hits: hits.into_inner(),
            misses: misses.into_inner(),
            network_calls: gateway.network_calls() - calls_before,
            reused_cells: reused,
        },
    };
    let result = RunResult { run_id, run_dir: run_dir.clone(), manifest, conditions };
    write_run_files(&result)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(result),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    gateway: &Gateway,
    endpoint: &ModelEndpoint,
    template: &PromptTemplate,
    examples: &[QuoteCodePair],
    pair: &QuoteCodePair,
    metrics: MetricFlags,
    embedder: &dyn TokenEmbedder,
    hits: &AtomicUsize,
    misses: &AtomicUsize,
) -> CellRecord {
    let mut cell = CellRecord {
        pair_id: pair.id.clone(),
        reference: pair.code.clone(),
        raw: None,
        code: None,
        cache_key: None,
        scores: None,
        error: None,
    };
    let outcome = (|| -> Result<(), ExperimentError> {
        let prompt = render_prompt(template, &pair.quote, examples)?;
        let generated = gateway.generate(endpoint, &prompt, &pair.id);
        let generated = match generated {
            Ok(g) => g,
            Err(e) => {
                misses.fetch_add(1, Ordering::SeqCst);
                return Err(e.into());
            }
        };
        if generated.from_cache { hits } else { misses }.fetch_add(1, Ordering::SeqCst);
        cell.raw = Some(generated.raw);
        cell.cache_key = Some(generated.cache_key);
        cell.scores = Some(score_pair(&generated.code, &pair.code, metrics, embedder)?);
        cell.code = Some(generated.code);
        Ok(())
    })();
    if let Err(e) = outcome {
        log::warn!("{} / {}: {e}", endpoint.name, pair.id);
        cell.error = Some(e.to_string());
    }
    cell
}

fn write_run_files(result: &RunResult) -> Result<(), ExperimentError> {
    let dir = &result.run_dir;
    let manifest = serde_json::to_vec_pretty(&result.manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), &manifest)?;
    let aggregates: BTreeMap<String, &ConditionSummary> =
        result.conditions.iter().map(|c| (c.summary.key.id(), &c.summary)).collect();
    write_atomic(&dir.join("aggregates.json"), &serde_json::to_vec_pretty(&aggregates).expect("aggregates serialize"))?;
    let table = report_conditions(&result.summaries());
    write_atomic(&dir.join("report.csv"), table.to_csv().as_bytes())?;
    write_atomic(&dir.join("report.txt"), table.to_text().as_bytes())?;
    Ok(())
}

/// Reads a run directory back, recomputing each condition summary from its
/// stored cells.
pub fn load_run(run_dir: &Path) -> Result<RunResult, ExperimentError> {
    let mpath = run_dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| ExperimentError::Parse { path: mpath.display().to_string(), message: e.to_string() })?;
    let apath = run_dir.join("aggregates.json");
    let atext = fs::read_to_string(&apath).map_err(io_err(&apath))?;
    let stored: BTreeMap<String, ConditionSummary> = serde_json::from_str(&atext)
        .map_err(|e| ExperimentError::Parse { path: apath.display().to_string(), message: e.to_string() })?;
    let mut conditions = Vec::new();
    for c in &manifest.conditions {
        let cells = read_cells(&run_dir.join("conditions").join(format!("{}.jsonl", c.id)))?;
        let shot_ids = stored.get(&c.id).map(|s| s.shot_ids.clone()).unwrap_or_default();
        let summary = ConditionSummary::from_cells(c.key.clone(), shot_ids, &cells);
        conditions.push(ConditionResult { summary, cells });
    }
    Ok(RunResult { run_id: manifest.run_id.clone(), run_dir: run_dir.to_path_buf(), manifest, conditions })
}

/// One row of the condition table: BERTScore P/R/F1 with standard
/// deviations, then ROUGE-1/2/L F1 means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub model: String,
    pub template: String,
    pub terminator: Terminator,
    pub k: usize,
    pub n: usize,
    pub bert_p: Option<f64>,
    pub bert_p_std: Option<f64>,
    pub bert_r: Option<f64>,
    pub bert_r_std: Option<f64>,
    pub bert_f1: Option<f64>,
    pub bert_f1_std: Option<f64>,
    pub rouge1: Option<f64>,
    pub rouge2: Option<f64>,
    #[serde(rename = "rougeL")]
    pub rouge_l: Option<f64>,
}

pub const METRIC_COLUMNS: [&str; 9] =
    ["bert_p", "bert_p_std", "bert_r", "bert_r_std", "bert_f1", "bert_f1_std", "rouge1", "rouge2", "rougeL"];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionTable {
    pub rows: Vec<ConditionRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ConditionTable {
    /// CSV with full-precision floats; parsing it back is lossless.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,template,terminator,k,n");
        for c in METRIC_COLUMNS {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            let mut fields = vec![r.model.clone(), r.template.clone(), r.terminator.as_str().to_string(), r.k.to_string(), r.n.to_string()];
            fields.extend(
                [r.bert_p, r.bert_p_std, r.bert_r, r.bert_r_std, r.bert_f1, r.bert_f1_std, r.rouge1, r.rouge2, r.rouge_l]
                    .map(fmt_opt),
            );
            w.write_record(&fields).expect("in-memory write");
            out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, ExperimentError> {
        let parse_err = |m: String| ExperimentError::Parse { path: "<report csv>".into(), message: m };
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            if rec.len() != 5 + METRIC_COLUMNS.len() {
                return Err(parse_err(format!("expected 14 fields, got {}", rec.len())));
            }
            let num = |i: usize| -> Result<Option<f64>, ExperimentError> {
                let s = &rec[i];
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|e| parse_err(format!("{s:?}: {e}")))
                }
            };
            rows.push(ConditionRow {
                model: rec[0].to_string(),
                template: rec[1].to_string(),
                terminator: rec[2].parse().map_err(parse_err)?,
                k: rec[3].parse().map_err(|e| parse_err(format!("k: {e}")))?,
                n: rec[4].parse().map_err(|e| parse_err(format!("n: {e}")))?,
                bert_p: num(5)?,
                bert_p_std: num(6)?,
                bert_r: num(7)?,
                bert_r_std: num(8)?,
                bert_f1: num(9)?,
                bert_f1_std: num(10)?,
                rouge1: num(11)?,
                rouge2: num(12)?,
                rouge_l: num(13)?,
            });
        }
        Ok(Self { rows })
    }

    /// Aligned table with `mean_{std}` cells at three decimals.
    pub fn to_text(&self) -> String {
        let header = ["Model", "Prompt", "Shots", "n", "BERT P", "BERT R", "BERT F1", "ROUGE-1", "ROUGE-2", "ROUGE-L"];
        let ms = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => MeanStd { mean: m, std: s }.formatted(3),
            _ => "-".to_string(),
        };
        let one = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        let rows: Vec<[String; 10]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    format!("{}{}", r.template, if r.terminator == Terminator::LineBreak { "\\n" } else { "." }),
                    r.k.to_string(),
                    r.n.to_string(),
                    ms(r.bert_p, r.bert_p_std),
                    ms(r.bert_r, r.bert_r_std),
                    ms(r.bert_f1, r.bert_f1_std),
                    one(r.rouge1),
                    one(r.rouge2),
                    one(r.rouge_l),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(header.to_vec(), &mut out);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(rule.iter().map(String::as_str).collect(), &mut out);
        for r in &rows {
            line(r.iter().map(String::as_str).collect(), &mut out);
        }
        out
    }
}

/// One table row per condition, in the order given.
pub fn report_conditions(summaries: &[ConditionSummary]) -> ConditionTable {
    let rows = summaries
        .iter()
        .map(|s| {
            let sc = s.scores.as_ref();
            let bert = |f: fn(&ScoreReport) -> Option<MeanStd>| sc.and_then(f);
            let (bp, br, bf) = (bert(|r| r.bert_precision), bert(|r| r.bert_recall), bert(|r| r.bert_f1));
            ConditionRow {
                model: s.key.endpoint.clone(),
                template: s.key.template_id.clone(),
                terminator: s.key.terminator,
                k: s.key.k,
                n: s.n_ok,
                bert_p: bp.map(|m| m.mean),
                bert_p_std: bp.map(|m| m.std),
                bert_r: br.map(|m| m.mean),
                bert_r_std: br.map(|m| m.std),
                bert_f1: bf.map(|m| m.mean),
                bert_f1_std: bf.map(|m| m.std),
                rouge1: sc.map(|r| r.rouge1.f1.mean),
                rouge2: sc.map(|r| r.rouge2.f1.mean),
                rouge_l: sc.map(|r| r.rouge_l.f1.mean),
            }
        })
        .collect();
    ConditionTable { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub size: usize,
    pub mean_f1: f64,
    pub std_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSeries {
    pub series: String,
    pub points: Vec<SizePoint>,
}

/// BERTScore F1 against training-set size, one series per condition label
/// (the endpoint name, qualified by template and shots when a run holds more
/// than one condition for that endpoint). Points are sorted by size.
pub fn report_size_sweep(runs: &[(usize, Vec<ConditionSummary>)]) -> Result<Vec<SizeSeries>, ExperimentError> {
    let sizes: std::collections::BTreeSet<usize> = runs.iter().map(|(s, _)| *s).collect();
    if sizes.len() < 2 {
        return Err(ExperimentError::TooFewSizes(sizes.len()));
    }
    let mut series: BTreeMap<String, Vec<SizePoint>> = BTreeMap::new();
    for (size, summaries) in runs {
        for s in summaries {
            let per_endpoint = summaries.iter().filter(|o| o.key.endpoint == s.key.endpoint).count();
            let label = if per_endpoint > 1 {
                format!("{}/{}-{}/k{}", s.key.endpoint, s.key.template_id, s.key.terminator.as_str(), s.key.k)
            } else {
                s.key.endpoint.clone()
            };
            let Some(f1) = s.scores.as_ref().and_then(|r| r.bert_f1) else { continue };
            let points = series.entry(label.clone()).or_default();
            if points.iter().any(|p| p.size == *size) {
                return Err(ExperimentError::DuplicateSize { series: label, size: *size });
            }
            points.push(SizePoint { size: *size, mean_f1: f1.mean, std_f1: f1.std });
        }
    }
    Ok(series
        .into_iter()
        .map(|(series, mut points)| {
            points.sort_by_key(|p| p.size);
            SizeSeries { series, points }
        })
        .collect())
}

pub fn size_sweep_csv(series: &[SizeSeries]) -> String {
    let mut out = String::from("series,size,bert_f1,bert_f1_std\n");
    for s in series {
        for p in &s.points {
            let _ = writeln!(out, "{},{},{},{}", s.series, p.size, p.mean_f1, p.std_f1);
        }
    }
    out
}

/// One recorded generation, enough to rescore it offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub endpoint: String,
    pub template_id: String,
    #[serde(default)]
    pub terminator: Terminator,
    pub k: usize,
    pub pair_id: String,
    pub reference: String,
    pub raw: String,
}

pub fn parse_trace(jsonl: &str) -> Result<Vec<TraceRecord>, ExperimentError> {
    jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ExperimentError::Trace { line: i + 1, message: e.to_string() }))
        .collect()
}

/// A small synthetic trace (three models, two prompts, zero- and one-shot)
/// for exercising the report path offline.
pub const SYNTHETIC_TRACE: &str = include_str!("../data/synthetic_trace.jsonl");

/// Re-scores recorded generations and groups them into condition summaries,
/// ordered by first appearance in the trace.
pub fn replay_trace(
    records: &[TraceRecord],
    metrics: MetricFlags,
    embedder: &dyn TokenEmbedder,
) -> Result<Vec<ConditionSummary>, ExperimentError> {
    let mut order: Vec<ConditionKey> = Vec::new();
    let mut cells: BTreeMap<ConditionKey, Vec<CellRecord>> = BTreeMap::new();
    for r in records {
        let key = ConditionKey {
            endpoint: r.endpoint.clone(),
            template_id: r.template_id.clone(),
            terminator: r.terminator,
            k: r.k,
        };
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        let mut cell = CellRecord {
            pair_id: r.pair_id.clone(),
            reference: r.reference.clone(),
            raw: Some(r.raw.clone()),
            code: None,
            cache_key: None,
            scores: None,
            error: None,
        };
        match crate::prompting::postprocess_code(&r.raw) {
            Ok(code) => {
                cell.scores = Some(score_pair(&code, &r.reference, metrics, embedder)?);
                cell.code = Some(code);
            }
            Err(e) => cell.error = Some(e.to_string()),
        }
        cells.entry(key).or_default().push(cell);
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let c = &cells[&key];
            ConditionSummary::from_cells(key, Vec::new(), c)
        })
        .collect())
}
