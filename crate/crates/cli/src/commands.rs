//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use qualcode::agreement::{
    self, AlphaResult, CorrelationMethod, DgsOptions, DifficultyRating, LabelRating, RatingMatrix, Scale, GOLD_SOURCE,
};
use qualcode::corpus::{self, Dataset, DatasetFormat, LengthUnit, Split};
use qualcode::experiment::{self, EmbeddingConfig, ExperimentConfig, MetricFlags, RunOptions};
use qualcode::gateway::{CachingEmbedder, Gateway, ModelEndpoint, ResponseCache, TokenEmbedder};
use qualcode::prompting::{render_prompt, select_examples, TemplateLibrary, Terminator};
use qualcode::readability::{self, Analyzer, EasyWords, SyllableMethod};
use qualcode::text_metrics::{aggregate_scores, ScoredItem, ScoringItem};
use qualcode_annotate::Service;
use serde::Serialize;
use serde_json::json;

use crate::input;
use crate::{
    AgreeCmd, Command, DatasetCmd, EmbeddingArgs, GenerateArgs, PromptCmd, ReadabilityArgs, ReportCmd, RunArgs,
    ScoreArgs, ServeArgs,
};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Dataset(c) => dataset(c),
        Command::Run(a) => run(a),
        Command::Score(a) => score(a),
        Command::Readability(a) => readability_cmd(a),
        Command::Prompt(c) => prompt(c),
        Command::Generate(a) => generate(a),
        Command::Agree(c) => agree(c),
        Command::Report(c) => report(c),
        Command::Serve(a) => serve(a),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn print_text(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    if !text.ends_with('\n') {
        writeln!(out)?;
    }
    Ok(())
}

fn load(path: &Path) -> Result<Dataset> {
    let format = DatasetFormat::from_path(path)?;
    Ok(corpus::load_dataset(path, format)?)
}

fn emit_dataset(d: &Dataset, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            corpus::save_dataset(d, path, DatasetFormat::from_path(path)?)?;
            log::info!("wrote {} pairs to {}", d.len(), path.display());
            Ok(())
        }
        None => Ok(corpus::write_dataset(d, std::io::stdout().lock(), DatasetFormat::Jsonl)?),
    }
}

// ---------------------------------------------------------------- dataset

fn dataset(cmd: DatasetCmd) -> Result<()> {
    match cmd {
        DatasetCmd::Stats { path, unit } => {
            let unit: LengthUnit = unit.parse().map_err(|e: String| anyhow!(e))?;
            print_json(&corpus::compute_stats_with(&load(&path)?, unit)?)
        }
        DatasetCmd::Split { path, fraction, seed, out } => {
            let split = corpus::split_dataset(&load(&path)?, fraction, seed)?;
            log::info!(
                "{} train / {} test (seed {seed})",
                split.split_pairs(Split::Train).len(),
                split.split_pairs(Split::Test).len()
            );
            emit_dataset(&split, out.as_deref())
        }
        DatasetCmd::Merge { a, b, label_a, label_b, out } => {
            let merged = corpus::merge_labeled(&load(&a)?, &label_a, &load(&b)?, &label_b);
            emit_dataset(&merged, out.as_deref())
        }
    }
}

// ---------------------------------------------------------------- run

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.selection_seed = seed;
    }
    let options = RunOptions { output_dir: args.output_dir, offline: args.offline };
    let result = experiment::run(&cfg, &options)?;
    let failed: usize = result.conditions.iter().map(|c| c.summary.n_failed).sum();
    if failed > 0 {
        log::warn!("{failed} cell(s) failed; see the per-condition files");
    }
    print_json(&json!({
        "run_dir": result.run_dir,
        "manifest": result.manifest,
        "conditions": result.summaries(),
    }))
}

// ---------------------------------------------------------------- score

fn metric_flags(spec: &str) -> Result<MetricFlags> {
    let mut flags = MetricFlags { rouge: false, bertscore: false };
    for m in spec.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        match m.to_ascii_lowercase().as_str() {
            "rouge" => flags.rouge = true,
            "bertscore" | "bert" => flags.bertscore = true,
            other => bail!("unknown metric {other:?} (rouge, bertscore)"),
        }
    }
    if !flags.rouge && !flags.bertscore {
        bail!("no metrics selected");
    }
    Ok(flags)
}

fn embedder(args: &EmbeddingArgs) -> Result<Box<dyn TokenEmbedder>> {
    let cfg = match &args.embedding_url {
        Some(url) => EmbeddingConfig::Http {
            name: "embedding".into(),
            base_url: url.clone(),
            model_id: args.embedding_model.clone(),
            auth_env: None,
        },
        None => EmbeddingConfig::default(),
    };
    Ok(cfg.build()?)
}

fn with_cache<R>(args: &EmbeddingArgs, f: impl FnOnce(&dyn TokenEmbedder) -> Result<R>) -> Result<R> {
    let inner = embedder(args)?;
    match &args.cache_dir {
        Some(dir) => {
            let cache = ResponseCache::open(dir)?;
            f(&CachingEmbedder { inner: inner.as_ref(), cache: &cache, offline: false })
        }
        None => f(inner.as_ref()),
    }
}

fn score(args: ScoreArgs) -> Result<()> {
    let metrics = metric_flags(&args.metrics)?;
    let items: Vec<ScoringItem> = match (&args.input, &args.pred, &args.reference) {
        (Some(path), _, _) => input::records(path)?
            .into_iter()
            .map(|r| serde_json::from_value(serde_json::Value::Object(r)).context("items need id, candidate, reference"))
            .collect::<Result<_>>()?,
        (None, Some(pred), Some(reference)) => input::join_by_id(
            input::id_texts(pred, &["code", "candidate", "text"])?,
            input::id_texts(reference, &["code", "reference", "text"])?,
        )?
        .into_iter()
        .map(|(id, candidate, reference)| ScoringItem { id, candidate, reference })
        .collect(),
        _ => bail!("give either --input or both --pred and --ref"),
    };
    if items.is_empty() {
        bail!("nothing to score");
    }
    let scored: Vec<ScoredItem> = with_cache(&args.embedding, |emb| {
        items
            .into_iter()
            .map(|item| {
                let s = experiment::score_pair(&item.candidate, &item.reference, metrics, emb)
                    .with_context(|| format!("scoring {}", item.id))?;
                Ok(ScoredItem::new(item, &s))
            })
            .collect()
    })?;
    if let Some(path) = &args.per_pair {
        write_rows(path, &scored)?;
    }
    let report = aggregate_scores(&scored.iter().map(ScoredItem::scores).collect::<Vec<_>>())?;
    print_json(&report)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut w = csv::Writer::from_path(path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    } else {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(path, text)?;
    }
    log::info!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

// ---------------------------------------------------------------- readability

fn readability_cmd(args: ReadabilityArgs) -> Result<()> {
    let method: SyllableMethod = args.syllables.parse()?;
    let custom = args.easy_words.as_ref().map(EasyWords::load).transpose()?;
    let easy = custom.as_ref().unwrap_or_else(|| EasyWords::builtin());
    let analyzer = Analyzer::new(method, easy);
    if args.conformance {
        let report = readability::conformance_report(&analyzer);
        return if args.text { print_text(&report.to_text()) } else { print_json(&report) };
    }
    let Some(path) = args.file else { bail!("give a file or --conformance") };
    let texts = match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "ndjson" | "json" | "csv") => input::id_texts(&path, &["text", "quote"])?,
        _ => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("text").to_string();
            vec![(id, text)]
        }
    };
    let profiles = texts
        .iter()
        .map(|(id, text)| {
            let p = analyzer.profile(text).with_context(|| format!("profiling {id}"))?;
            Ok(json!({ "id": id, "profile": p }))
        })
        .collect::<Result<Vec<_>>>()?;
    print_json(&profiles)
}

// ---------------------------------------------------------------- prompting

fn library(path: Option<&Path>) -> Result<TemplateLibrary> {
    Ok(match path {
        Some(p) => TemplateLibrary::load(p)?,
        None => TemplateLibrary::builtin(),
    })
}

fn prompt(cmd: PromptCmd) -> Result<()> {
    match cmd {
        PromptCmd::List { templates } => print_json(&library(templates.as_deref())?.specs()),
        PromptCmd::Render { template, terminator, quote, pool, k, seed, templates } => {
            let terminator: Terminator = terminator.parse().map_err(|e| anyhow!("{e}"))?;
            let tpl = library(templates.as_deref())?.get(&template, terminator)?;
            let examples = match (&pool, k) {
                (_, 0) => Vec::new(),
                (None, _) => bail!("--k > 0 needs --pool"),
                (Some(p), _) => {
                    let d = load(p)?;
                    let train: Vec<_> = d.split_pairs(Split::Train).into_iter().cloned().collect();
                    let candidates = if train.is_empty() { d.pairs().to_vec() } else { train };
                    select_examples(&candidates, k, seed)?
                }
            };
            print_json(&render_prompt(&tpl, &quote, &examples)?)
        }
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let endpoint = ModelEndpoint::new(&args.name, &args.base_url, &args.model);
    let mut gateway = Gateway::http().offline(args.offline);
    if let Some(dir) = &args.cache_dir {
        gateway = gateway.with_cache(ResponseCache::open(dir)?);
    }
    let (record, from_cache) = gateway.complete(&endpoint, &args.prompt)?;
    let raw = record.choices.first().cloned().unwrap_or_default();
    let code = qualcode::prompting::postprocess_code(&raw).ok();
    print_json(&json!({ "raw": raw, "code": code, "cache_key": record.cache_key, "from_cache": from_cache }))
}

// ---------------------------------------------------------------- agreement

fn agree(cmd: AgreeCmd) -> Result<()> {
    match cmd {
        AgreeCmd::Alpha { matrix, scale, labels } => {
            let results: Vec<AlphaResult> = if labels {
                let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(&matrix)?;
                let units: Vec<Vec<Option<String>>> = rdr
                    .records()
                    .map(|r| {
                        let r = r?;
                        Ok(r.iter().skip(1).map(|c| (!c.trim().is_empty()).then(|| c.to_string())).collect())
                    })
                    .collect::<Result<_>>()?;
                vec![agreement::krippendorff_alpha_labels(&units)?]
            } else {
                let m = RatingMatrix::from_csv(fs::File::open(&matrix).with_context(|| matrix.display().to_string())?)?;
                let scales = match scale {
                    Some(s) => vec![s.parse::<Scale>().map_err(|e| anyhow!("{e}"))?],
                    None => vec![Scale::Nominal, Scale::Ordinal, Scale::Interval],
                };
                scales.into_iter().map(|s| m.alpha(s)).collect::<Result<_, _>>()?
            };
            print_json(&results)
        }
        AgreeCmd::Dgs { ratings, golden, difficulty, exclude_self, rows } => {
            let mut ratings: Vec<LabelRating> = input::csv_rows(&ratings)?;
            if golden != GOLD_SOURCE {
                if ratings.iter().any(|r| r.source == GOLD_SOURCE) {
                    bail!("ratings already contain source {GOLD_SOURCE:?}; cannot also treat {golden:?} as golden");
                }
                for r in ratings.iter_mut().filter(|r| r.source == golden) {
                    r.source = GOLD_SOURCE.to_string();
                }
            }
            if !ratings.iter().any(|r| r.source == GOLD_SOURCE) {
                bail!("no ratings for golden source {golden:?}");
            }
            let summaries = match difficulty {
                Some(p) => Some(agreement::summarize_difficulty(&input::csv_rows::<DifficultyRating>(&p)?)?),
                None => None,
            };
            let opts = DgsOptions { exclude_self_ratings: exclude_self };
            let report = agreement::dgs_report(&ratings, summaries.as_deref(), &opts)?;
            if let Some(path) = rows {
                fs::write(&path, report.rows_csv())?;
            }
            print_json(&report.sources)
        }
        AgreeCmd::Correlate { file, x, y, method } => {
            let recs = input::records(&file)?;
            let column = |name: &str| -> Result<Vec<f64>> {
                recs.iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let v = r.get(name).ok_or_else(|| anyhow!("row {}: no column {name:?}", i + 1))?;
                        let s = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
                        s.trim().parse::<f64>().with_context(|| format!("row {}: {name} = {s:?}", i + 1))
                    })
                    .collect()
            };
            let (xs, ys) = (column(&x)?, column(&y)?);
            let methods = match method.as_str() {
                "both" => vec![CorrelationMethod::Pearson, CorrelationMethod::Spearman],
                m => vec![m.parse::<CorrelationMethod>().map_err(|e| anyhow!("{e}"))?],
            };
            let mut out = serde_json::Map::new();
            out.insert("n".into(), json!(xs.len()));
            for m in methods {
                let key = match m {
                    CorrelationMethod::Pearson => "pearson",
                    CorrelationMethod::Spearman => "spearman",
                };
                out.insert(key.into(), json!(agreement::correlate(&xs, &ys, m)?));
            }
            print_json(&out)
        }
        AgreeCmd::Difficulty { ratings } => {
            print_json(&agreement::summarize_difficulty(&input::csv_rows::<DifficultyRating>(&ratings)?)?)
        }
        AgreeCmd::Buckets { ratings, difficulty } => {
            let ratings: Vec<LabelRating> = input::csv_rows(&ratings)?;
            let summaries = agreement::summarize_difficulty(&input::csv_rows::<DifficultyRating>(&difficulty)?)?;
            print_json(&agreement::ratings_by_bucket(&ratings, &summaries)?)
        }
    }
}

// ---------------------------------------------------------------- reports

fn print_table(table: &experiment::ConditionTable, format: &str) -> Result<()> {
    match format {
        "csv" => print_text(&table.to_csv()),
        "text" => print_text(&table.to_text()),
        other => bail!("unknown format {other:?} (csv, text, json)"),
    }
}

fn report(cmd: ReportCmd) -> Result<()> {
    match cmd {
        ReportCmd::Conditions { run_dir, format } => {
            let run = experiment::load_run(&run_dir)?;
            let summaries = run.summaries();
            if format == "json" {
                return print_json(&summaries);
            }
            print_table(&experiment::report_conditions(&summaries), &format)
        }
        ReportCmd::SizeSweep { runs } => {
            let mut loaded = Vec::new();
            for spec in &runs {
                let (size, dir) = spec.split_once('=').ok_or_else(|| anyhow!("expected SIZE=RUN_DIR, got {spec:?}"))?;
                let size: usize = size.parse().with_context(|| format!("size in {spec:?}"))?;
                loaded.push((size, experiment::load_run(Path::new(dir))?.summaries()));
            }
            print_text(&experiment::size_sweep_csv(&experiment::report_size_sweep(&loaded)?))
        }
        ReportCmd::Trace { file, format, embedding } => {
            let text = match &file {
                Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                None => experiment::SYNTHETIC_TRACE.to_string(),
            };
            let records = experiment::parse_trace(&text)?;
            let summaries =
                with_cache(&embedding, |emb| Ok(experiment::replay_trace(&records, MetricFlags::default(), emb)?))?;
            if format == "json" {
                return print_json(&summaries);
            }
            print_table(&experiment::report_conditions(&summaries), &format)
        }
    }
}

// ---------------------------------------------------------------- serve

pub const ADMIN_TOKEN_ENV: &str = "QC_ADMIN_TOKEN";

fn serve(args: ServeArgs) -> Result<()> {
    let admin = match std::env::var(ADMIN_TOKEN_ENV) {
        Ok(t) if !t.is_empty() => t,
        _ => {
            let t = uuid::Uuid::new_v4().simple().to_string();
            log::warn!("{ADMIN_TOKEN_ENV} not set; generated admin token {t}");
            t
        }
    };
    let svc = Arc::new(Service::open(&args.data_dir, admin)?);
    if !args.default_project.is_empty() {
        if let Some(created) = svc.ensure_default_project(&args.default_project)? {
            print_json(&created)?;
        }
    }
    let app = qualcode_annotate::router(svc, args.ui_dir);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
            .await
            .with_context(|| format!("binding {}:{}", args.host, args.port))?;
        qualcode_annotate::serve(listener, app).await?;
        Ok(())
    })
}
