//! `qualcode` command line: dataset handling, sweeps, scoring, readability,
//! agreement statistics, reports and the annotation server.
//!
//! Data goes to stdout (JSON or CSV), logs to stderr. Exit code 0 on
//! success, 1 when the operation fails, 2 on usage errors.

mod commands;
mod input;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qualcode::experiment::DEFAULT_SEED;

#[derive(Parser, Debug)]
#[command(name = "qualcode", version, about = "Open-coding workbench: datasets, LLM sweeps, metrics, agreement")]
pub struct Cli {
    /// Log filter (also read from RUST_LOG), e.g. `debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Inspect, split and merge quote/code datasets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Run or resume an experiment sweep from a TOML config.
    Run(RunArgs),
    /// Score predicted codes against references.
    Score(ScoreArgs),
    /// Readability profiles of texts.
    Readability(ReadabilityArgs),
    /// Render prompts from the template suite.
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Send one prompt to a chat-completions endpoint.
    Generate(GenerateArgs),
    /// Agreement and rating statistics.
    #[command(subcommand)]
    Agree(AgreeCmd),
    /// Tables and plot data from finished runs.
    #[command(subcommand)]
    Report(ReportCmd),
    /// Start the annotation service.
    Serve(ServeArgs),
}

#[derive(Subcommand, Debug)]
pub enum DatasetCmd {
    /// Size, per-source counts and length statistics as JSON.
    Stats {
        path: PathBuf,
        /// `chars` or `tokens`.
        #[arg(long, default_value = "chars")]
        unit: String,
    },
    /// Stratified train/test split by source.
    Split {
        path: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Output file (format from extension); stdout as JSONL when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Concatenate two datasets, prefixing colliding ids with a label.
    Merge {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "a")]
        label_a: String,
        #[arg(long, default_value = "b")]
        label_b: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct RunArgs {
    pub config: PathBuf,
    /// Only use cached generations; misses become cell errors.
    #[arg(long)]
    pub offline: bool,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides the exemplar selection seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EmbeddingArgs {
    /// Token-embedding server; the deterministic stub embedder is used when absent.
    #[arg(long)]
    pub embedding_url: Option<String>,
    #[arg(long, default_value = "bert-base-uncased")]
    pub embedding_model: String,
    /// Directory for cached embeddings.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Items with `id`, `candidate`, `reference` (JSONL or CSV).
    #[arg(long, conflicts_with_all = ["pred", "reference"])]
    pub input: Option<PathBuf>,
    /// Predictions: JSONL/CSV with `id` and `code`, or one code per line.
    #[arg(long, requires = "reference")]
    pub pred: Option<PathBuf>,
    /// References in the same shapes as `--pred`, matched by id.
    #[arg(long = "ref", requires = "pred")]
    pub reference: Option<PathBuf>,
    /// Comma-separated subset of `rouge,bertscore`.
    #[arg(long, default_value = "rouge,bertscore")]
    pub metrics: String,
    /// Per-pair scores (CSV or JSONL by extension).
    #[arg(long)]
    pub per_pair: Option<PathBuf>,
    #[command(flatten)]
    pub embedding: EmbeddingArgs,
}

#[derive(Args, Debug)]
pub struct ReadabilityArgs {
    /// JSONL with `id` and `text`, or a plain text file.
    pub file: Option<PathBuf>,
    /// Compare against the bundled reference table instead of reading a file.
    #[arg(long)]
    pub conformance: bool,
    /// `hyphenation` (default) or `vowel-groups`.
    #[arg(long, default_value = "hyphenation")]
    pub syllables: String,
    /// Replacement easy-word list, one word per line.
    #[arg(long)]
    pub easy_words: Option<PathBuf>,
    /// Print the conformance report as text rather than JSON.
    #[arg(long)]
    pub text: bool,
}

#[derive(Subcommand, Debug)]
pub enum PromptCmd {
    /// Template ids and instructions.
    List {
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Render the prompt for one quote.
    Render {
        #[arg(long, default_value = "P1")]
        template: String,
        /// `period` or `linebreak`.
        #[arg(long, default_value = "period")]
        terminator: String,
        #[arg(long)]
        quote: String,
        /// Dataset whose train split (or all pairs) supplies exemplars.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub base_url: String,
    #[arg(long)]
    pub model: String,
    /// Endpoint name, also used for the `QC_AUTH_<NAME>` token variable.
    #[arg(long, default_value = "endpoint")]
    pub name: String,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub offline: bool,
}

#[derive(Subcommand, Debug)]
pub enum AgreeCmd {
    /// Krippendorff's alpha over an items-by-observers CSV.
    Alpha {
        matrix: PathBuf,
        /// `nominal`, `ordinal` or `interval`; all three when omitted.
        #[arg(long)]
        scale: Option<String>,
        /// Treat cells as free-text labels (nominal, case-insensitive).
        #[arg(long)]
        labels: bool,
    },
    /// Difference from the golden standard per source and sentence.
    Dgs {
        /// CSV `expert,sentence,source,value`.
        #[arg(long)]
        ratings: PathBuf,
        /// Source id of the golden-standard labels.
        #[arg(long, default_value = "GS")]
        golden: String,
        /// CSV `rater,sentence,level` for per-bucket averages.
        #[arg(long)]
        difficulty: Option<PathBuf>,
        /// Drop ratings experts gave their own labels.
        #[arg(long)]
        exclude_self: bool,
        /// Write per-sentence rows to this CSV.
        #[arg(long)]
        rows: Option<PathBuf>,
    },
    /// Pearson or Spearman correlation of two CSV columns.
    Correlate {
        file: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        /// `pearson`, `spearman` or `both`.
        #[arg(long, default_value = "both")]
        method: String,
    },
    /// Mean difficulty and bucket per sentence from `rater,sentence,level`.
    Difficulty { ratings: PathBuf },
    /// Mean label rating per source and difficulty bucket.
    Buckets {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        difficulty: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum ReportCmd {
    /// One row per condition of a run directory.
    Conditions {
        run_dir: PathBuf,
        /// `csv`, `text` or `json`.
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// BERTScore F1 against training size from several runs, as CSV.
    SizeSweep {
        /// `SIZE=RUN_DIR`, at least two.
        #[arg(required = true, num_args = 1..)]
        runs: Vec<String>,
    },
    /// Condition table from a recorded generation trace (JSONL).
    Trace {
        /// Trace file; the bundled synthetic trace when omitted.
        file: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: String,
        #[command(flatten)]
        embedding: EmbeddingArgs,
    },
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value = "annotation-data")]
    pub data_dir: PathBuf,
    /// Directory with the built UI bundle, served at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Create the bundled 15-sentence project for these raters (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub default_project: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log))
        .target(env_logger::Target::Stderr)
        .init();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
