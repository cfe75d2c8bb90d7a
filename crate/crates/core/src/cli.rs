//! Command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | I/O or internal error |
//! | 2 | usage or configuration error |
//! | 3 | invalid input data |
//! | 4 | authentication error |
//! | 5 | backend error |
//! | 6 | finished, but some items failed (outputs kept for `--resume`) |

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, CorpusError, Dialogue, IngestMode, SamplePlan, Source};
use crate::evaluate::{self, JudgeConfig, JudgeError, RankingRecord};
use crate::expand::{self, ExpandError, ExpansionJob, ExpansionRecord, GenerationStyle, Mode};
use crate::jsonl;
use crate::llm::cassette::{check_cassette, ReplayBackend};
use crate::llm::http::{HttpBackend, DEFAULT_API_KEY_ENV, DEFAULT_BASE_URL};
use crate::llm::mock::{EchoBackend, OracleJudge, RandomJudge, SyntheticGenerator};
use crate::llm::{BackendPolicy, ChatBackend, LlmError};
use crate::metrics::{self, MetricsError, ReportLabels};
use crate::prompts::{PromptError, PromptTemplateSet};
use crate::relations::{RelationCatalog, RelationError};
use crate::report::{self, CrossGrid, GridFormat};

/// A failed command: typed name, message and exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub code: i32,
}

impl CliError {
    fn new(kind: impl Into<String>, message: impl Into<String>, code: i32) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            code,
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new("ConfigError", message, 2)
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::new("IoError", format!("{}: {e}", path.display()), 1)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error[{}]: {}", self.kind, self.message)
    }
}

fn llm_code(e: &LlmError) -> i32 {
    match e {
        LlmError::Auth(_) => 4,
        LlmError::InvalidRequest(_) => 2,
        _ => 5,
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        Self::new(e.kind(), e.to_string(), llm_code(&e))
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let (kind, code) = match &e {
            CorpusError::FileUnreadable { .. } => ("FileUnreadable", 1),
            CorpusError::UnknownAdapter(_) => ("UnknownAdapter", 2),
            CorpusError::InvalidPlan(_) => ("InvalidPlan", 2),
            CorpusError::MalformedRecord { .. } => ("MalformedRecord", 3),
            CorpusError::InsufficientEligible { .. } => ("InsufficientEligible", 3),
        };
        Self::new(kind, e.to_string(), code)
    }
}

impl From<ExpandError> for CliError {
    fn from(e: ExpandError) -> Self {
        let code = match &e {
            ExpandError::Llm(l) => llm_code(l),
            ExpandError::InvalidJob(_) | ExpandError::MissingExemplar { .. } => 2,
            ExpandError::Io { .. } => 1,
            _ => 3,
        };
        Self::new(e.kind(), e.to_string(), code)
    }
}

impl From<JudgeError> for CliError {
    fn from(e: JudgeError) -> Self {
        let code = match &e {
            JudgeError::Llm(l) => llm_code(l),
            JudgeError::InvalidConfig(_) | JudgeError::Prompt(PromptError::InvalidTemplates(_)) => 2,
            JudgeError::Io { .. } => 1,
            _ => 3,
        };
        Self::new(e.kind(), e.to_string(), code)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let kind = match e {
            MetricsError::EmptyInput => "EmptyInput",
            MetricsError::InvalidK(_) => "InvalidK",
            MetricsError::InvalidRank(_) => "InvalidRank",
            MetricsError::ZeroLengthOriginal { .. } => "ZeroLengthOriginal",
        };
        Self::new(kind, e.to_string(), 3)
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        Self::new("InvalidTemplates", e.to_string(), 2)
    }
}

impl From<RelationError> for CliError {
    fn from(e: RelationError) -> Self {
        let kind = match e {
            RelationError::UnknownRelation(_) => "UnknownRelation",
            RelationError::UnknownPlaceholder { .. } => "UnknownPlaceholder",
            _ => "InvalidCatalog",
        };
        Self::new(kind, e.to_string(), 2)
    }
}

fn default_run_id() -> String {
    "run".into()
}
fn default_generator_model() -> String {
    "gpt-3.5-turbo".into()
}
fn default_judge_model() -> String {
    "gpt-4".into()
}
fn default_base_url() -> String {
    DEFAULT_BASE_URL.into()
}
fn default_api_key() -> String {
    format!("${{{DEFAULT_API_KEY_ENV}}}")
}
fn default_out_root() -> PathBuf {
    PathBuf::from("runs")
}
fn default_backend() -> String {
    "http".into()
}
fn default_gen_temperature() -> f64 {
    expand::DEFAULT_GENERATION_TEMPERATURE
}
fn default_gen_tokens() -> u32 {
    expand::DEFAULT_GENERATION_MAX_TOKENS
}
fn default_eval_tokens() -> u32 {
    evaluate::DEFAULT_JUDGE_MAX_TOKENS
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    #[serde(default = "default_gen_temperature")]
    pub temperature: f64,
    #[serde(default = "default_gen_tokens")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub style: GenerationStyle,
    #[serde(default = "default_true")]
    pub reask_gaps: bool,
    #[serde(default)]
    pub context_window: Option<usize>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_eval_tokens")]
    pub max_output_tokens: u32,
    #[serde(default)]
    pub context_window: Option<usize>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// Everything needed to reproduce a run. Stored in the run directory with
/// command-line overrides applied; `api_key` is kept as an environment
/// reference and never resolved on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    /// Seeds sampling and the random mock judge.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sample: SamplePlan,
    #[serde(default)]
    pub catalog_path: Option<PathBuf>,
    #[serde(default)]
    pub templates_path: Option<PathBuf>,
    #[serde(default = "default_generator_model")]
    pub generator_model: String,
    #[serde(default = "default_judge_model")]
    pub judge_model: String,
    #[serde(default)]
    pub mode: ModeConfig,
    #[serde(default)]
    pub exemplars_path: Option<PathBuf>,
    #[serde(default)]
    pub policy: BackendPolicy,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_base_url")]
    pub base_url: String,
    /// `${VAR}`: the key is read from environment variable `VAR`.
    #[serde(default = "default_api_key")]
    pub api_key: String,
    #[serde(default = "default_out_root")]
    pub out_root: PathBuf,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

/// [`Mode`] with a default, for config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeConfig(pub Mode);

impl Default for ModeConfig {
    fn default() -> Self {
        ModeConfig(Mode::ZeroShot)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.run_id.is_empty()
            || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
            || self.run_id.starts_with('.')
        {
            return Err(CliError::config(format!(
                "run_id `{}` must be non-empty and use only letters, digits, `.`, `_` and `-`",
                self.run_id
            )));
        }
        self.policy.validate().map_err(CliError::config)?;
        self.sample.validate()?;
        env_reference(&self.api_key)?;
        BackendSpec::parse(&self.backend)?;
        if self.mode.0 == Mode::OneShot && self.exemplars_path.is_none() {
            return Err(CliError::config("one-shot mode needs exemplars_path"));
        }
        if self.generation.context_window == Some(0) || self.evaluation.context_window == Some(0) {
            return Err(CliError::config("context_window must be >= 1"));
        }
        Ok(())
    }

    pub fn catalog(&self) -> Result<RelationCatalog, CliError> {
        match &self.catalog_path {
            Some(p) => Ok(RelationCatalog::load_overrides(p)?),
            None => Ok(RelationCatalog::builtin()),
        }
    }

    pub fn templates(&self) -> Result<PromptTemplateSet, CliError> {
        match &self.templates_path {
            Some(p) => Ok(PromptTemplateSet::load(p)?),
            None => Ok(PromptTemplateSet::default()),
        }
    }

    pub fn sample_plan(&self) -> SamplePlan {
        SamplePlan {
            seed: self.seed,
            ..self.sample.clone()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_root.join(&self.run_id)
    }

    fn to_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Name of the environment variable in a `${VAR}` reference. Literal keys are
/// refused so that stored configs never contain a secret.
fn env_reference(value: &str) -> Result<&str, CliError> {
    value
        .strip_prefix("${")
        .and_then(|v| v.strip_suffix('}'))
        .filter(|v| !v.is_empty() && v.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
        .ok_or_else(|| CliError::config("api_key must be an environment reference such as ${OPENAI_API_KEY}"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockKind {
    Echo,
    Generator,
    RandomJudge(Option<u64>),
    OracleJudge,
    InverseJudge,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Http,
    Mock(MockKind),
    Replay(PathBuf),
}

impl BackendSpec {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let bad = || {
            CliError::config(format!(
                "unknown backend `{s}` (expected http, replay:<path> or mock:<echo|generator|random-judge[:seed]|oracle-judge|inverse-judge>)"
            ))
        };
        if s == "http" {
            return Ok(BackendSpec::Http);
        }
        if let Some(path) = s.strip_prefix("replay:") {
            if path.is_empty() {
                return Err(bad());
            }
            return Ok(BackendSpec::Replay(PathBuf::from(path)));
        }
        let kind = s.strip_prefix("mock:").ok_or_else(bad)?;
        Ok(BackendSpec::Mock(match kind {
            "echo" => MockKind::Echo,
            "generator" => MockKind::Generator,
            "random-judge" => MockKind::RandomJudge(None),
            "oracle-judge" => MockKind::OracleJudge,
            "inverse-judge" => MockKind::InverseJudge,
            k => match k.strip_prefix("random-judge:") {
                Some(seed) => MockKind::RandomJudge(Some(seed.parse().map_err(|_| bad())?)),
                None => return Err(bad()),
            },
        }))
    }
}

fn build_backend(cfg: &RunConfig, record: Option<&Path>, catalog: &RelationCatalog) -> Result<Box<dyn ChatBackend>, CliError> {
    let spec = BackendSpec::parse(&cfg.backend)?;
    let inner: Box<dyn ChatBackend> = match spec {
        BackendSpec::Http => {
            let var = env_reference(&cfg.api_key)?;
            Box::new(HttpBackend::from_env(&cfg.base_url, var, cfg.policy.clone())?)
        }
        BackendSpec::Replay(path) => {
            if record.is_some() {
                return Err(CliError::config("--record cannot be combined with a replay backend"));
            }
            return Ok(Box::new(ReplayBackend::strict(&path)?));
        }
        BackendSpec::Mock(kind) => match kind {
            MockKind::Echo => Box::new(EchoBackend),
            MockKind::Generator => Box::new(SyntheticGenerator::new(catalog)),
            MockKind::RandomJudge(seed) => Box::new(RandomJudge::new(seed.unwrap_or(cfg.seed), catalog.len())),
            MockKind::OracleJudge => Box::new(OracleJudge::new(catalog.clone())),
            MockKind::InverseJudge => Box::new(OracleJudge::inverse(catalog.clone())),
        },
    };
    match record {
        Some(path) => Ok(Box::new(ReplayBackend::recording(path, inner)?)),
        None => Ok(inner),
    }
}

#[derive(Parser, Debug)]
#[command(name = "csaug", version, about = "Commonsense-conditioned dialogue turn augmentation and listwise judging")]
pub struct Cli {
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a raw dataset file to canonical JSONL.
    Ingest(IngestArgs),
    /// Draw a seeded sample of dialogues per source.
    Sample(SampleArgs),
    /// Generate one response per relation for every expandable turn.
    Expand(ExpandArgs),
    /// Rank relation definitions against each generated response.
    Judge(JudgeArgs),
    /// Convert externally produced rankings into ranking records.
    ImportRankings(ImportArgs),
    /// Compute metrics and render grids, confusion data and sample sheets.
    Report(ReportArgs),
    /// Check a cassette for malformed lines, duplicate keys and tampering.
    ReplayCheck(ReplayCheckArgs),
    /// Parse and validate a run configuration.
    ValidateConfig(ValidateArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Source name, e.g. DailyDialog.
    #[arg(long)]
    pub source: String,
    /// Adapter: canonical, dailydialog, topicalchat, empatheticdialogues, personachat, wizardofwikipedia.
    #[arg(long, default_value = "canonical")]
    pub format: String,
    #[arg(long)]
    pub output: PathBuf,
    /// Fail on the first malformed record (default).
    #[arg(long, conflicts_with = "lenient")]
    pub strict: bool,
    /// Skip malformed records and report them.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Directory holding run directories.
    #[arg(long)]
    pub out_root: Option<PathBuf>,
    /// http, replay:<cassette> or mock:<kind>.
    #[arg(long)]
    pub backend: Option<String>,
    /// Record every backend answer into this cassette.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Continue a previous run, skipping finished items.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Canonical corpus files; repeat for several sources.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub per_source: Option<usize>,
    #[arg(long)]
    pub min_turns: Option<usize>,
    #[arg(long)]
    pub max_turns: Option<usize>,
    /// Comma-separated source names.
    #[arg(long, value_delimiter = ',')]
    pub sources: Option<Vec<String>>,
}

#[derive(Args, Debug)]
pub struct ExpandArgs {
    /// Canonical JSONL of the dialogues to expand.
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    #[arg(long)]
    pub generator_model: Option<String>,
}

#[derive(Args, Debug)]
pub struct JudgeArgs {
    /// Canonical JSONL holding the expanded dialogues.
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// Expansion records; defaults to the run directory's expansions.jsonl.
    #[arg(long)]
    pub expansions: Option<PathBuf>,
    #[arg(long)]
    pub judge_model: Option<String>,
    /// File-name label for this judge's outputs; defaults to the model name.
    #[arg(long)]
    pub judge_label: Option<String>,
}

#[derive(Args, Debug)]
pub struct ImportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub judge_label: String,
    #[arg(long, default_value = "external")]
    pub run_id: String,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// `GENERATOR|JUDGE|RANKINGS[|EXPANSIONS]`; repeat for every cell.
    #[arg(long = "cell", required = true)]
    pub cells: Vec<String>,
    /// `GENERATOR|JUDGE` of a cell to show as absent.
    #[arg(long = "absent")]
    pub absent: Vec<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Samples per relation for the sample sheet; 0 disables it.
    #[arg(long, default_value_t = 0)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub sample_seed: u64,
    /// Corpus used to show context in the sample sheet.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub context_turns: usize,
}

#[derive(Args, Debug)]
pub struct ReplayCheckArgs {
    #[arg(long)]
    pub cassette: PathBuf,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
}

/// What a command reports on success.
pub struct Outcome {
    pub human: String,
    pub json: serde_json::Value,
    /// 0, or 6 when some items failed.
    pub code: i32,
}

fn outcome<T: Serialize>(human: String, summary: &T, failed: bool) -> Outcome {
    Outcome {
        human,
        json: serde_json::to_value(summary).expect("summary serializes"),
        code: if failed { 6 } else { 0 },
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    jsonl::write_atomic(path, text.as_bytes()).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializes");
    s.push('\n');
    write_text(path, &s)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_run_args(cfg: &mut RunConfig, args: &RunArgs) {
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = &args.run_id {
        cfg.run_id = r.clone();
    }
    if let Some(o) = &args.out_root {
        cfg.out_root = o.clone();
    }
    if let Some(b) = &args.backend {
        cfg.backend = b.clone();
    }
}

/// Labels become file names: keep `[A-Za-z0-9._-]`, replace the rest.
pub fn file_label(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    if s.is_empty() {
        "_".into()
    } else {
        s
    }
}

fn cmd_ingest(a: &IngestArgs) -> Result<Outcome, CliError> {
    let source: Source = a.source.parse().unwrap_or_else(|never| match never {});
    let mode = if a.lenient { IngestMode::Lenient } else { IngestMode::Strict };
    let ingested = corpus::ingest(&a.input, &source, &a.format, mode)?;
    corpus::write_canonical(&a.output, &ingested.dialogues).map_err(|e| CliError::io(&a.output, e))?;
    #[derive(Serialize)]
    struct S<'a> {
        dialogues: usize,
        skipped: usize,
        reasons: &'a std::collections::BTreeMap<String, usize>,
        output: String,
    }
    let s = S {
        dialogues: ingested.dialogues.len(),
        skipped: ingested.skips.skipped,
        reasons: &ingested.skips.reasons,
        output: a.output.display().to_string(),
    };
    let mut human = format!("ingested {} dialogues into {}", s.dialogues, s.output);
    if s.skipped > 0 {
        let reasons: Vec<String> = s.reasons.iter().map(|(k, v)| format!("{k}: {v}")).collect();
        human.push_str(&format!("\nskipped {} ({})", s.skipped, reasons.join(", ")));
    }
    Ok(outcome(human, &s, false))
}

fn read_corpus(path: &Path) -> Result<Vec<Dialogue>, CliError> {
    Ok(corpus::read_canonical(path)?)
}

fn cmd_sample(a: &SampleArgs) -> Result<Outcome, CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.per_source {
        cfg.sample.dialogues_per_source = n;
    }
    if let Some(n) = a.min_turns {
        cfg.sample.min_turns = n;
    }
    if let Some(n) = a.max_turns {
        cfg.sample.max_turns = n;
    }
    if let Some(s) = &a.sources {
        cfg.sample.sources = s.iter().map(|n| n.trim().parse().unwrap_or_else(|never| match never {})).collect();
    }
    let mut all = Vec::new();
    for p in &a.corpus {
        all.extend(read_corpus(p)?);
    }
    let plan = cfg.sample_plan();
    let picked = corpus::sample(&all, &plan)?;
    corpus::write_canonical(&a.output, &picked).map_err(|e| CliError::io(&a.output, e))?;
    let mut per_source = std::collections::BTreeMap::new();
    for d in &picked {
        *per_source.entry(d.source.to_string()).or_insert(0usize) += 1;
    }
    let expandable = corpus::count_expandable_turns(&picked);
    let json = serde_json::json!({
        "dialogues": picked.len(),
        "expandable_turns": expandable,
        "expected_records": expandable * cfg.catalog()?.len(),
        "per_source": per_source,
        "seed": plan.seed,
        "output": a.output.display().to_string(),
    });
    let human = format!(
        "sampled {} dialogues ({} expandable turns) into {}",
        picked.len(),
        expandable,
        a.output.display()
    );
    Ok(Outcome { human, json, code: 0 })
}

fn prepare_output(path: &Path, resume: bool) -> Result<(), CliError> {
    if path.exists() && !resume {
        return Err(CliError::new(
            "OutputExists",
            format!("{} already exists; pass --resume to continue it", path.display()),
            2,
        ));
    }
    Ok(())
}

fn cmd_expand(a: &ExpandArgs) -> Result<Outcome, CliError> {
    let mut cfg = load_config(a.run.config.as_deref())?;
    apply_run_args(&mut cfg, &a.run);
    if let Some(m) = &a.mode {
        cfg.mode = ModeConfig(m.parse().map_err(CliError::config)?);
    }
    if let Some(e) = &a.exemplars {
        cfg.exemplars_path = Some(e.clone());
    }
    if let Some(g) = &a.generator_model {
        cfg.generator_model = g.clone();
    }
    cfg.validate()?;
    let catalog = cfg.catalog()?;
    let templates = cfg.templates()?;
    let exemplars = match (&cfg.mode.0, &cfg.exemplars_path) {
        (Mode::OneShot, Some(p)) => Some(expand::load_exemplars(p)?),
        _ => None,
    };
    let dialogues = read_corpus(&a.corpus)?;
    let job = ExpansionJob {
        catalog: catalog.clone(),
        mode: cfg.mode.0,
        exemplars,
        templates,
        policy: cfg.policy.clone(),
        style: cfg.generation.style,
        context_window: cfg.generation.context_window,
        temperature: cfg.generation.temperature,
        max_output_tokens: cfg.generation.max_output_tokens,
        reask_gaps: cfg.generation.reask_gaps,
        ..ExpansionJob::new(&cfg.run_id, dialogues, &cfg.generator_model)
    };
    job.validate()?;
    let run_dir = cfg.run_dir();
    let out = run_dir.join("expansions.jsonl");
    prepare_output(&out, a.run.resume)?;
    // Credentials are checked here, before anything is written.
    let backend = build_backend(&cfg, a.run.record.as_deref(), &catalog)?;
    std::fs::create_dir_all(&run_dir).map_err(|e| CliError::io(&run_dir, e))?;
    write_text(&run_dir.join("config.expand.json"), &cfg.to_pretty())?;
    let summary = expand::expand_corpus(&job, backend.as_ref(), &out)?;
    write_json(&run_dir.join("expand.summary.json"), &summary)?;
    let mut human = format!(
        "expanded {}/{} positions: {} records ({} new), {} gaps, {} failed -> {}",
        summary.positions_expanded + summary.positions_resumed,
        summary.positions_total,
        summary.records_total,
        summary.records_new,
        summary.gaps.iter().map(|g| g.relations.len()).sum::<usize>(),
        summary.positions_failed,
        out.display()
    );
    if let Some(r) = summary.pooled_length_ratio {
        human.push_str(&format!("\npooled length ratio {r:.3} (reference {:.2})", metrics::REFERENCE_LENGTH_RATIO));
    }
    let failed = summary.positions_failed > 0;
    Ok(outcome(human, &summary, failed))
}

fn cmd_judge(a: &JudgeArgs) -> Result<Outcome, CliError> {
    let mut cfg = load_config(a.run.config.as_deref())?;
    apply_run_args(&mut cfg, &a.run);
    if let Some(j) = &a.judge_model {
        cfg.judge_model = j.clone();
    }
    cfg.validate()?;
    let catalog = cfg.catalog()?;
    let judge_cfg = JudgeConfig {
        catalog: catalog.clone(),
        templates: cfg.templates()?,
        policy: cfg.policy.clone(),
        temperature: cfg.evaluation.temperature,
        max_output_tokens: cfg.evaluation.max_output_tokens,
        context_window: cfg.evaluation.context_window,
        ..JudgeConfig::new(&cfg.run_id, &cfg.judge_model)
    };
    judge_cfg.validate()?;
    let run_dir = cfg.run_dir();
    let label = file_label(a.judge_label.as_deref().unwrap_or(&cfg.judge_model));
    let expansions_path = a.expansions.clone().unwrap_or_else(|| run_dir.join("expansions.jsonl"));
    let records: Vec<ExpansionRecord> =
        jsonl::read_records(&expansions_path).map_err(|e| CliError::new("MalformedRecord", format!("{}: {e}", expansions_path.display()), 3))?;
    if !expansions_path.exists() {
        return Err(CliError::io(&expansions_path, "no such file"));
    }
    let dialogues = read_corpus(&a.corpus)?;
    let out = run_dir.join(format!("rankings.{label}.jsonl"));
    prepare_output(&out, a.run.resume)?;
    let backend = build_backend(&cfg, a.run.record.as_deref(), &catalog)?;
    std::fs::create_dir_all(&run_dir).map_err(|e| CliError::io(&run_dir, e))?;
    write_text(&run_dir.join(format!("config.judge.{label}.json")), &cfg.to_pretty())?;
    let summary = evaluate::judge_set(&records, &dialogues, &judge_cfg, backend.as_ref(), &out)?;
    write_json(&run_dir.join(format!("judge.{label}.summary.json")), &summary)?;
    let human = format!(
        "judged {}/{} records with {} ({} new, {} completed by policy, {} excluded) -> {}",
        summary.rankings_total,
        summary.records_total,
        summary.judge_model,
        summary.judged_new,
        summary.completion_applied,
        summary.n_excluded(),
        out.display()
    );
    let failed = summary.n_excluded() > 0;
    Ok(outcome(human, &summary, failed))
}

fn cmd_import(a: &ImportArgs) -> Result<Outcome, CliError> {
    let catalog = match &a.catalog {
        Some(p) => RelationCatalog::load_overrides(p)?,
        None => RelationCatalog::builtin(),
    };
    let records = evaluate::import_external_rankings(&a.input, &catalog, &a.run_id, &a.judge_label)?;
    jsonl::write_all(&a.output, &records).map_err(|e| CliError::io(&a.output, e))?;
    let completed = records.iter().filter(|r| r.completion_applied).count();
    let json = serde_json::json!({"records": records.len(), "completion_applied": completed, "output": a.output.display().to_string()});
    Ok(Outcome {
        human: format!("imported {} rankings ({} completed by policy) into {}", records.len(), completed, a.output.display()),
        json,
        code: 0,
    })
}

struct CellSpec {
    generator: String,
    judge: String,
    rankings: PathBuf,
    expansions: Option<PathBuf>,
}

fn parse_cell(s: &str) -> Result<CellSpec, CliError> {
    let parts: Vec<&str> = s.split('|').map(str::trim).collect();
    if !(3..=4).contains(&parts.len()) || parts[..3].iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("--cell `{s}` must be GENERATOR|JUDGE|RANKINGS[|EXPANSIONS]")));
    }
    Ok(CellSpec {
        generator: parts[0].to_string(),
        judge: parts[1].to_string(),
        rankings: PathBuf::from(parts[2]),
        expansions: parts.get(3).filter(|p| !p.is_empty()).map(PathBuf::from),
    })
}

fn push_unique(v: &mut Vec<String>, s: &str) {
    if !v.iter().any(|x| x == s) {
        v.push(s.to_string());
    }
}

fn cmd_report(a: &ReportArgs) -> Result<Outcome, CliError> {
    let catalog = match &a.catalog {
        Some(p) => RelationCatalog::load_overrides(p)?,
        None => RelationCatalog::builtin(),
    };
    if a.ks.contains(&0) {
        return Err(CliError::config("--ks values must be >= 1"));
    }
    let cells: Vec<CellSpec> = a.cells.iter().map(|c| parse_cell(c)).collect::<Result<_, _>>()?;
    let mut absent = Vec::new();
    for s in &a.absent {
        match s.split_once('|') {
            Some((g, j)) if !g.trim().is_empty() && !j.trim().is_empty() => absent.push((g.trim().to_string(), j.trim().to_string())),
            _ => return Err(CliError::config(format!("--absent `{s}` must be GENERATOR|JUDGE"))),
        }
    }
    let (mut rows, mut cols) = (Vec::new(), Vec::new());
    for c in &cells {
        push_unique(&mut rows, &c.generator);
        push_unique(&mut cols, &c.judge);
    }
    for (g, j) in &absent {
        push_unique(&mut rows, g);
        push_unique(&mut cols, j);
    }
    let mut grid = CrossGrid::new(rows, cols, a.ks.clone());
    let metrics_dir = a.out_dir.join("metrics");
    let confusion_dir = a.out_dir.join("confusion");
    let mut sample_sources: Vec<(String, Vec<ExpansionRecord>)> = Vec::new();
    for c in &cells {
        let rankings: Vec<RankingRecord> = jsonl::read_records(&c.rankings)
            .map_err(|e| CliError::new("MalformedRecord", format!("{}: {e}", c.rankings.display()), 3))?;
        if !c.rankings.exists() {
            return Err(CliError::io(&c.rankings, "no such file"));
        }
        let expansions: Vec<ExpansionRecord> = match &c.expansions {
            Some(p) => {
                if !p.exists() {
                    return Err(CliError::io(p, "no such file"));
                }
                jsonl::read_records(p).map_err(|e| CliError::new("MalformedRecord", format!("{}: {e}", p.display()), 3))?
            }
            None => Vec::new(),
        };
        let labels = ReportLabels {
            generator: c.generator.clone(),
            judge: c.judge.clone(),
        };
        let rep = metrics::report(&rankings, &expansions, &labels, &a.ks, &catalog)?;
        let stem = format!("{}__{}", file_label(&c.generator), file_label(&c.judge));
        write_json(&metrics_dir.join(format!("{stem}.json")), &rep)?;
        let conf = report::render_confusion(&rep);
        write_text(&confusion_dir.join(format!("{stem}.counts.csv")), &conf.counts_csv)?;
        write_text(&confusion_dir.join(format!("{stem}.normalized.csv")), &conf.normalized_csv)?;
        write_text(&confusion_dir.join(format!("{stem}.json")), &conf.json)?;
        if !expansions.is_empty() && !sample_sources.iter().any(|(g, _)| *g == c.generator) {
            sample_sources.push((c.generator.clone(), expansions));
        }
        grid.set(rep);
    }
    for (g, j) in &absent {
        grid.mark_absent(g, j);
    }
    let mut text = report::render_grid(&grid, GridFormat::Text);
    let notes = report::render_length_notes(&grid);
    if !notes.is_empty() {
        text.push('\n');
        text.push_str(&notes);
    }
    write_text(&a.out_dir.join("grid.txt"), &text)?;
    write_text(&a.out_dir.join("grid.csv"), &report::render_grid(&grid, GridFormat::Csv))?;
    let grid_json = report::render_grid(&grid, GridFormat::Json);
    write_text(&a.out_dir.join("grid.json"), &grid_json)?;
    if a.samples > 0 {
        let dialogues = match &a.corpus {
            Some(p) => read_corpus(p)?,
            None => Vec::new(),
        };
        for (generator, expansions) in &sample_sources {
            let sheet = report::render_samples(expansions, &dialogues, a.samples, a.sample_seed, a.context_turns);
            write_text(&a.out_dir.join(format!("samples.{}.txt", file_label(generator))), &sheet)?;
        }
    }
    let json: serde_json::Value = serde_json::from_str(&grid_json).expect("valid json");
    Ok(Outcome {
        human: text,
        json,
        code: 0,
    })
}

fn cmd_replay_check(a: &ReplayCheckArgs) -> Result<Outcome, CliError> {
    if !a.cassette.exists() {
        return Err(CliError::io(&a.cassette, "no such file"));
    }
    let check = check_cassette(&a.cassette)?;
    let human = format!(
        "{}: {} entries, {} duplicate keys, {} key mismatches, {} malformed lines",
        a.cassette.display(),
        check.entries,
        check.duplicate_keys,
        check.key_mismatches.len(),
        check.malformed_lines.len()
    );
    if !check.is_clean() {
        return Err(CliError::new("CassetteCorrupt", human, 3));
    }
    Ok(outcome(human, &check, false))
}

fn cmd_validate(a: &ValidateArgs) -> Result<Outcome, CliError> {
    let cfg = RunConfig::load(&a.config)?;
    let catalog = cfg.catalog()?;
    cfg.templates()?;
    if let (Mode::OneShot, Some(p)) = (cfg.mode.0, &cfg.exemplars_path) {
        expand::load_exemplars(p)?;
    }
    let json = serde_json::to_value(&cfg).expect("config serializes");
    Ok(Outcome {
        human: format!("{} is valid ({} relations, run directory {})", a.config.display(), catalog.len(), cfg.run_dir().display()),
        json,
        code: 0,
    })
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Expand(a) => cmd_expand(a),
        Command::Judge(a) => cmd_judge(a),
        Command::ImportRankings(a) => cmd_import(a),
        Command::Report(a) => cmd_report(a),
        Command::ReplayCheck(a) => cmd_replay_check(a),
        Command::ValidateConfig(a) => cmd_validate(a),
    }
}

/// Parses `args`, runs the command, prints results and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli) {
        Ok(out) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out.json).expect("json"));
            } else {
                println!("{}", out.human.trim_end());
            }
            out.code
        }
        Err(e) => {
            eprintln!("{e}");
            e.code
        }
    }
}
