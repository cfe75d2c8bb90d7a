//! Turn-level expansion: one alternative response per relation for every
//! expandable position of every dialogue.
//!
//! Position `p` (1-based turn index, `p >= 1`) is expanded from the context
//! `turns[..p]`; the dataset's own turn `p` is kept as `original_text` so the
//! generated text can be compared with it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dialogue, Turn};
use crate::jsonl::{self, Appender};
use crate::llm::batch::{parallel_map, Throttled};
use crate::llm::{BackendPolicy, ChatBackend, ChatRequest, LlmError, Usage};
use crate::prompts::{
    build_expansion_prompt, build_reask_prompt, parse_expansion_reply, BuiltPrompt, ExpansionReply, PromptError,
    PromptTemplateSet,
};
use crate::relations::{RelationCatalog, RelationId, SpeakerBinding};

pub const DEFAULT_GENERATION_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_GENERATION_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ZeroShot,
    OneShot,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::ZeroShot => "zero-shot",
            Mode::OneShot => "one-shot",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "zero-shot" | "zeroshot" => Ok(Mode::ZeroShot),
            "one-shot" | "oneshot" => Ok(Mode::OneShot),
            _ => Err(format!("unknown mode `{s}` (expected zero-shot or one-shot)")),
        }
    }
}

/// One listwise prompt per position, or one prompt per (position, relation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationStyle {
    #[default]
    Listwise,
    PerRelation,
}

#[derive(Debug, Error)]
pub enum ExpandError {
    #[error("invalid expansion job: {0}")]
    InvalidJob(String),
    #[error("turn {position} of dialogue {dialogue_id} is not expandable ({turns} turns)")]
    InvalidPosition {
        dialogue_id: String,
        position: usize,
        turns: usize,
    },
    #[error("no exemplar for {relation} at {dialogue_id} turn {turn_index}")]
    MissingExemplar {
        dialogue_id: String,
        turn_index: usize,
        relation: RelationId,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("line {line}: unknown relation `{name}`")]
    UnknownRelation { line: usize, name: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl ExpandError {
    pub fn kind(&self) -> &'static str {
        match self {
            ExpandError::InvalidJob(_) => "InvalidJob",
            ExpandError::InvalidPosition { .. } => "InvalidPosition",
            ExpandError::MissingExemplar { .. } => "MissingExemplar",
            ExpandError::Prompt(PromptError::UnparseableReply(_)) => "UnparseableReply",
            ExpandError::Prompt(_) => "PromptError",
            ExpandError::Llm(e) => e.kind(),
            ExpandError::MalformedRecord { .. } => "MalformedRecord",
            ExpandError::UnknownRelation { .. } => "UnknownRelation",
            ExpandError::Io { .. } => "IoError",
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        ExpandError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

/// One-shot exemplars: position-specific entries shadow per-relation
/// fallbacks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Exemplars {
    positional: HashMap<(String, usize, RelationId), String>,
    fallback: HashMap<RelationId, String>,
}

impl Exemplars {
    pub fn insert_fallback(&mut self, relation: RelationId, text: impl Into<String>) {
        self.fallback.insert(relation, text.into());
    }

    pub fn insert_positional(
        &mut self,
        dialogue_id: impl Into<String>,
        turn_index: usize,
        relation: RelationId,
        text: impl Into<String>,
    ) {
        self.positional.insert((dialogue_id.into(), turn_index, relation), text.into());
    }

    pub fn resolve(&self, dialogue_id: &str, turn_index: usize, relation: RelationId) -> Option<&str> {
        self.positional
            .get(&(dialogue_id.to_string(), turn_index, relation))
            .or_else(|| self.fallback.get(&relation))
            .map(String::as_str)
    }

    /// Exemplar for every catalog relation at a position.
    pub fn for_position(
        &self,
        dialogue_id: &str,
        turn_index: usize,
        catalog: &RelationCatalog,
    ) -> Result<HashMap<RelationId, String>, ExpandError> {
        catalog
            .ids()
            .map(|r| match self.resolve(dialogue_id, turn_index, r) {
                Some(t) => Ok((r, t.to_string())),
                None => Err(ExpandError::MissingExemplar {
                    dialogue_id: dialogue_id.to_string(),
                    turn_index,
                    relation: r,
                }),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.positional.len() + self.fallback.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExemplarLine {
    dialogue_id: Option<String>,
    turn_index: Option<usize>,
    relation: String,
    text: String,
}

/// Reads a JSONL exemplar file of
/// `{"dialogue_id"?, "turn_index"?, "relation", "text"}` lines. Entries
/// without a position are per-relation fallbacks.
pub fn load_exemplars(path: &Path) -> Result<Exemplars, ExpandError> {
    let text = std::fs::read_to_string(path).map_err(|e| ExpandError::io(path, e))?;
    let mut ex = Exemplars::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ExemplarLine = serde_json::from_str(line).map_err(|e| ExpandError::MalformedRecord {
            line: line_no,
            message: e.to_string(),
        })?;
        let relation = RelationId::ALL
            .into_iter()
            .find(|r| r.name() == entry.relation.trim())
            .ok_or_else(|| ExpandError::UnknownRelation {
                line: line_no,
                name: entry.relation.clone(),
            })?;
        if entry.text.trim().is_empty() {
            return Err(ExpandError::MalformedRecord {
                line: line_no,
                message: "empty exemplar text".into(),
            });
        }
        match (entry.dialogue_id, entry.turn_index) {
            (Some(d), Some(t)) => ex.insert_positional(d, t, relation, entry.text),
            (None, None) => ex.insert_fallback(relation, entry.text),
            _ => {
                return Err(ExpandError::MalformedRecord {
                    line: line_no,
                    message: "dialogue_id and turn_index must be given together".into(),
                })
            }
        }
    }
    Ok(ex)
}

/// Everything that determines an expansion run.
#[derive(Debug, Clone)]
pub struct ExpansionJob {
    pub run_id: String,
    pub dialogues: Vec<Dialogue>,
    pub catalog: RelationCatalog,
    pub mode: Mode,
    /// Required in one-shot mode.
    pub exemplars: Option<Exemplars>,
    pub generator_model: String,
    pub templates: PromptTemplateSet,
    pub policy: BackendPolicy,
    pub style: GenerationStyle,
    /// Number of preceding turns shown; `None` shows the whole prefix.
    pub context_window: Option<usize>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Re-ask once for indices missing from the first reply.
    pub reask_gaps: bool,
}

impl ExpansionJob {
    /// Zero-shot listwise job with default templates and policy.
    pub fn new(run_id: impl Into<String>, dialogues: Vec<Dialogue>, generator_model: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            dialogues,
            catalog: RelationCatalog::builtin(),
            mode: Mode::ZeroShot,
            exemplars: None,
            generator_model: generator_model.into(),
            templates: PromptTemplateSet::default(),
            policy: BackendPolicy::default(),
            style: GenerationStyle::Listwise,
            context_window: None,
            temperature: DEFAULT_GENERATION_TEMPERATURE,
            max_output_tokens: DEFAULT_GENERATION_MAX_TOKENS,
            reask_gaps: true,
        }
    }

    pub fn validate(&self) -> Result<(), ExpandError> {
        let bad = |m: String| Err(ExpandError::InvalidJob(m));
        if self.run_id.trim().is_empty() {
            return bad("run_id is empty".into());
        }
        if self.generator_model.trim().is_empty() {
            return bad("generator_model is empty".into());
        }
        if self.context_window == Some(0) {
            return bad("context_window must be >= 1".into());
        }
        self.policy.validate().map_err(ExpandError::InvalidJob)?;
        self.templates.validate()?;
        let mut ids = HashSet::new();
        for d in &self.dialogues {
            if !ids.insert(d.id.as_str()) {
                return bad(format!("duplicate dialogue id {}", d.id));
            }
        }
        match (self.mode, &self.exemplars) {
            (Mode::OneShot, None) => return bad("one-shot mode needs an exemplar file".into()),
            (Mode::OneShot, Some(ex)) => {
                for d in &self.dialogues {
                    for p in 1..d.turns.len() {
                        ex.for_position(&d.id, p, &self.catalog)?;
                    }
                }
            }
            (Mode::ZeroShot, _) => {}
        }
        Ok(())
    }

    fn context<'a>(&self, dialogue: &'a Dialogue, position: usize) -> &'a [Turn] {
        let start = self.context_window.map_or(0, |w| position.saturating_sub(w));
        &dialogue.turns[start..position]
    }

    fn request(&self, prompt: &BuiltPrompt, tag: String) -> ChatRequest {
        ChatRequest::new(&self.generator_model, &prompt.text)
            .with_temperature(self.temperature)
            .with_max_output_tokens(self.max_output_tokens)
            .with_tag(tag)
    }

    /// Prompt sent first for `position`; with `relation` in per-relation style.
    fn primary_prompt(
        &self,
        dialogue: &Dialogue,
        position: usize,
        relation: Option<RelationId>,
    ) -> Result<BuiltPrompt, ExpandError> {
        let turn = &dialogue.turns[position];
        let binding = SpeakerBinding::new(turn.speaker.display_name(), turn.speaker.other().display_name())
            .expect("speakers differ");
        let exemplars = match (&self.mode, &self.exemplars) {
            (Mode::OneShot, Some(ex)) => Some(ex.for_position(&dialogue.id, position, &self.catalog)?),
            _ => None,
        };
        let single;
        let catalog = match relation {
            Some(r) => {
                single = self
                    .catalog
                    .single(r)
                    .ok_or_else(|| ExpandError::InvalidJob(format!("{r} is not in the catalog")))?;
                &single
            }
            None => &self.catalog,
        };
        Ok(build_expansion_prompt(
            self.context(dialogue, position),
            catalog,
            &binding,
            &self.templates,
            exemplars.as_ref(),
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub run_id: String,
    pub dialogue_id: String,
    pub turn_index: usize,
    pub relation: RelationId,
    pub text: String,
    pub generator_model: String,
    pub mode: Mode,
    /// SHA-256 of the prompt whose reply produced `text`.
    pub prompt_sha: String,
    pub templates_sha: String,
    /// Indices listed in the re-ask prompt, when `text` came from a re-ask.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reask_of: Vec<usize>,
    pub original_text: String,
    pub char_len: usize,
    pub original_char_len: usize,
}

impl ExpansionRecord {
    pub fn key(&self) -> (&str, &str, usize, RelationId) {
        (&self.run_id, &self.dialogue_id, self.turn_index, self.relation)
    }
}

/// Records for one position plus what could not be generated.
#[derive(Debug, Clone, Default)]
pub struct TurnExpansion {
    pub records: Vec<ExpansionRecord>,
    pub gaps: Vec<RelationId>,
    pub warnings: Vec<String>,
    pub usage: Usage,
}

struct Asked {
    /// (1-based index, text, re-ask indices when it came from a re-ask)
    items: Vec<(usize, String, Vec<usize>)>,
    gaps: Vec<usize>,
    primary_sha: String,
    reask_sha: Option<String>,
}

fn ask(
    job: &ExpansionJob,
    backend: &dyn ChatBackend,
    prompt: &BuiltPrompt,
    expected: usize,
    tag: &str,
    usage: &mut Usage,
    warnings: &mut Vec<String>,
) -> Result<Asked, ExpandError> {
    let call = |p: &BuiltPrompt, t: String, usage: &mut Usage| -> Result<Result<ExpansionReply, PromptError>, LlmError> {
        let resp = backend.complete(&job.request(p, t))?;
        usage.record(&resp);
        Ok(parse_expansion_reply(&resp.text, expected))
    };
    let mut items = Vec::new();
    let (mut gaps, first_failed) = match call(prompt, tag.to_string(), usage)? {
        Ok(reply) => {
            warnings.extend(reply.warnings);
            items.extend(reply.items.into_iter().map(|i| (i.index, i.text, Vec::new())));
            (reply.gaps, None)
        }
        Err(e) => ((1..=expected).collect::<Vec<_>>(), Some(e)),
    };
    let mut reask_sha = None;
    if !gaps.is_empty() && job.reask_gaps {
        let reask = build_reask_prompt(prompt, &gaps, expected, &job.templates)?;
        reask_sha = Some(reask.sha256());
        let asked_for = gaps.clone();
        match call(&reask, format!("{tag}/reask"), usage)? {
            Ok(reply) => {
                warnings.extend(reply.warnings.iter().map(|w| format!("re-ask: {w}")));
                gaps.retain(|g| match reply.get(*g) {
                    Some(item) => {
                        items.push((*g, item.text.clone(), asked_for.clone()));
                        false
                    }
                    None => true,
                });
            }
            Err(e) => warnings.push(format!("re-ask: {e}")),
        }
    }
    if let (Some(e), true) = (first_failed, items.is_empty()) {
        return Err(e.into());
    }
    items.sort_by_key(|i| i.0);
    Ok(Asked {
        items,
        gaps,
        primary_sha: prompt.sha256(),
        reask_sha,
    })
}

/// Expands the turn at `position` of `dialogue`.
pub fn expand_turn(
    dialogue: &Dialogue,
    position: usize,
    job: &ExpansionJob,
    backend: &dyn ChatBackend,
) -> Result<TurnExpansion, ExpandError> {
    if position == 0 || position >= dialogue.turns.len() {
        return Err(ExpandError::InvalidPosition {
            dialogue_id: dialogue.id.clone(),
            position,
            turns: dialogue.turns.len(),
        });
    }
    let original = &dialogue.turns[position].text;
    let templates_sha = job.templates.sha256();
    let mut out = TurnExpansion::default();
    let tag = format!("expand/{}/{}", dialogue.id, position);
    let mut emit = |relation: RelationId, text: String, reask_of: Vec<usize>, prompt_sha: String| {
        out.records.push(ExpansionRecord {
            run_id: job.run_id.clone(),
            dialogue_id: dialogue.id.clone(),
            turn_index: position,
            relation,
            char_len: text.chars().count(),
            text,
            generator_model: job.generator_model.clone(),
            mode: job.mode,
            prompt_sha,
            templates_sha: templates_sha.clone(),
            reask_of,
            original_text: original.clone(),
            original_char_len: original.chars().count(),
        });
    };
    let mut gaps = Vec::new();
    let mut warnings = Vec::new();
    let mut usage = Usage::default();
    match job.style {
        GenerationStyle::Listwise => {
            let prompt = job.primary_prompt(dialogue, position, None)?;
            let asked = ask(job, backend, &prompt, job.catalog.len(), &tag, &mut usage, &mut warnings)?;
            for (index, text, reask_of) in asked.items {
                let relation = job.catalog[index - 1].id;
                let sha = if reask_of.is_empty() {
                    asked.primary_sha.clone()
                } else {
                    asked.reask_sha.clone().expect("re-asked")
                };
                emit(relation, text, reask_of, sha);
            }
            gaps.extend(asked.gaps.iter().map(|g| job.catalog[g - 1].id));
        }
        GenerationStyle::PerRelation => {
            for relation in job.catalog.ids() {
                let prompt = job.primary_prompt(dialogue, position, Some(relation))?;
                let rel_tag = format!("{tag}/{relation}");
                match ask(job, backend, &prompt, 1, &rel_tag, &mut usage, &mut warnings) {
                    Ok(asked) => match asked.items.into_iter().next() {
                        Some((_, text, reask_of)) => {
                            let sha = if reask_of.is_empty() {
                                asked.primary_sha
                            } else {
                                asked.reask_sha.expect("re-asked")
                            };
                            emit(relation, text, reask_of, sha);
                        }
                        None => gaps.push(relation),
                    },
                    Err(ExpandError::Prompt(PromptError::UnparseableReply(m))) => {
                        warnings.push(format!("{relation}: unparseable reply: {m}"));
                        gaps.push(relation);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    out.gaps = gaps;
    out.warnings = warnings;
    out.usage = usage;
    Ok(out)
}

/// Recomputes the digest of the prompt that produced `record`.
pub fn recompute_prompt_sha(record: &ExpansionRecord, dialogue: &Dialogue, job: &ExpansionJob) -> Result<String, ExpandError> {
    if record.turn_index == 0 || record.turn_index >= dialogue.turns.len() {
        return Err(ExpandError::InvalidPosition {
            dialogue_id: dialogue.id.clone(),
            position: record.turn_index,
            turns: dialogue.turns.len(),
        });
    }
    let (relation, expected) = match job.style {
        GenerationStyle::Listwise => (None, job.catalog.len()),
        GenerationStyle::PerRelation => (Some(record.relation), 1),
    };
    let prompt = job.primary_prompt(dialogue, record.turn_index, relation)?;
    if record.reask_of.is_empty() {
        Ok(prompt.sha256())
    } else {
        Ok(build_reask_prompt(&prompt, &record.reask_of, expected, &job.templates)?.sha256())
    }
}

/// Records whose stored `prompt_sha` does not match a recomputation, or whose
/// dialogue is unknown.
pub fn verify_provenance(records: &[ExpansionRecord], job: &ExpansionJob) -> Vec<(String, usize, RelationId)> {
    let by_id: HashMap<&str, &Dialogue> = job.dialogues.iter().map(|d| (d.id.as_str(), d)).collect();
    records
        .iter()
        .filter(|r| {
            by_id
                .get(r.dialogue_id.as_str())
                .and_then(|d| recompute_prompt_sha(r, d, job).ok())
                .is_none_or(|sha| sha != r.prompt_sha)
        })
        .map(|r| (r.dialogue_id.clone(), r.turn_index, r.relation))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionGap {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub relations: Vec<RelationId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemFailure {
    pub dialogue_id: String,
    pub turn_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relation: Option<RelationId>,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionSummary {
    pub run_id: String,
    pub positions_total: usize,
    pub positions_resumed: usize,
    pub positions_expanded: usize,
    pub positions_failed: usize,
    pub expected_records: usize,
    pub records_new: usize,
    pub records_total: usize,
    pub gaps: Vec<PositionGap>,
    pub failures: Vec<ItemFailure>,
    pub warnings: usize,
    pub usage: Usage,
    /// Σ char_len / Σ original_char_len over every record of the run.
    pub pooled_length_ratio: Option<f64>,
}

/// Sort key used for finalized output files.
fn record_order(a: &ExpansionRecord, b: &ExpansionRecord) -> std::cmp::Ordering {
    (&a.run_id, &a.dialogue_id, a.turn_index, a.relation).cmp(&(&b.run_id, &b.dialogue_id, b.turn_index, b.relation))
}

/// Reads, deduplicates (first occurrence wins) and sorts an expansion file,
/// then rewrites it atomically.
pub fn finalize_expansions(path: &Path) -> Result<Vec<ExpansionRecord>, ExpandError> {
    let records: Vec<ExpansionRecord> = jsonl::read_records(path).map_err(|e| ExpandError::io(path, e))?;
    let mut seen = HashSet::new();
    let mut unique: Vec<ExpansionRecord> = records
        .into_iter()
        .filter(|r| seen.insert((r.run_id.clone(), r.dialogue_id.clone(), r.turn_index, r.relation)))
        .collect();
    unique.sort_by(record_order);
    jsonl::write_all(path, &unique).map_err(|e| ExpandError::io(path, e))?;
    Ok(unique)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
struct PositionDone {
    run_id: String,
    dialogue_id: String,
    turn_index: usize,
}

/// Completion log kept next to an expansion file: one line per position whose
/// records were fully written.
pub fn completion_log_path(out_path: &Path) -> std::path::PathBuf {
    let mut name = out_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".done");
    out_path.with_file_name(name)
}

/// Expands every position of every dialogue in `job`, appending records to
/// `out_path` as positions complete. Positions already logged as complete
/// for this run are skipped, so an interrupted run can be resumed by calling
/// this again; records of positions that were cut off mid-write are dropped
/// and regenerated. Per-position failures are reported in the summary.
pub fn expand_corpus(job: &ExpansionJob, backend: &dyn ChatBackend, out_path: &Path) -> Result<ExpansionSummary, ExpandError> {
    job.validate()?;
    let log_path = completion_log_path(out_path);
    let existing: Vec<ExpansionRecord> = jsonl::read_records(out_path).map_err(|e| ExpandError::io(out_path, e))?;
    let logged: HashSet<PositionDone> = if log_path.exists() {
        jsonl::read_records::<PositionDone>(&log_path)
            .map_err(|e| ExpandError::io(&log_path, e))?
            .into_iter()
            .collect()
    } else {
        // No log: trust whatever the output file holds.
        existing
            .iter()
            .map(|r| PositionDone {
                run_id: r.run_id.clone(),
                dialogue_id: r.dialogue_id.clone(),
                turn_index: r.turn_index,
            })
            .collect()
    };
    let is_done = |run_id: &str, dialogue_id: &str, turn_index: usize| {
        logged.contains(&PositionDone {
            run_id: run_id.to_string(),
            dialogue_id: dialogue_id.to_string(),
            turn_index,
        })
    };
    if existing.iter().any(|r| !is_done(&r.run_id, &r.dialogue_id, r.turn_index)) {
        let kept: Vec<&ExpansionRecord> = existing
            .iter()
            .filter(|r| is_done(&r.run_id, &r.dialogue_id, r.turn_index))
            .collect();
        log::warn!(
            "dropping {} records of incomplete positions from {}",
            existing.len() - kept.len(),
            out_path.display()
        );
        jsonl::write_all(out_path, &kept).map_err(|e| ExpandError::io(out_path, e))?;
    }
    let positions: Vec<(&Dialogue, usize)> = job
        .dialogues
        .iter()
        .flat_map(|d| (1..d.turns.len()).map(move |p| (d, p)))
        .collect();
    let todo: Vec<(&Dialogue, usize)> = positions
        .iter()
        .filter(|(d, p)| !is_done(&job.run_id, &d.id, *p))
        .copied()
        .collect();
    let writers = Mutex::new((
        Appender::open(out_path).map_err(|e| ExpandError::io(out_path, e))?,
        Appender::open(&log_path).map_err(|e| ExpandError::io(&log_path, e))?,
    ));
    let write_error: Mutex<Option<String>> = Mutex::new(None);
    let throttled = Throttled::new(backend, &job.policy);
    let results = parallel_map(
        &todo,
        job.policy.max_in_flight,
        |_, (d, p)| expand_turn(d, *p, job, &throttled),
        |i, r| {
            if let Ok(t) = r {
                let (d, p) = todo[i];
                let mark = PositionDone {
                    run_id: job.run_id.clone(),
                    dialogue_id: d.id.clone(),
                    turn_index: p,
                };
                let mut w = writers.lock().expect("writers");
                let res = w.0.append(&t.records).and_then(|_| w.1.append(&[mark]));
                if let Err(e) = res {
                    write_error.lock().expect("flag").get_or_insert(e.to_string());
                }
            }
        },
    );
    drop(writers);
    if let Some(e) = write_error.into_inner().expect("flag") {
        return Err(ExpandError::io(out_path, e));
    }

    let mut summary = ExpansionSummary {
        run_id: job.run_id.clone(),
        positions_total: positions.len(),
        positions_resumed: positions.len() - todo.len(),
        positions_expanded: 0,
        positions_failed: 0,
        expected_records: positions.len() * job.catalog.len(),
        records_new: 0,
        records_total: 0,
        gaps: Vec::new(),
        failures: Vec::new(),
        warnings: 0,
        usage: Usage::default(),
        pooled_length_ratio: None,
    };
    for ((d, p), r) in todo.iter().zip(results) {
        match r {
            Ok(t) => {
                summary.positions_expanded += 1;
                summary.records_new += t.records.len();
                summary.warnings += t.warnings.len();
                summary.usage.merge(&t.usage);
                for w in &t.warnings {
                    log::debug!("{}/{}: {w}", d.id, p);
                }
                if !t.gaps.is_empty() {
                    summary.gaps.push(PositionGap {
                        dialogue_id: d.id.clone(),
                        turn_index: *p,
                        relations: t.gaps,
                    });
                }
            }
            Err(e) => {
                log::warn!("{}/{}: {}: {e}", d.id, p, e.kind());
                summary.positions_failed += 1;
                summary.failures.push(ItemFailure {
                    dialogue_id: d.id.clone(),
                    turn_index: *p,
                    relation: None,
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                });
            }
        }
    }
    let all = finalize_expansions(out_path)?;
    let mut marks: Vec<PositionDone> = jsonl::read_records(&log_path).map_err(|e| ExpandError::io(&log_path, e))?;
    marks.sort();
    marks.dedup();
    jsonl::write_all(&log_path, &marks).map_err(|e| ExpandError::io(&log_path, e))?;
    let mine: Vec<&ExpansionRecord> = all.iter().filter(|r| r.run_id == job.run_id).collect();
    summary.records_total = mine.len();
    let (num, den) = mine
        .iter()
        .fold((0usize, 0usize), |(n, d), r| (n + r.char_len, d + r.original_char_len));
    summary.pooled_length_ratio = (den > 0).then(|| num as f64 / den as f64);
    Ok(summary)
}

/// Number of records per relation, for quick sanity checks.
pub fn relation_counts(records: &[ExpansionRecord]) -> BTreeMap<RelationId, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.relation).or_default() += 1;
    }
    m
}
