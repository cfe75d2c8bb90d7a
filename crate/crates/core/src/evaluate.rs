//! Listwise judging of generated responses.
//!
//! The judge sees the dialogue context, one generated response and every
//! relation definition, and returns an ordering of the definitions. The rank
//! of the relation that actually produced the response is the score.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dialogue;
use crate::expand::{ExpansionRecord, ItemFailure};
use crate::jsonl::{self, Appender};
use crate::llm::batch::{parallel_map, Throttled};
use crate::llm::{BackendPolicy, ChatBackend, ChatRequest, LlmError, Usage};
use crate::prompts::{build_evaluation_prompt, parse_ranking_reply, PromptError, PromptTemplateSet};
use crate::relations::{RelationCatalog, RelationId, SpeakerBinding};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("{0} is not in the catalog")]
    NotInCatalog(RelationId),
    #[error("dialogue {0} not found in corpus")]
    MissingDialogue(String),
    #[error("turn {turn_index} out of range for dialogue {dialogue_id}")]
    InvalidPosition { dialogue_id: String, turn_index: usize },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("line {line}: unknown relation `{name}`")]
    UnknownRelation { line: usize, name: String },
    #[error("line {line}: {relation} appears twice in ranking")]
    DuplicateInRanking { line: usize, relation: RelationId },
    #[error("line {line}: missing key `{key}`")]
    MissingKey { line: usize, key: &'static str },
    #[error("line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("invalid judge configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl JudgeError {
    pub fn kind(&self) -> &'static str {
        match self {
            JudgeError::NotInCatalog(_) => "NotInCatalog",
            JudgeError::MissingDialogue(_) => "MissingDialogue",
            JudgeError::InvalidPosition { .. } => "InvalidPosition",
            JudgeError::Prompt(PromptError::UnparseableReply(_)) => "UnparseableReply",
            JudgeError::Prompt(_) => "PromptError",
            JudgeError::Llm(e) => e.kind(),
            JudgeError::UnknownRelation { .. } => "UnknownRelation",
            JudgeError::DuplicateInRanking { .. } => "DuplicateInRanking",
            JudgeError::MissingKey { .. } => "MissingKey",
            JudgeError::MalformedRecord { .. } => "MalformedRecord",
            JudgeError::InvalidConfig(_) => "InvalidConfig",
            JudgeError::Io { .. } => "IoError",
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        JudgeError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub run_id: String,
    pub dialogue_id: String,
    pub turn_index: usize,
    pub true_relation: RelationId,
    /// A permutation of the catalog.
    pub ranking: Vec<RelationId>,
    /// 1-based position of `true_relation` in `ranking`.
    pub true_rank: usize,
    pub judge_model: String,
    /// The judge's ordering was partial and was completed.
    pub completion_applied: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub templates_sha: String,
}

impl RankingRecord {
    pub fn recomputed_rank(&self) -> Option<usize> {
        self.ranking.iter().position(|r| *r == self.true_relation).map(|p| p + 1)
    }
}

/// Appends catalog relations missing from `partial`, in catalog order.
/// Relations outside the catalog and repeats are dropped. Returns the full
/// ranking and whether anything was appended.
pub fn complete_ranking(partial: &[RelationId], catalog: &RelationCatalog) -> (Vec<RelationId>, bool) {
    let mut seen = HashSet::new();
    let mut out: Vec<RelationId> = partial
        .iter()
        .copied()
        .filter(|r| catalog.contains(*r) && seen.insert(*r))
        .collect();
    let before = out.len();
    out.extend(catalog.ids().filter(|r| !seen.contains(r)));
    let applied = out.len() != before;
    (out, applied)
}

/// Request tag carrying the record's key. Not part of the cache key and never
/// sent to a provider.
pub fn judge_tag(dialogue_id: &str, turn_index: usize, relation: RelationId) -> String {
    format!("judge/{dialogue_id}/{turn_index}/{relation}")
}

pub const DEFAULT_JUDGE_MAX_TOKENS: u32 = 256;

#[derive(Debug, Clone)]
pub struct JudgeConfig {
    pub run_id: String,
    pub judge_model: String,
    pub catalog: RelationCatalog,
    pub templates: PromptTemplateSet,
    pub policy: BackendPolicy,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub context_window: Option<usize>,
}

impl JudgeConfig {
    pub fn new(run_id: impl Into<String>, judge_model: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            judge_model: judge_model.into(),
            catalog: RelationCatalog::builtin(),
            templates: PromptTemplateSet::default(),
            policy: BackendPolicy::default(),
            temperature: 0.0,
            max_output_tokens: DEFAULT_JUDGE_MAX_TOKENS,
            context_window: None,
        }
    }

    pub fn validate(&self) -> Result<(), JudgeError> {
        if self.judge_model.trim().is_empty() {
            return Err(JudgeError::InvalidConfig("judge_model is empty".into()));
        }
        if self.context_window == Some(0) {
            return Err(JudgeError::InvalidConfig("context_window must be >= 1".into()));
        }
        self.policy.validate().map_err(JudgeError::InvalidConfig)?;
        self.templates.validate()?;
        Ok(())
    }

    /// The request that judges `rec`.
    pub fn request(&self, rec: &ExpansionRecord, dialogue: &Dialogue) -> Result<ChatRequest, JudgeError> {
        if !self.catalog.contains(rec.relation) {
            return Err(JudgeError::NotInCatalog(rec.relation));
        }
        let p = rec.turn_index;
        if p == 0 || p >= dialogue.turns.len() {
            return Err(JudgeError::InvalidPosition {
                dialogue_id: rec.dialogue_id.clone(),
                turn_index: p,
            });
        }
        let responder = dialogue.turns[p].speaker;
        let binding = SpeakerBinding::new(responder.display_name(), responder.other().display_name())
            .expect("speakers differ");
        let start = self.context_window.map_or(0, |w| p.saturating_sub(w));
        let prompt = build_evaluation_prompt(&dialogue.turns[start..p], &rec.text, &self.catalog, &binding, &self.templates)?;
        Ok(ChatRequest::new(&self.judge_model, prompt.text)
            .with_temperature(self.temperature)
            .with_max_output_tokens(self.max_output_tokens)
            .with_tag(judge_tag(&rec.dialogue_id, p, rec.relation)))
    }
}

/// Judges one expansion record.
pub fn judge_record(
    rec: &ExpansionRecord,
    dialogue: &Dialogue,
    config: &JudgeConfig,
    backend: &dyn ChatBackend,
) -> Result<(RankingRecord, Usage), JudgeError> {
    let req = config.request(rec, dialogue)?;
    let resp = backend.complete(&req)?;
    let mut usage = Usage::default();
    usage.record(&resp);
    let parsed = parse_ranking_reply(&resp.text, &config.catalog)?;
    let (ranking, completion_applied) = complete_ranking(&parsed.ranking, &config.catalog);
    let true_rank = ranking
        .iter()
        .position(|r| *r == rec.relation)
        .expect("completed ranking covers the catalog")
        + 1;
    Ok((
        RankingRecord {
            run_id: config.run_id.clone(),
            dialogue_id: rec.dialogue_id.clone(),
            turn_index: rec.turn_index,
            true_relation: rec.relation,
            ranking,
            true_rank,
            judge_model: config.judge_model.clone(),
            completion_applied,
            templates_sha: config.templates.sha256(),
        },
        usage,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JudgeSummary {
    pub run_id: String,
    pub judge_model: String,
    pub records_total: usize,
    pub records_resumed: usize,
    pub judged_new: usize,
    pub completion_applied: usize,
    /// Failed judgments by error kind; these are excluded from metrics.
    pub excluded: BTreeMap<String, usize>,
    pub failures: Vec<ItemFailure>,
    pub usage: Usage,
    pub rankings_total: usize,
}

impl JudgeSummary {
    pub fn n_excluded(&self) -> usize {
        self.excluded.values().sum()
    }
}

type RankKey = (String, String, usize, RelationId);

fn rank_key(r: &RankingRecord) -> RankKey {
    (r.judge_model.clone(), r.dialogue_id.clone(), r.turn_index, r.true_relation)
}

/// Deduplicates (first wins), sorts by (dialogue, turn, relation) and rewrites
/// a ranking file atomically.
pub fn finalize_rankings(path: &Path) -> Result<Vec<RankingRecord>, JudgeError> {
    let records: Vec<RankingRecord> = jsonl::read_records(path).map_err(|e| JudgeError::io(path, e))?;
    let mut seen = HashSet::new();
    let mut unique: Vec<RankingRecord> = records
        .into_iter()
        .filter(|r| seen.insert((r.run_id.clone(), rank_key(r))))
        .collect();
    unique.sort_by(|a, b| {
        (&a.run_id, &a.judge_model, &a.dialogue_id, a.turn_index, a.true_relation).cmp(&(
            &b.run_id,
            &b.judge_model,
            &b.dialogue_id,
            b.turn_index,
            b.true_relation,
        ))
    });
    jsonl::write_all(path, &unique).map_err(|e| JudgeError::io(path, e))?;
    Ok(unique)
}

/// Judges every record, appending rankings to `out_path` as they complete.
/// Records already ranked by this judge in this run are skipped. Failures are
/// counted in the summary and never written.
pub fn judge_set(
    records: &[ExpansionRecord],
    corpus: &[Dialogue],
    config: &JudgeConfig,
    backend: &dyn ChatBackend,
    out_path: &Path,
) -> Result<JudgeSummary, JudgeError> {
    config.validate()?;
    let by_id: HashMap<&str, &Dialogue> = corpus.iter().map(|d| (d.id.as_str(), d)).collect();
    let existing: Vec<RankingRecord> = jsonl::read_records(out_path).map_err(|e| JudgeError::io(out_path, e))?;
    let done: HashSet<RankKey> = existing
        .iter()
        .filter(|r| r.run_id == config.run_id)
        .map(rank_key)
        .collect();
    let mut unique = HashSet::new();
    let todo: Vec<&ExpansionRecord> = records
        .iter()
        .filter(|r| unique.insert((r.dialogue_id.clone(), r.turn_index, r.relation)))
        .filter(|r| {
            !done.contains(&(config.judge_model.clone(), r.dialogue_id.clone(), r.turn_index, r.relation))
        })
        .collect();
    let total = unique.len();
    let writer = Mutex::new(Appender::open(out_path).map_err(|e| JudgeError::io(out_path, e))?);
    let write_error: Mutex<Option<String>> = Mutex::new(None);
    let throttled = Throttled::new(backend, &config.policy);
    let results = parallel_map(
        &todo,
        config.policy.max_in_flight,
        |_, rec| {
            let dialogue = by_id
                .get(rec.dialogue_id.as_str())
                .ok_or_else(|| JudgeError::MissingDialogue(rec.dialogue_id.clone()))?;
            judge_record(rec, dialogue, config, &throttled)
        },
        |_, r| {
            if let Ok((rank, _)) = r {
                if let Err(e) = writer.lock().expect("writer").append(std::slice::from_ref(rank)) {
                    write_error.lock().expect("flag").get_or_insert(e.to_string());
                }
            }
        },
    );
    drop(writer);
    if let Some(e) = write_error.into_inner().expect("flag") {
        return Err(JudgeError::io(out_path, e));
    }
    let mut summary = JudgeSummary {
        run_id: config.run_id.clone(),
        judge_model: config.judge_model.clone(),
        records_total: total,
        records_resumed: total - todo.len(),
        judged_new: 0,
        completion_applied: 0,
        excluded: BTreeMap::new(),
        failures: Vec::new(),
        usage: Usage::default(),
        rankings_total: 0,
    };
    for (rec, r) in todo.iter().zip(results) {
        match r {
            Ok((rank, usage)) => {
                summary.judged_new += 1;
                summary.usage.merge(&usage);
                if rank.completion_applied {
                    summary.completion_applied += 1;
                }
            }
            Err(e) => {
                log::warn!("{}/{}/{}: {}: {e}", rec.dialogue_id, rec.turn_index, rec.relation, e.kind());
                *summary.excluded.entry(e.kind().to_string()).or_default() += 1;
                summary.failures.push(ItemFailure {
                    dialogue_id: rec.dialogue_id.clone(),
                    turn_index: rec.turn_index,
                    relation: Some(rec.relation),
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                });
            }
        }
    }
    let all = finalize_rankings(out_path)?;
    summary.rankings_total = all
        .iter()
        .filter(|r| r.run_id == config.run_id && r.judge_model == config.judge_model)
        .count();
    Ok(summary)
}

#[derive(Deserialize)]
struct ExternalLine {
    dialogue_id: Option<String>,
    turn_index: Option<usize>,
    true_relation: Option<String>,
    ranking: Option<Vec<String>>,
}

fn exact_relation(line: usize, name: &str) -> Result<RelationId, JudgeError> {
    RelationId::ALL
        .into_iter()
        .find(|r| r.name() == name.trim())
        .ok_or_else(|| JudgeError::UnknownRelation {
            line,
            name: name.to_string(),
        })
}

/// Loads rankings produced elsewhere, one
/// `{"dialogue_id","turn_index","true_relation","ranking":[names]}` per line.
/// Partial rankings are completed like judge output.
pub fn import_external_rankings(
    path: &Path,
    catalog: &RelationCatalog,
    run_id: &str,
    judge_label: &str,
) -> Result<Vec<RankingRecord>, JudgeError> {
    let text = std::fs::read_to_string(path).map_err(|e| JudgeError::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let e: ExternalLine = serde_json::from_str(raw).map_err(|err| JudgeError::MalformedRecord {
            line,
            message: err.to_string(),
        })?;
        let missing = |key| JudgeError::MissingKey { line, key };
        let dialogue_id = e.dialogue_id.ok_or_else(|| missing("dialogue_id"))?;
        let turn_index = e.turn_index.ok_or_else(|| missing("turn_index"))?;
        let true_relation = exact_relation(line, &e.true_relation.ok_or_else(|| missing("true_relation"))?)?;
        let names = e.ranking.ok_or_else(|| missing("ranking"))?;
        if !catalog.contains(true_relation) {
            return Err(JudgeError::NotInCatalog(true_relation));
        }
        let mut partial = Vec::with_capacity(names.len());
        for n in &names {
            let r = exact_relation(line, n)?;
            if partial.contains(&r) {
                return Err(JudgeError::DuplicateInRanking { line, relation: r });
            }
            if !catalog.contains(r) {
                return Err(JudgeError::UnknownRelation { line, name: n.clone() });
            }
            partial.push(r);
        }
        let (ranking, completion_applied) = complete_ranking(&partial, catalog);
        let true_rank = ranking.iter().position(|r| *r == true_relation).expect("complete") + 1;
        out.push(RankingRecord {
            run_id: run_id.to_string(),
            dialogue_id,
            turn_index,
            true_relation,
            ranking,
            true_rank,
            judge_model: judge_label.to_string(),
            completion_applied,
            templates_sha: String::new(),
        });
    }
    Ok(out)
}
