//! Dialogue data model, ingestion and seeded sampling.
//!
//! The canonical on-disk form is JSONL with one dialogue per line:
//!
//! ```text
//! {"id":"d1","source":"DailyDialog","turns":[{"speaker":"user1","text":"Hi"},{"speaker":"user2","text":"Hello"}]}
//! ```
//!
//! Per-dataset adapters in [`adapters`] map native layouts onto the same
//! model. Whatever labels a source uses, speakers are normalized to
//! `User1`/`User2` by order of first appearance.

pub mod adapters;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeded::SeededRng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {message}")]
    FileUnreadable { path: String, message: String },
    #[error("unknown adapter `{0}` (expected one of: {list})", list = adapters::ADAPTERS.join(", "))]
    UnknownAdapter(String),
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("source {source_name} has {have} eligible dialogues, need {need}")]
    InsufficientEligible {
        source_name: String,
        have: usize,
        need: usize,
    },
    #[error("invalid sample plan: {0}")]
    InvalidPlan(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User1,
    User2,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::User1 => Speaker::User2,
            Speaker::User2 => Speaker::User1,
        }
    }

    /// Name used in prompts and sample sheets.
    pub fn display_name(self) -> &'static str {
        match self {
            Speaker::User1 => "User 1",
            Speaker::User2 => "User 2",
        }
    }

    /// Recognizes the canonical labels: `user1`, `User 1`, `user_2`, ...
    fn from_canonical_label(label: &str) -> Option<Speaker> {
        let squashed: String = label
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .flat_map(char::to_lowercase)
            .collect();
        match squashed.as_str() {
            "user1" => Some(Speaker::User1),
            "user2" => Some(Speaker::User2),
            _ => None,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    DailyDialog,
    TopicalChat,
    EmpatheticDialogues,
    PersonaChat,
    WizardOfWikipedia,
    Other(String),
}

impl Source {
    pub const PUBLIC: [Source; 5] = [
        Source::DailyDialog,
        Source::TopicalChat,
        Source::EmpatheticDialogues,
        Source::PersonaChat,
        Source::WizardOfWikipedia,
    ];
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::DailyDialog => f.write_str("DailyDialog"),
            Source::TopicalChat => f.write_str("TopicalChat"),
            Source::EmpatheticDialogues => f.write_str("EmpatheticDialogues"),
            Source::PersonaChat => f.write_str("PersonaChat"),
            Source::WizardOfWikipedia => f.write_str("WizardOfWikipedia"),
            Source::Other(name) => f.write_str(name),
        }
    }
}

impl FromStr for Source {
    type Err = std::convert::Infallible;

    /// Known dataset names match loosely (`Topical-Chat`, `wizard_of_wikipedia`);
    /// anything else becomes `Other`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .flat_map(|c| c.to_lowercase())
            .collect();
        Ok(match key.as_str() {
            "dailydialog" => Source::DailyDialog,
            "topicalchat" => Source::TopicalChat,
            "empatheticdialogues" => Source::EmpatheticDialogues,
            "personachat" => Source::PersonaChat,
            "wizardofwikipedia" => Source::WizardOfWikipedia,
            _ => Source::Other(s.trim().to_string()),
        })
    }
}

impl Serialize for Source {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(s.parse().unwrap_or_else(|never| match never {}))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
}

/// A validated dyadic dialogue: at least two turns, contiguous indices,
/// non-empty texts and strictly alternating speakers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub source: Source,
    pub turns: Vec<Turn>,
}

#[derive(Serialize, Deserialize)]
struct WireTurn {
    speaker: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct WireDialogue {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<Source>,
    turns: Vec<WireTurn>,
}

impl Serialize for Dialogue {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        WireDialogue {
            id: self.id.clone(),
            source: Some(self.source.clone()),
            turns: self
                .turns
                .iter()
                .map(|t| WireTurn {
                    speaker: match t.speaker {
                        Speaker::User1 => "user1".into(),
                        Speaker::User2 => "user2".into(),
                    },
                    text: t.text.clone(),
                })
                .collect(),
        }
        .serialize(serializer)
    }
}

/// Why a structurally parseable dialogue was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    MalformedJson,
    TooFewTurns,
    EmptyTurn,
    NonDyadic,
    NonAlternating,
    DuplicateId,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::MalformedJson => "malformed_json",
            SkipReason::TooFewTurns => "too_few_turns",
            SkipReason::EmptyTurn => "empty_turn",
            SkipReason::NonDyadic => "non_dyadic",
            SkipReason::NonAlternating => "non_alternating",
            SkipReason::DuplicateId => "duplicate_id",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SkipReport {
    pub skipped: usize,
    pub reasons: BTreeMap<String, usize>,
}

impl SkipReport {
    fn add(&mut self, reason: SkipReason) {
        self.skipped += 1;
        *self.reasons.entry(reason.as_str().to_string()).or_default() += 1;
    }
}

impl Dialogue {
    /// Validates and normalizes raw `(speaker label, text)` pairs.
    pub fn from_labeled(
        id: impl Into<String>,
        source: Source,
        raw: Vec<(String, String)>,
    ) -> Result<Dialogue, SkipReason> {
        if raw.len() < 2 {
            return Err(SkipReason::TooFewTurns);
        }
        if raw.iter().any(|(_, t)| t.trim().is_empty()) {
            return Err(SkipReason::EmptyTurn);
        }
        let canonical: Option<Vec<Speaker>> = raw
            .iter()
            .map(|(l, _)| Speaker::from_canonical_label(l))
            .collect();
        let speakers = match canonical {
            Some(s) => s,
            None => {
                let mut order: Vec<&str> = Vec::with_capacity(2);
                let mut out = Vec::with_capacity(raw.len());
                for (label, _) in &raw {
                    let pos = match order.iter().position(|l| *l == label.as_str()) {
                        Some(p) => p,
                        None => {
                            order.push(label);
                            order.len() - 1
                        }
                    };
                    out.push(match pos {
                        0 => Speaker::User1,
                        1 => Speaker::User2,
                        _ => return Err(SkipReason::NonDyadic),
                    });
                }
                out
            }
        };
        if speakers.windows(2).any(|w| w[0] == w[1]) {
            return Err(SkipReason::NonAlternating);
        }
        let turns = raw
            .into_iter()
            .zip(speakers)
            .enumerate()
            .map(|(index, ((_, text), speaker))| Turn {
                index,
                speaker,
                text: text.trim().to_string(),
            })
            .collect();
        Ok(Dialogue {
            id: id.into(),
            source,
            turns,
        })
    }

    pub fn to_json_line(&self) -> String {
        crate::jsonl::to_line(self)
    }
}

/// One dialogue as produced by an adapter, before validation.
pub struct RawDialogue {
    pub id: String,
    pub source: Option<Source>,
    pub turns: Vec<(String, String)>,
}

/// Parse outcome of one adapter record; errors carry a 1-based line number.
pub type RawRecord = Result<RawDialogue, (usize, String)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IngestMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug)]
pub struct Ingested {
    pub dialogues: Vec<Dialogue>,
    pub skips: SkipReport,
}

/// Reads `raw_file` with the named adapter. Structurally invalid dialogues are
/// dropped and counted; unparseable records fail under `Strict` and are
/// counted as `malformed_json` under `Lenient`.
pub fn ingest(
    raw_file: &Path,
    source: &Source,
    format_hint: &str,
    mode: IngestMode,
) -> Result<Ingested, CorpusError> {
    let adapter = adapters::Adapter::from_name(format_hint)?;
    let bytes = std::fs::read(raw_file).map_err(|e| CorpusError::FileUnreadable {
        path: raw_file.display().to_string(),
        message: e.to_string(),
    })?;
    let text = String::from_utf8(bytes).map_err(|e| CorpusError::FileUnreadable {
        path: raw_file.display().to_string(),
        message: e.to_string(),
    })?;
    let records = adapter.parse(&text, source);
    collect(records, source, mode)
}

fn collect(
    records: Vec<RawRecord>,
    source: &Source,
    mode: IngestMode,
) -> Result<Ingested, CorpusError> {
    let mut skips = SkipReport::default();
    let mut dialogues = Vec::new();
    let mut ids = HashSet::new();
    for rec in records {
        let raw = match rec {
            Ok(raw) => raw,
            Err((line, message)) => match mode {
                IngestMode::Strict => return Err(CorpusError::MalformedRecord { line, message }),
                IngestMode::Lenient => {
                    skips.add(SkipReason::MalformedJson);
                    continue;
                }
            },
        };
        let src = raw.source.unwrap_or_else(|| source.clone());
        match Dialogue::from_labeled(raw.id, src, raw.turns) {
            Ok(d) => {
                if ids.insert(d.id.clone()) {
                    dialogues.push(d);
                } else {
                    skips.add(SkipReason::DuplicateId);
                }
            }
            Err(reason) => skips.add(reason),
        }
    }
    Ok(Ingested { dialogues, skips })
}

/// Reads a canonical JSONL corpus in strict mode, failing on any skip.
pub fn read_canonical(path: &Path) -> Result<Vec<Dialogue>, CorpusError> {
    let out = ingest(path, &Source::Other("unknown".into()), "canonical", IngestMode::Strict)?;
    if out.skips.skipped > 0 {
        return Err(CorpusError::MalformedRecord {
            line: 0,
            message: format!("{} invalid dialogues in canonical corpus: {:?}", out.skips.skipped, out.skips.reasons),
        });
    }
    Ok(out.dialogues)
}

pub fn write_canonical(path: &Path, dialogues: &[Dialogue]) -> std::io::Result<()> {
    crate::jsonl::write_all(path, dialogues)
}

fn default_per_source() -> usize {
    40
}
fn default_min_turns() -> usize {
    5
}
fn default_max_turns() -> usize {
    10
}
fn default_sources() -> Vec<Source> {
    Source::PUBLIC.to_vec()
}

/// Which dialogues to draw and how many.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_per_source")]
    pub dialogues_per_source: usize,
    #[serde(default = "default_min_turns")]
    pub min_turns: usize,
    #[serde(default = "default_max_turns")]
    pub max_turns: usize,
    #[serde(default = "default_sources")]
    pub sources: Vec<Source>,
}

impl Default for SamplePlan {
    fn default() -> Self {
        Self {
            seed: 0,
            dialogues_per_source: default_per_source(),
            min_turns: default_min_turns(),
            max_turns: default_max_turns(),
            sources: default_sources(),
        }
    }
}

impl SamplePlan {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_turns > self.max_turns {
            return Err(CorpusError::InvalidPlan(format!(
                "min_turns {} > max_turns {}",
                self.min_turns, self.max_turns
            )));
        }
        if self.dialogues_per_source == 0 {
            return Err(CorpusError::InvalidPlan("dialogues_per_source must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws `dialogues_per_source` dialogues per source uniformly without
/// replacement among those with `min_turns..=max_turns` turns.
///
/// Eligible dialogues are ordered by id before drawing, so the result depends
/// only on the set of dialogues and the plan, not on input order. Output is
/// sorted by `(source, id)`.
pub fn sample(corpus: &[Dialogue], plan: &SamplePlan) -> Result<Vec<Dialogue>, CorpusError> {
    plan.validate()?;
    let mut rng = SeededRng::new(plan.seed);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for source in &plan.sources {
        if !seen.insert(source) {
            continue;
        }
        let mut eligible: Vec<&Dialogue> = corpus
            .iter()
            .filter(|d| {
                &d.source == source
                    && (plan.min_turns..=plan.max_turns).contains(&d.turns.len())
            })
            .collect();
        if eligible.len() < plan.dialogues_per_source {
            return Err(CorpusError::InsufficientEligible {
                source_name: source.to_string(),
                have: eligible.len(),
                need: plan.dialogues_per_source,
            });
        }
        eligible.sort_by(|a, b| a.id.cmp(&b.id));
        for i in rng.choose_indices(eligible.len(), plan.dialogues_per_source) {
            out.push(eligible[i].clone());
        }
    }
    out.sort_by(|a, b| (&a.source, &a.id).cmp(&(&b.source, &b.id)));
    Ok(out)
}

/// Number of positions that can be expanded: every turn after the first.
pub fn count_expandable_turns(dialogues: &[Dialogue]) -> usize {
    dialogues.iter().map(|d| d.turns.len().saturating_sub(1)).sum()
}
