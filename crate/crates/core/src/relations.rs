//! The twelve ATOMIC event/social relations and their definition templates.
//!
//! Templates may contain three placeholders: `{support_speaker}` (the party
//! who utters the generated turn), `{speaker}` (the other interlocutor) and
//! `{example}` (a one-shot exemplar). Substitution is literal and single-pass.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RelationError {
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("unknown placeholder `{{{placeholder}}}` in template for {relation}")]
    UnknownPlaceholder { relation: String, placeholder: String },
    #[error("duplicate relation {0} in catalog")]
    DuplicateRelation(RelationId),
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("speaker and support speaker must differ (both `{0}`)")]
    SameSpeakers(String),
    #[error("cannot read catalog file {path}: {message}")]
    CatalogFile { path: String, message: String },
}

/// ATOMIC relation identifiers in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationId {
    XAttr,
    XWant,
    XNeed,
    XEffect,
    XReact,
    XIntent,
    OWant,
    OReact,
    OEffect,
    HinderedBy,
    IsAfter,
    HasSubEvent,
}

impl RelationId {
    pub const ALL: [RelationId; 12] = [
        RelationId::XAttr,
        RelationId::XWant,
        RelationId::XNeed,
        RelationId::XEffect,
        RelationId::XReact,
        RelationId::XIntent,
        RelationId::OWant,
        RelationId::OReact,
        RelationId::OEffect,
        RelationId::HinderedBy,
        RelationId::IsAfter,
        RelationId::HasSubEvent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RelationId::XAttr => "xAttr",
            RelationId::XWant => "xWant",
            RelationId::XNeed => "xNeed",
            RelationId::XEffect => "xEffect",
            RelationId::XReact => "xReact",
            RelationId::XIntent => "xIntent",
            RelationId::OWant => "oWant",
            RelationId::OReact => "oReact",
            RelationId::OEffect => "oEffect",
            RelationId::HinderedBy => "HinderedBy",
            RelationId::IsAfter => "IsAfter",
            RelationId::HasSubEvent => "HasSubEvent",
        }
    }

    /// Position in the canonical order, 0-based.
    pub fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationId {
    type Err = RelationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_relation_label(s)
    }
}

impl Serialize for RelationId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for RelationId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        RelationId::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown relation `{s}`")))
    }
}

/// Parses a relation name as it appears in model output or sample sheets.
///
/// Matching ignores case and whitespace, and tolerates a `cs:` prefix and
/// surrounding brackets, so `"[ cs: IsAfter ]"` parses as `IsAfter`.
pub fn parse_relation_label(text: &str) -> Result<RelationId, RelationError> {
    let mut s = text.trim();
    if let Some(inner) = s.strip_prefix('[').and_then(|t| t.strip_suffix(']')) {
        s = inner.trim();
    }
    if s.len() >= 3 && s[..3].eq_ignore_ascii_case("cs:") {
        s = s[3..].trim();
    }
    let squashed: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    RelationId::ALL
        .into_iter()
        .find(|r| r.name().eq_ignore_ascii_case(&squashed))
        .ok_or_else(|| RelationError::UnknownRelation(text.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationDef {
    pub id: RelationId,
    pub template: String,
}

/// Who is who when a definition is rendered for a specific dialogue position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerBinding {
    support_speaker: String,
    speaker: String,
}

impl SpeakerBinding {
    pub fn new(
        support_speaker: impl Into<String>,
        speaker: impl Into<String>,
    ) -> Result<Self, RelationError> {
        let support_speaker = support_speaker.into();
        let speaker = speaker.into();
        if support_speaker == speaker {
            return Err(RelationError::SameSpeakers(speaker));
        }
        Ok(Self {
            support_speaker,
            speaker,
        })
    }

    pub fn support_speaker(&self) -> &str {
        &self.support_speaker
    }

    pub fn speaker(&self) -> &str {
        &self.speaker
    }
}

const PLACEHOLDERS: [&str; 3] = ["speaker", "support_speaker", "example"];

/// A segment of a parsed template.
#[derive(Debug, PartialEq)]
enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

/// Splits a template into literal text and `{name}` slots. A brace that does
/// not enclose an identifier is kept as literal text.
fn pieces(template: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name {
            Some(n)
                if !n.is_empty() && n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') =>
            {
                if open > 0 {
                    out.push(Piece::Text(&rest[..open]));
                }
                out.push(Piece::Slot(n));
                rest = &after[n.len() + 1..];
            }
            _ => {
                out.push(Piece::Text(&rest[..open + 1]));
                rest = after;
            }
        }
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest));
    }
    out
}

/// Substitutes `{name}` slots from `values`. Slots named in `elide` with no
/// value are dropped together with one adjacent space. Any other slot is an
/// error reported with its name.
pub(crate) fn fill_template(
    template: &str,
    values: &[(&str, &str)],
    elide: &[&str],
) -> Result<String, String> {
    let parts = pieces(template);
    let mut out = String::with_capacity(template.len() + 64);
    let mut skip_leading_space = false;
    for part in parts {
        match part {
            Piece::Text(t) => {
                let t = if skip_leading_space {
                    t.strip_prefix(' ').unwrap_or(t)
                } else {
                    t
                };
                skip_leading_space = false;
                out.push_str(t);
            }
            Piece::Slot(name) => {
                if let Some((_, v)) = values.iter().find(|(k, _)| *k == name) {
                    out.push_str(v);
                } else if elide.contains(&name) {
                    if out.ends_with(' ') {
                        out.pop();
                    } else {
                        skip_leading_space = true;
                    }
                } else {
                    return Err(name.to_string());
                }
            }
        }
    }
    Ok(out)
}

impl RelationDef {
    pub fn new(id: RelationId, template: impl Into<String>) -> Result<Self, RelationError> {
        let def = Self {
            id,
            template: template.into(),
        };
        def.check_placeholders()?;
        Ok(def)
    }

    fn check_placeholders(&self) -> Result<(), RelationError> {
        for piece in pieces(&self.template) {
            if let Piece::Slot(name) = piece {
                if !PLACEHOLDERS.contains(&name) {
                    return Err(RelationError::UnknownPlaceholder {
                        relation: self.id.to_string(),
                        placeholder: name.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Renders the definition for one speaker binding. Without an exemplar the
    /// `{example}` slot is removed along with one adjacent space.
    pub fn render(
        &self,
        binding: &SpeakerBinding,
        exemplar: Option<&str>,
    ) -> Result<String, RelationError> {
        let mut values = vec![
            ("support_speaker", binding.support_speaker()),
            ("speaker", binding.speaker()),
        ];
        if let Some(e) = exemplar {
            values.push(("example", e));
        }
        fill_template(&self.template, &values, &["example"]).map_err(|placeholder| {
            RelationError::UnknownPlaceholder {
                relation: self.id.to_string(),
                placeholder,
            }
        })
    }
}

/// Free-function form of [`RelationDef::render`].
pub fn render_definition(
    def: &RelationDef,
    binding: &SpeakerBinding,
    exemplar: Option<&str>,
) -> Result<String, RelationError> {
    def.render(binding, exemplar)
}

const DEFAULT_TEMPLATES: [(RelationId, &str); 12] = [
    (RelationId::XAttr, "The response should reflect what {support_speaker} looks like after going through what is being talked about. {example}"),
    (RelationId::XWant, "The response should reflect the final objective {support_speaker} desires to reach following the conversation. {example}"),
    (RelationId::XNeed, "The response should reflect the sequence of events or reasons that need to happen prior to the conversation. {example}"),
    (RelationId::XEffect, "The response should reflect how the situation will influences {support_speaker} after the conversation. {example}"),
    (RelationId::XReact, "The response should reflect how {support_speaker} would react to what is being talked about. {example}"),
    (RelationId::XIntent, "The response should reflect what {support_speaker} wanted before the conversation. {example}"),
    (RelationId::OWant, "The response should reflect the final objective {speaker} desires to reach following the conversation. {example}"),
    (RelationId::OReact, "The response should reflect how {speaker} would react to what is being talked about. {example}"),
    (RelationId::OEffect, "The response should reflect how the situation will influences {speaker} after the conversation. {example}"),
    (RelationId::HinderedBy, "The response should state facts why what is being discussed in the conversation could not happen. {example}"),
    (RelationId::IsAfter, "The response should reflect what led to the current situation discussed with {support_speaker}. {example}"),
    (RelationId::HasSubEvent, "The response should reflect the related causes and consequences specific to the ongoing conversation. {example}"),
];

/// An ordered set of relation definitions. The built-in catalog holds all
/// twelve relations; smaller catalogs are allowed for experiments and tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct RelationCatalog {
    defs: Vec<RelationDef>,
}

impl RelationCatalog {
    pub fn new(defs: Vec<RelationDef>) -> Result<Self, RelationError> {
        if defs.is_empty() {
            return Err(RelationError::EmptyCatalog);
        }
        let mut seen = HashSet::new();
        for def in &defs {
            if !seen.insert(def.id) {
                return Err(RelationError::DuplicateRelation(def.id));
            }
            def.check_placeholders()?;
        }
        Ok(Self { defs })
    }

    /// Built-in definitions in canonical order.
    pub fn builtin() -> Self {
        Self {
            defs: DEFAULT_TEMPLATES
                .iter()
                .map(|(id, t)| RelationDef {
                    id: *id,
                    template: (*t).to_string(),
                })
                .collect(),
        }
    }

    /// Built-in catalog with templates replaced by the entries of a JSON array
    /// of `{"id": name, "template": text}`. Order stays canonical.
    pub fn with_overrides(overrides: &[RelationDef]) -> Result<Self, RelationError> {
        let mut catalog = Self::builtin();
        let mut seen = HashSet::new();
        for o in overrides {
            if !seen.insert(o.id) {
                return Err(RelationError::DuplicateRelation(o.id));
            }
            o.check_placeholders()?;
            catalog.defs[o.id.ordinal()].template = o.template.clone();
        }
        Ok(catalog)
    }

    pub fn load_overrides(path: &Path) -> Result<Self, RelationError> {
        let file_err = |message: String| RelationError::CatalogFile {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let overrides: Vec<RelationDef> =
            serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))?;
        Self::with_overrides(&overrides)
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn defs(&self) -> &[RelationDef] {
        &self.defs
    }

    pub fn ids(&self) -> impl Iterator<Item = RelationId> + '_ {
        self.defs.iter().map(|d| d.id)
    }

    pub fn get(&self, index: usize) -> Option<&RelationDef> {
        self.defs.get(index)
    }

    /// 0-based position of `id`, if present.
    pub fn position(&self, id: RelationId) -> Option<usize> {
        self.defs.iter().position(|d| d.id == id)
    }

    pub fn contains(&self, id: RelationId) -> bool {
        self.position(id).is_some()
    }

    /// A catalog containing only `id`, used for one-relation-per-call prompts.
    pub fn single(&self, id: RelationId) -> Option<Self> {
        self.defs
            .iter()
            .find(|d| d.id == id)
            .map(|d| Self { defs: vec![d.clone()] })
    }
}

impl std::ops::Index<usize> for RelationCatalog {
    type Output = RelationDef;

    fn index(&self, index: usize) -> &RelationDef {
        &self.defs[index]
    }
}

pub fn catalog_default() -> RelationCatalog {
    RelationCatalog::builtin()
}
