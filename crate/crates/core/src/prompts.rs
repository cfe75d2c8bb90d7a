//! Expansion and evaluation prompts, and parsers for the models' replies.
//!
//! Prompt wording lives in a JSON template file (defaults in
//! `templates/default_prompts.json`). Both prompts list every catalog
//! definition numbered from 1 in catalog order; the number is the only link
//! between a generated response or a ranked item and its relation.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Turn;
use crate::relations::{fill_template, RelationCatalog, RelationError, RelationId, SpeakerBinding};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("dialogue context is empty")]
    EmptyContext,
    #[error("candidate response is empty")]
    EmptyCandidate,
    #[error("unparseable reply: {0}")]
    UnparseableReply(String),
    #[error("invalid prompt templates: {0}")]
    InvalidTemplates(String),
    #[error(transparent)]
    Relation(#[from] RelationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Preamble,
    Definitions,
    Context,
    Candidate,
    Instruction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplateSet {
    pub version: String,
    pub expansion_preamble: String,
    pub expansion_layout: Vec<Section>,
    pub expansion_instruction: String,
    pub evaluation_preamble: String,
    pub evaluation_layout: Vec<Section>,
    pub evaluation_instruction: String,
    pub reask_instruction: String,
    pub definitions_heading: String,
    pub context_heading: String,
    pub candidate_heading: String,
    /// Show the dialogue context to the judge.
    pub include_context: bool,
}

const DEFAULT_TEMPLATES: &str = include_str!("../templates/default_prompts.json");

impl Default for PromptTemplateSet {
    fn default() -> Self {
        Self::from_json(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }
}

impl PromptTemplateSet {
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let set: Self =
            serde_json::from_str(text).map_err(|e| PromptError::InvalidTemplates(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::InvalidTemplates(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON form, stamped into output records.
    pub fn sha256(&self) -> String {
        crate::sha256_hex(serde_json::to_vec(self).expect("templates serialize"))
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let count = |layout: &[Section], s: Section| layout.iter().filter(|x| **x == s).count();
        let bad = |m: String| Err(PromptError::InvalidTemplates(m));
        for s in [Section::Preamble, Section::Definitions, Section::Context, Section::Instruction] {
            if count(&self.expansion_layout, s) != 1 {
                return bad(format!("expansion_layout must contain {s:?} exactly once"));
            }
        }
        if count(&self.expansion_layout, Section::Candidate) != 0 {
            return bad("expansion_layout cannot contain a candidate section".into());
        }
        for s in [Section::Preamble, Section::Definitions, Section::Candidate, Section::Instruction] {
            if count(&self.evaluation_layout, s) != 1 {
                return bad(format!("evaluation_layout must contain {s:?} exactly once"));
            }
        }
        if count(&self.evaluation_layout, Section::Context) > 1 {
            return bad("evaluation_layout may contain the context at most once".into());
        }
        // Fill every text field with dummy values to catch unknown placeholders early.
        let probe = SpeakerBinding::new("A", "B").expect("distinct");
        for (field, text) in [
            ("expansion_preamble", &self.expansion_preamble),
            ("expansion_instruction", &self.expansion_instruction),
            ("evaluation_preamble", &self.evaluation_preamble),
            ("evaluation_instruction", &self.evaluation_instruction),
        ] {
            fill_common(text, &probe, 1)
                .map_err(|p| PromptError::InvalidTemplates(format!("{field}: unknown placeholder {{{p}}}")))?;
        }
        fill_template(&self.reask_instruction, &[("missing", "1"), ("count", "1")], &[])
            .map_err(|p| PromptError::InvalidTemplates(format!("reask_instruction: unknown placeholder {{{p}}}")))?;
        Ok(())
    }
}

fn fill_common(text: &str, binding: &SpeakerBinding, count: usize) -> Result<String, String> {
    let n = count.to_string();
    fill_template(
        text,
        &[
            ("count", &n),
            ("speaker", binding.speaker()),
            ("support_speaker", binding.support_speaker()),
        ],
        &[],
    )
}

/// A rendered prompt and its length in characters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltPrompt {
    pub text: String,
    pub char_len: usize,
}

impl BuiltPrompt {
    fn new(text: String) -> Self {
        let char_len = text.chars().count();
        Self { text, char_len }
    }

    pub fn sha256(&self) -> String {
        crate::sha256_hex(&self.text)
    }
}

fn render_context(context: &[Turn]) -> String {
    context
        .iter()
        .map(|t| format!("{}: {}", t.speaker.display_name(), t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_definitions(
    catalog: &RelationCatalog,
    binding: &SpeakerBinding,
    exemplars: Option<&HashMap<RelationId, String>>,
) -> Result<String, PromptError> {
    let mut lines = Vec::with_capacity(catalog.len());
    for (i, def) in catalog.defs().iter().enumerate() {
        let exemplar = exemplars.and_then(|m| m.get(&def.id)).map(String::as_str);
        lines.push(format!("{}. {}", i + 1, def.render(binding, exemplar)?));
    }
    Ok(lines.join("\n"))
}

fn template_err(p: String) -> PromptError {
    PromptError::InvalidTemplates(format!("unknown placeholder {{{p}}}"))
}

/// Builds the listwise generation prompt. With `exemplars` (one-shot mode)
/// each definition's `{example}` slot is filled from the map.
pub fn build_expansion_prompt(
    context: &[Turn],
    catalog: &RelationCatalog,
    binding: &SpeakerBinding,
    templates: &PromptTemplateSet,
    exemplars: Option<&HashMap<RelationId, String>>,
) -> Result<BuiltPrompt, PromptError> {
    if context.is_empty() {
        return Err(PromptError::EmptyContext);
    }
    let n = catalog.len();
    let mut sections = Vec::with_capacity(templates.expansion_layout.len());
    for section in &templates.expansion_layout {
        sections.push(match section {
            Section::Preamble => fill_common(&templates.expansion_preamble, binding, n).map_err(template_err)?,
            Section::Definitions => format!(
                "{}\n{}",
                templates.definitions_heading,
                render_definitions(catalog, binding, exemplars)?
            ),
            Section::Context => format!("{}\n{}", templates.context_heading, render_context(context)),
            Section::Instruction => fill_common(&templates.expansion_instruction, binding, n).map_err(template_err)?,
            Section::Candidate => continue,
        });
    }
    Ok(BuiltPrompt::new(sections.join("\n\n")))
}

/// The follow-up prompt asking only for the items missing from a first reply.
pub fn build_reask_prompt(
    primary: &BuiltPrompt,
    missing: &[usize],
    expected_count: usize,
    templates: &PromptTemplateSet,
) -> Result<BuiltPrompt, PromptError> {
    let list = missing.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(", ");
    let n = expected_count.to_string();
    let note = fill_template(&templates.reask_instruction, &[("missing", &list), ("count", &n)], &[])
        .map_err(template_err)?;
    Ok(BuiltPrompt::new(format!("{}\n\n{}", primary.text, note)))
}

/// Builds the listwise ranking prompt for one candidate response. The prompt
/// carries no hint of which relation produced the candidate.
pub fn build_evaluation_prompt(
    context: &[Turn],
    candidate: &str,
    catalog: &RelationCatalog,
    binding: &SpeakerBinding,
    templates: &PromptTemplateSet,
) -> Result<BuiltPrompt, PromptError> {
    if candidate.trim().is_empty() {
        return Err(PromptError::EmptyCandidate);
    }
    let n = catalog.len();
    let mut sections = Vec::with_capacity(templates.evaluation_layout.len());
    for section in &templates.evaluation_layout {
        sections.push(match section {
            Section::Preamble => fill_common(&templates.evaluation_preamble, binding, n).map_err(template_err)?,
            Section::Context => {
                if !templates.include_context || context.is_empty() {
                    continue;
                }
                format!("{}\n{}", templates.context_heading, render_context(context))
            }
            Section::Candidate => format!("{}\n{}", templates.candidate_heading, candidate.trim()),
            Section::Definitions => format!(
                "{}\n{}",
                templates.definitions_heading,
                render_definitions(catalog, binding, None)?
            ),
            Section::Instruction => fill_common(&templates.evaluation_instruction, binding, n).map_err(template_err)?,
        });
    }
    Ok(BuiltPrompt::new(sections.join("\n\n")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExpansionItem {
    pub index: usize,
    pub text: String,
    /// Relation name the model echoed in front of the text, if any.
    pub echoed: Option<RelationId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExpansionReply {
    pub items: Vec<ExpansionItem>,
    /// Indices in `1..=expected_count` with no usable item.
    pub gaps: Vec<usize>,
    pub warnings: Vec<String>,
}

impl ExpansionReply {
    pub fn get(&self, index: usize) -> Option<&ExpansionItem> {
        self.items.iter().find(|i| i.index == index)
    }
}

const NAME_ALTERNATION: &str =
    "xAttr|xWant|xNeed|xEffect|xReact|xIntent|oWant|oReact|oEffect|HinderedBy|IsAfter|HasSubEvent";

static LIST_ITEM: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(?:[-*•]\s+)?(?:\*\*)?(?:\[(\d{1,3})\]|\((\d{1,3})\)|(\d{1,3})\s*[.):])(?:\*\*)?\s*(.*)$")
        .expect("valid regex")
});

static LEADING_ECHO: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?is)^(?:\*\*)?(?:\[\s*(?:cs:\s*)?({n})\s*\]|\(\s*(?:cs:\s*)?({n})\s*\)|(?:cs:\s*)?({n})(?:\*\*)?\s*[:\-–—])(?:\*\*)?\s*(.*)$",
        n = NAME_ALTERNATION
    ))
    .expect("valid regex")
});

static TRAILING_TAG: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(r"(?i)\s*\[\s*cs:\s*({NAME_ALTERNATION})\s*\]\s*$")).expect("valid regex")
});

static NAME_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!(r"(?i)\b({NAME_ALTERNATION})\b")).expect("valid regex"));

static NUMBER_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(\d{1,3})\b").expect("valid regex"));

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for (open, close) in [('"', '"'), ('“', '”'), ('\'', '\'')] {
        if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
            return s[open.len_utf8()..s.len() - close.len_utf8()].trim();
        }
    }
    s
}

fn strip_echo(text: &str) -> (Option<RelationId>, String) {
    let mut echoed = None;
    let mut body = text.trim().to_string();
    if let Some(c) = LEADING_ECHO.captures(&body) {
        let name = c.get(1).or(c.get(2)).or(c.get(3)).map(|m| m.as_str());
        echoed = name.and_then(|n| n.parse().ok());
        body = c.get(4).map_or("", |m| m.as_str()).to_string();
    }
    if let Some(c) = TRAILING_TAG.captures(&body) {
        echoed = echoed.or_else(|| c[1].parse().ok());
        let start = c.get(0).expect("whole match").start();
        body.truncate(start);
    }
    (echoed, strip_quotes(&body).to_string())
}

/// Extracts numbered responses (`1.`, `1)`, `1:`, `[1]`) from a generation
/// reply. Lines that are not list items are ignored. The first occurrence of
/// an index wins; indices outside `1..=expected_count` are dropped with a
/// warning.
pub fn parse_expansion_reply(raw: &str, expected_count: usize) -> Result<ExpansionReply, PromptError> {
    let mut items: Vec<ExpansionItem> = Vec::new();
    let mut warnings = Vec::new();
    let mut found_any = false;
    for line in raw.lines() {
        let Some(c) = LIST_ITEM.captures(line) else { continue };
        let digits = c.get(1).or(c.get(2)).or(c.get(3)).expect("one alternative matched");
        let Ok(index) = digits.as_str().parse::<usize>() else { continue };
        found_any = true;
        if index == 0 || index > expected_count {
            warnings.push(format!("item {index} is outside 1..={expected_count}"));
            continue;
        }
        if items.iter().any(|i| i.index == index) {
            warnings.push(format!("duplicate item {index} ignored"));
            continue;
        }
        let (echoed, text) = strip_echo(c.get(4).map_or("", |m| m.as_str()));
        if text.is_empty() {
            warnings.push(format!("item {index} is empty"));
            continue;
        }
        items.push(ExpansionItem { index, text, echoed });
    }
    if !found_any {
        return Err(PromptError::UnparseableReply(excerpt(raw)));
    }
    items.sort_by_key(|i| i.index);
    let present: HashSet<usize> = items.iter().map(|i| i.index).collect();
    let gaps = (1..=expected_count).filter(|i| !present.contains(i)).collect();
    Ok(ExpansionReply { items, gaps, warnings })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankingReply {
    pub ranking: Vec<RelationId>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
enum Token {
    Name(RelationId),
    Number(usize),
}

/// Relation-name tokens if the segment has any, numeric tokens otherwise,
/// each in order of appearance.
fn tokens(segment: &str) -> Vec<Token> {
    let names: Vec<Token> = NAME_TOKEN
        .captures_iter(segment)
        .filter_map(|c| c[1].parse().ok().map(Token::Name))
        .collect();
    if !names.is_empty() {
        return names;
    }
    NUMBER_TOKEN
        .captures_iter(segment)
        .filter_map(|c| c[1].parse().ok().map(Token::Number))
        .collect()
}

fn best_line<'a>(lines: &[&'a str], separator: char) -> Option<(&'a str, Vec<Token>)> {
    let mut best: Option<(&str, Vec<Token>)> = None;
    for line in lines.iter().filter(|l| l.contains(separator)) {
        let t = tokens(line);
        if t.len() >= 2 && best.as_ref().is_none_or(|(_, b)| t.len() > b.len()) {
            best = Some((line, t));
        }
    }
    best
}

fn excerpt(raw: &str) -> String {
    let s: String = raw.trim().chars().take(80).collect();
    if raw.trim().chars().count() > 80 {
        format!("{s}…")
    } else {
        s
    }
}

/// Reads a judge's ordering of the catalog definitions.
///
/// Accepts index orderings (`3 > 7 > 1`, `[3] > [7]`, `3, 7, 1`) and
/// relation-name orderings. The line with the most tokens among those using
/// `>` is preferred, then a vertical list (first token per list item), then
/// comma-separated lines. Duplicates keep their first occurrence; out-of-range
/// indices are dropped. The result may be shorter than the catalog.
pub fn parse_ranking_reply(raw: &str, catalog: &RelationCatalog) -> Result<RankingReply, PromptError> {
    let lines: Vec<&str> = raw.lines().collect();
    let listed: Vec<Token> = lines
        .iter()
        .filter_map(|l| LIST_ITEM.captures(l))
        .filter_map(|c| tokens(c.get(4).map_or("", |m| m.as_str())).first().copied())
        .collect();
    let picked = best_line(&lines, '>')
        .map(|(_, t)| t)
        .or_else(|| (listed.len() >= 2).then_some(listed))
        .or_else(|| best_line(&lines, ',').map(|(_, t)| t));
    let toks = match picked {
        Some(t) => t,
        None => {
            let per_line: Vec<Vec<Token>> = lines
                .iter()
                .map(|l| match LIST_ITEM.captures(l) {
                    Some(c) => tokens(c.get(4).map_or("", |m| m.as_str())),
                    None => tokens(l),
                })
                .filter(|t| !t.is_empty())
                .collect();
            match per_line.len() {
                0 => Vec::new(),
                1 => {
                    let t = per_line.into_iter().next().expect("one line");
                    // A lone token counts only when it is the whole reply.
                    let bare: String = raw.chars().filter(|c| c.is_alphanumeric()).collect();
                    let lone = match t.first() {
                        Some(Token::Name(id)) => bare.eq_ignore_ascii_case(id.name()),
                        Some(Token::Number(n)) => bare == n.to_string(),
                        None => false,
                    };
                    if t.len() >= 2 || lone {
                        t
                    } else {
                        Vec::new()
                    }
                }
                _ => per_line.into_iter().map(|t| t[0]).collect(),
            }
        }
    };
    if toks.is_empty() {
        return Err(PromptError::UnparseableReply(excerpt(raw)));
    }
    let mut ranking = Vec::new();
    let mut warnings = Vec::new();
    for tok in toks {
        let id = match tok {
            Token::Name(id) => {
                if !catalog.contains(id) {
                    warnings.push(format!("{id} is not in the catalog"));
                    continue;
                }
                id
            }
            Token::Number(n) => match n.checked_sub(1).and_then(|i| catalog.get(i)) {
                Some(def) => def.id,
                None => {
                    warnings.push(format!("index {n} is outside 1..={}", catalog.len()));
                    continue;
                }
            },
        };
        if ranking.contains(&id) {
            warnings.push(format!("duplicate {id} ignored"));
            continue;
        }
        ranking.push(id);
    }
    if ranking.is_empty() {
        return Err(PromptError::UnparseableReply(excerpt(raw)));
    }
    Ok(RankingReply { ranking, warnings })
}

/// Formats a ranking as 1-based catalog indices, `"3 > 7 > 1"`.
pub fn format_ranking(ranking: &[RelationId], catalog: &RelationCatalog) -> String {
    ranking
        .iter()
        .filter_map(|id| catalog.position(*id))
        .map(|p| (p + 1).to_string())
        .collect::<Vec<_>>()
        .join(" > ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Speaker;
    use crate::relations::{catalog_default, RelationDef};

    fn ctx(n: usize) -> Vec<Turn> {
        let texts = [
            "Well , what's the matter with you ?",
            "I've got a sore throat and my chest hurts .",
            "Have you got a headache ?",
        ];
        (0..n)
            .map(|i| Turn {
                index: i,
                speaker: if i % 2 == 0 { Speaker::User1 } else { Speaker::User2 },
                text: texts[i % 3].to_string(),
            })
            .collect()
    }

    fn binding() -> SpeakerBinding {
        SpeakerBinding::new("User 1", "User 2").unwrap()
    }

    fn small_catalog() -> RelationCatalog {
        let cat = catalog_default();
        RelationCatalog::new(cat.defs()[..3].to_vec()).unwrap()
    }

    #[test]
    fn expansion_prompt_embeds_rendered_definitions() {
        let t = PromptTemplateSet::default();
        let cat = catalog_default();
        let p = build_expansion_prompt(&ctx(2), &cat, &binding(), &t, None).unwrap();
        let xattr = cat[0].render(&binding(), None).unwrap();
        assert!(p.text.contains(&format!("1. {xattr}")));
        assert!(p.text.contains("12. The response should reflect the related causes"));
        assert!(p.text.contains("User 1: Well , what's the matter with you ?\nUser 2: I've got"));
        assert!(p.text.contains("Return exactly 12 responses"));
        assert_eq!(p.char_len, p.text.chars().count());
        // Definitions come before the dialogue under the default layout.
        assert!(p.text.find("Definitions:").unwrap() < p.text.find("Dialogue:").unwrap());
    }

    #[test]
    fn one_shot_exemplars_each_appear_once() {
        let t = PromptTemplateSet::default();
        let ex: HashMap<_, _> = RelationId::ALL
            .iter()
            .map(|r| (*r, format!("E.g., exemplar-{}-zz.", r.name())))
            .collect();
        let p = build_expansion_prompt(&ctx(2), &catalog_default(), &binding(), &t, Some(&ex)).unwrap();
        for e in ex.values() {
            assert_eq!(p.text.matches(e.as_str()).count(), 1, "{e}");
        }
    }

    #[test]
    fn empty_context_rejected() {
        let t = PromptTemplateSet::default();
        assert_eq!(
            build_expansion_prompt(&[], &catalog_default(), &binding(), &t, None),
            Err(PromptError::EmptyContext)
        );
    }

    #[test]
    fn evaluation_prompt_structure() {
        let mut t = PromptTemplateSet::default();
        let cat = catalog_default();
        let p = build_evaluation_prompt(&ctx(3), "I ache all over", &cat, &binding(), &t).unwrap();
        for (i, def) in cat.defs().iter().enumerate() {
            let r = def.render(&binding(), None).unwrap();
            assert!(p.text.contains(&format!("{}. {r}", i + 1)));
        }
        assert!(p.text.contains("I ache all over"));
        assert!(p.text.contains("[3] > [7] > [1]"));
        assert!(p.text.contains("User 1:"));
        // No relation names leak into the judge prompt.
        for id in RelationId::ALL {
            assert!(!p.text.contains(id.name()), "{id}");
        }
        t.include_context = false;
        let p = build_evaluation_prompt(&ctx(3), "I ache all over", &cat, &binding(), &t).unwrap();
        assert!(!p.text.contains("User 1:"));
        assert_eq!(
            build_evaluation_prompt(&ctx(3), "", &cat, &binding(), &t),
            Err(PromptError::EmptyCandidate)
        );
    }

    #[test]
    fn builders_are_pure() {
        let t = PromptTemplateSet::default();
        let a = build_expansion_prompt(&ctx(3), &catalog_default(), &binding(), &t, None).unwrap();
        let b = build_expansion_prompt(&ctx(3), &catalog_default(), &binding(), &t, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn template_validation() {
        let mut t = PromptTemplateSet::default();
        t.expansion_layout.retain(|s| *s != Section::Definitions);
        assert!(t.validate().is_err());
        let mut t = PromptTemplateSet::default();
        t.evaluation_preamble.push_str(" {truth}");
        assert!(t.validate().is_err());
        let json = serde_json::to_string(&PromptTemplateSet::default()).unwrap();
        assert_eq!(PromptTemplateSet::from_json(&json).unwrap(), PromptTemplateSet::default());
        assert_eq!(PromptTemplateSet::default().sha256().len(), 64);
    }

    #[test]
    fn reask_prompt_lists_missing() {
        let t = PromptTemplateSet::default();
        let p = build_expansion_prompt(&ctx(2), &catalog_default(), &binding(), &t, None).unwrap();
        let r = build_reask_prompt(&p, &[3, 12], 12, &t).unwrap();
        assert!(r.text.starts_with(&p.text));
        assert!(r.text.ends_with("missing the responses numbered 3, 12. Return only those responses, numbered as before."));
    }

    #[test]
    fn parse_simple_list() {
        let r = parse_expansion_reply("1. Alpha\n2. Beta", 2).unwrap();
        let got: Vec<_> = r.items.iter().map(|i| (i.index, i.text.as_str())).collect();
        assert_eq!(got, vec![(1, "Alpha"), (2, "Beta")]);
        assert!(r.gaps.is_empty());
    }

    #[test]
    fn parse_chatty_list_with_gap() {
        let r = parse_expansion_reply("Sure! Here you go:\n1) xAttr: Alpha\n3) Gamma", 3).unwrap();
        let got: Vec<_> = r.items.iter().map(|i| (i.index, i.text.as_str())).collect();
        assert_eq!(got, vec![(1, "Alpha"), (3, "Gamma")]);
        assert_eq!(r.gaps, vec![2]);
        assert_eq!(r.items[0].echoed, Some(RelationId::XAttr));
    }

    #[test]
    fn parse_without_list_fails() {
        assert!(matches!(
            parse_expansion_reply("no list at all", 3),
            Err(PromptError::UnparseableReply(_))
        ));
    }

    #[test]
    fn parse_echo_forms() {
        let raw = "1: [xWant] A\n2. **oReact**: B\n3. (IsAfter) C\n4. \"D\"\n5. E [ cs: HasSubEvent ]\n[6] F\n**7.** G";
        let r = parse_expansion_reply(raw, 7).unwrap();
        let texts: Vec<_> = r.items.iter().map(|i| i.text.as_str()).collect();
        assert_eq!(texts, vec!["A", "B", "C", "D", "E", "F", "G"]);
        assert_eq!(r.items[4].echoed, Some(RelationId::HasSubEvent));
        assert!(r.gaps.is_empty());
    }

    #[test]
    fn ranking_indices() {
        let cat = small_catalog();
        let r = parse_ranking_reply("2 > 1 > 3", &cat).unwrap();
        assert_eq!(r.ranking, vec![RelationId::XWant, RelationId::XAttr, RelationId::XNeed]);
    }

    #[test]
    fn ranking_names() {
        let r = parse_ranking_reply("IsAfter > xAttr, then maybe oWant", &catalog_default()).unwrap();
        assert_eq!(r.ranking, vec![RelationId::IsAfter, RelationId::XAttr, RelationId::OWant]);
    }

    #[test]
    fn ranking_refusal() {
        assert!(matches!(
            parse_ranking_reply("I cannot rank these.", &catalog_default()),
            Err(PromptError::UnparseableReply(_))
        ));
        assert!(parse_ranking_reply("I cannot rank these 12 definitions.", &catalog_default()).is_err());
    }

    #[test]
    fn ranking_prefers_ordering_line() {
        let raw = "Here is my ranking of the 12 definitions:\n[3] > [7] > [1]\nHope it helps.";
        let r = parse_ranking_reply(raw, &catalog_default()).unwrap();
        assert_eq!(r.ranking, vec![RelationId::XNeed, RelationId::OWant, RelationId::XAttr]);
    }

    #[test]
    fn ranking_dedup_and_range() {
        let r = parse_ranking_reply("3 > 3 > 13 > 0 > 1", &catalog_default()).unwrap();
        assert_eq!(r.ranking, vec![RelationId::XNeed, RelationId::XAttr]);
        assert_eq!(r.warnings.len(), 3);
    }

    #[test]
    fn ranking_vertical_list() {
        let raw = "1. IsAfter - it explains what happened\n2. xAttr - describes the speaker, not oReact\n3. HinderedBy";
        let r = parse_ranking_reply(raw, &catalog_default()).unwrap();
        assert_eq!(r.ranking, vec![RelationId::IsAfter, RelationId::XAttr, RelationId::HinderedBy]);
    }

    #[test]
    fn ranking_single_token_only_when_whole_reply() {
        assert_eq!(parse_ranking_reply("7", &catalog_default()).unwrap().ranking, vec![RelationId::OWant]);
        assert_eq!(parse_ranking_reply("  xNeed. ", &catalog_default()).unwrap().ranking, vec![RelationId::XNeed]);
    }

    #[test]
    fn ranking_names_outside_small_catalog_dropped() {
        let r = parse_ranking_reply("IsAfter > xWant", &small_catalog()).unwrap();
        assert_eq!(r.ranking, vec![RelationId::XWant]);
    }

    #[test]
    fn custom_catalog_numbering() {
        let cat = RelationCatalog::new(vec![RelationDef::new(RelationId::OReact, "only {speaker}").unwrap()]).unwrap();
        let t = PromptTemplateSet::default();
        let p = build_expansion_prompt(&ctx(1), &cat, &binding(), &t, None).unwrap();
        assert!(p.text.contains("1. only User 2"));
        assert!(p.text.contains("Return exactly 1 responses"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ranking_round_trip(perm in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(), len in 1usize..=12) {
                let cat = catalog_default();
                let ranking: Vec<_> = perm[..len].iter().map(|i| cat[*i].id).collect();
                let text = format_ranking(&ranking, &cat);
                let back = parse_ranking_reply(&text, &cat).unwrap();
                prop_assert_eq!(back.ranking, ranking);
            }

            #[test]
            fn parsers_never_panic(raw in "\\PC{0,200}") {
                let cat = catalog_default();
                if let Ok(r) = parse_ranking_reply(&raw, &cat) {
                    let unique: HashSet<_> = r.ranking.iter().collect();
                    prop_assert_eq!(unique.len(), r.ranking.len());
                    prop_assert!(r.ranking.iter().all(|id| cat.contains(*id)));
                }
                if let Ok(r) = parse_expansion_reply(&raw, 12) {
                    prop_assert!(r.items.iter().all(|i| (1..=12).contains(&i.index) && !i.text.is_empty()));
                }
            }
        }
    }
}
