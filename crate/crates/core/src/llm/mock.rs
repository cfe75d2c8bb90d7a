//! Deterministic backends for tests and offline runs.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::LazyLock;
use std::time::Duration;

use regex::Regex;

use super::{cache_key, ChatBackend, ChatRequest, ChatResponse, LlmError};
use crate::relations::{RelationCatalog, RelationId};
use crate::seeded::SeededRng;

fn words(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

fn reply(provider: &str, req: &ChatRequest, text: String) -> ChatResponse {
    ChatResponse {
        prompt_tokens: words(&req.user_text) + req.system_text.as_deref().map_or(0, words),
        completion_tokens: words(&text),
        text,
        latency_ms: 0,
        provider_id: provider.to_string(),
        cached: false,
    }
}

/// Returns the user text unchanged.
pub struct EchoBackend;

impl ChatBackend for EchoBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        Ok(reply("mock:echo", req, req.user_text.clone()))
    }
}

type Script = dyn Fn(&ChatRequest) -> Result<String, LlmError> + Send + Sync;

/// Answers with whatever a closure returns, counting calls.
pub struct ScriptedBackend {
    script: Box<Script>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(f: impl Fn(&ChatRequest) -> Result<String, LlmError> + Send + Sync + 'static) -> Self {
        Self {
            script: Box::new(f),
            calls: AtomicUsize::new(0),
        }
    }

    /// Always replies with `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_| Ok(text.clone()))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = (self.script)(req)?;
        Ok(reply("mock:scripted", req, text))
    }
}

static DEFINITION_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(\d{1,3})\. (.+)$").expect("valid regex"));
static CONTEXT_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(User [12]): (.+)$").expect("valid regex"));

/// Regex matching a template's rendered form. Speaker slots become the given
/// names (any text when unknown); other slots become wildcards.
fn template_regex(template: &str, support_speaker: Option<&str>, speaker: Option<&str>) -> Regex {
    let mut pattern = String::from("^");
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else { break };
        let name = &rest[open + 1..open + close];
        let literal = &rest[..open];
        let bound = match name {
            "support_speaker" => support_speaker,
            "speaker" => speaker,
            _ => None,
        };
        match (bound, literal.strip_suffix(' ')) {
            (Some(value), _) => {
                pattern.push_str(&regex::escape(literal));
                pattern.push_str(&regex::escape(value));
            }
            // An elided slot also drops one adjacent space.
            (None, Some(l)) => {
                pattern.push_str(&regex::escape(l));
                pattern.push_str("(?: .*?)?");
            }
            (None, None) => {
                pattern.push_str(&regex::escape(literal));
                pattern.push_str(".*?");
            }
        }
        rest = &rest[open + close + 1..];
    }
    pattern.push_str(&regex::escape(rest));
    pattern.push('$');
    Regex::new(&pattern).expect("escaped template")
}

/// A stand-in generator. It finds the numbered definitions in an expansion
/// prompt, recognizes which catalog relation each one renders, and answers
/// one labeled line per definition: `"3. xNeed: ..."`. The responder is
/// taken to be the party who did not speak the last context line. The
/// wording is a deterministic function of the prompt.
pub struct SyntheticGenerator {
    templates: Vec<(RelationId, String)>,
}

impl SyntheticGenerator {
    pub fn new(catalog: &RelationCatalog) -> Self {
        Self {
            templates: catalog.defs().iter().map(|d| (d.id, d.template.clone())).collect(),
        }
    }

    fn matchers(&self, last_speaker: Option<&str>) -> Vec<(RelationId, Regex)> {
        let other = last_speaker.map(|s| if s == "User 1" { "User 2" } else { "User 1" });
        self.templates
            .iter()
            .map(|(id, t)| (*id, template_regex(t, other, last_speaker)))
            .collect()
    }
}

const OPENERS: [&str; 6] = [
    "Honestly,",
    "Well,",
    "You know,",
    "I think",
    "To be fair,",
    "Right,",
];

impl ChatBackend for SyntheticGenerator {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let mut last_speaker = None;
        let mut last_turn = "that";
        for line in req.user_text.lines() {
            if let Some(c) = CONTEXT_LINE.captures(line) {
                last_speaker = Some(c.get(1).expect("group").as_str());
                last_turn = c.get(2).expect("group").as_str();
            }
        }
        let matchers = self.matchers(last_speaker);
        let mut definitions: Vec<(usize, RelationId)> = Vec::new();
        for line in req.user_text.lines() {
            let Some(c) = DEFINITION_LINE.captures(line) else { continue };
            let body = c.get(2).expect("group").as_str();
            let id = matchers.iter().find(|(_, re)| re.is_match(body)).map(|(id, _)| *id);
            if let (Ok(n), Some(id)) = (c[1].parse::<usize>(), id) {
                if !definitions.iter().any(|(m, _)| *m == n) {
                    definitions.push((n, id));
                }
            }
        }
        if definitions.is_empty() {
            return Err(LlmError::Provider {
                status: 400,
                body: "synthetic generator found no definitions in the prompt".into(),
            });
        }
        let mut rng = SeededRng::derived(0, &cache_key(req));
        let topic: String = last_turn
            .trim_end_matches(['?', '.', '!', ' '])
            .to_lowercase();
        let lines: Vec<String> = definitions
            .iter()
            .map(|(n, id)| {
                let opener = OPENERS[rng.below(OPENERS.len() as u64) as usize];
                format!("{n}. {id}: {opener} about \"{topic}\", here is my {id} answer.")
            })
            .collect();
        Ok(reply("mock:generator", req, lines.join("\n")))
    }
}

/// Ranks definitions uniformly at random. The permutation depends only on the
/// seed and the request's cache key, so it is independent of call order.
pub struct RandomJudge {
    seed: u64,
    count: usize,
}

impl RandomJudge {
    pub fn new(seed: u64, catalog_len: usize) -> Self {
        Self { seed, count: catalog_len }
    }
}

impl ChatBackend for RandomJudge {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let mut rng = SeededRng::derived(self.seed, &cache_key(req));
        let mut order: Vec<usize> = (1..=self.count).collect();
        rng.shuffle(&mut order);
        let text = order.iter().map(|i| format!("[{i}]")).collect::<Vec<_>>().join(" > ");
        Ok(reply("mock:random-judge", req, text))
    }
}

/// Reads the true relation from the request tag, which never reaches a
/// prompt. Tags look like `judge/<dialogue>/<turn>/<relation>`.
pub fn truth_from_tag(tag: &str) -> Option<RelationId> {
    tag.rsplit('/').next().and_then(|s| s.parse().ok())
}

/// A judge that knows the answer through the request tag. The plain oracle
/// ranks the true relation first; the inverse oracle ranks it last. The rest
/// follow catalog order.
pub struct OracleJudge {
    catalog: RelationCatalog,
    inverse: bool,
}

impl OracleJudge {
    pub fn new(catalog: RelationCatalog) -> Self {
        Self { catalog, inverse: false }
    }

    pub fn inverse(catalog: RelationCatalog) -> Self {
        Self { catalog, inverse: true }
    }
}

impl ChatBackend for OracleJudge {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let truth = truth_from_tag(&req.request_tag)
            .and_then(|t| self.catalog.position(t))
            .ok_or_else(|| LlmError::InvalidRequest(format!("oracle judge needs a judge tag, got `{}`", req.request_tag)))?;
        let mut order: Vec<usize> = (0..self.catalog.len()).filter(|i| *i != truth).collect();
        if self.inverse {
            order.push(truth);
        } else {
            order.insert(0, truth);
        }
        let text = order.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(" > ");
        let provider = if self.inverse { "mock:inverse-judge" } else { "mock:oracle-judge" };
        Ok(reply(provider, req, text))
    }
}

/// Wraps a backend with a seeded artificial latency and counts calls and the
/// peak number of concurrent calls.
pub struct Instrumented<B> {
    inner: B,
    latency: Option<(u64, u64)>,
    seed: u64,
    calls: AtomicUsize,
    current: AtomicUsize,
    peak: AtomicUsize,
    by_tag: std::sync::Mutex<HashMap<String, usize>>,
}

impl<B: ChatBackend> Instrumented<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            latency: None,
            seed: 0,
            calls: AtomicUsize::new(0),
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            by_tag: std::sync::Mutex::new(HashMap::new()),
        }
    }

    /// Sleeps a seeded pseudo-random `min_ms..=max_ms` per call.
    pub fn with_latency(mut self, min_ms: u64, max_ms: u64) -> Self {
        self.latency = Some((min_ms, max_ms.max(min_ms)));
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn calls_for_tag(&self, tag: &str) -> usize {
        self.by_tag.lock().expect("tags").get(tag).copied().unwrap_or(0)
    }
}

impl<B: ChatBackend> ChatBackend for Instrumented<B> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        *self.by_tag.lock().expect("tags").entry(req.request_tag.clone()).or_default() += 1;
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if let Some((lo, hi)) = self.latency {
            let mut rng = SeededRng::derived(self.seed, &format!("{n}/{}", cache_key(req)));
            let ms = lo + rng.below(hi - lo + 1);
            std::thread::sleep(Duration::from_millis(ms));
        }
        let out = self.inner.complete(req);
        self.current.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Turn};
    use crate::prompts::{build_expansion_prompt, parse_expansion_reply, parse_ranking_reply, PromptTemplateSet};
    use crate::relations::{catalog_default, SpeakerBinding};

    fn prompt() -> String {
        let ctx = vec![Turn { index: 0, speaker: Speaker::User1, text: "Well , what's the matter with you ?".into() }];
        let b = SpeakerBinding::new("User 2", "User 1").unwrap();
        build_expansion_prompt(&ctx, &catalog_default(), &b, &PromptTemplateSet::default(), None)
            .unwrap()
            .text
    }

    #[test]
    fn echo() {
        let r = EchoBackend.complete(&ChatRequest::new("m", "ping")).unwrap();
        assert_eq!(r.text, "ping");
        assert!(!r.cached);
    }

    #[test]
    fn generator_labels_every_definition() {
        let gen = SyntheticGenerator::new(&catalog_default());
        let r = gen.complete(&ChatRequest::new("m", prompt())).unwrap();
        let parsed = parse_expansion_reply(&r.text, 12).unwrap();
        assert!(parsed.gaps.is_empty());
        for item in &parsed.items {
            assert_eq!(item.echoed, Some(RelationId::ALL[item.index - 1]));
        }
        assert_eq!(r.text, gen.complete(&ChatRequest::new("m", prompt())).unwrap().text);
    }

    #[test]
    fn generator_handles_one_shot_definitions() {
        let ctx = vec![Turn { index: 0, speaker: Speaker::User1, text: "Hi".into() }];
        let b = SpeakerBinding::new("User 2", "User 1").unwrap();
        let ex: HashMap<_, _> = RelationId::ALL.iter().map(|r| (*r, "E.g., something.".to_string())).collect();
        let p = build_expansion_prompt(&ctx, &catalog_default(), &b, &PromptTemplateSet::default(), Some(&ex)).unwrap();
        let r = SyntheticGenerator::new(&catalog_default()).complete(&ChatRequest::new("m", p.text)).unwrap();
        assert_eq!(parse_expansion_reply(&r.text, 12).unwrap().items.len(), 12);
    }

    #[test]
    fn random_judge_is_a_permutation() {
        let j = RandomJudge::new(5, 12);
        let r = j.complete(&ChatRequest::new("m", "x")).unwrap();
        let ranking = parse_ranking_reply(&r.text, &catalog_default()).unwrap().ranking;
        assert_eq!(ranking.len(), 12);
        assert_eq!(r.text, j.complete(&ChatRequest::new("m", "x").with_tag("other")).unwrap().text);
    }

    #[test]
    fn oracle_ranks_truth_first_or_last() {
        let req = ChatRequest::new("m", "x").with_tag("judge/d1/2/oReact");
        let r = OracleJudge::new(catalog_default()).complete(&req).unwrap();
        assert!(r.text.starts_with("8 > 1 > 2"));
        let r = OracleJudge::inverse(catalog_default()).complete(&req).unwrap();
        assert!(r.text.ends_with("12 > 8"));
        assert!(OracleJudge::new(catalog_default()).complete(&ChatRequest::new("m", "x")).is_err());
    }
}
