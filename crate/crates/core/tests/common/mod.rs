#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csaug::evaluate::complete_ranking;
use csaug::prompts::{parse_expansion_reply, parse_ranking_reply, PromptError};
use csaug::relations::RelationCatalog;
use serde::Deserialize;
use serde_json::Value;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_csaug")
}

pub fn run_cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env_remove("OPENAI_API_KEY")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), &target).unwrap();
        }
    }
}

/// Copies the corpus, run config and cassettes into `dir`.
pub fn stage_fixtures(dir: &Path) {
    let f = fixtures();
    fs::copy(f.join("corpus.jsonl"), dir.join("corpus.jsonl")).unwrap();
    fs::copy(f.join("run.json"), dir.join("run.json")).unwrap();
    copy_dir(&f.join("cassettes"), &dir.join("cassettes"));
}

pub const REPORT_CELL: &str = "Zero-Shot GPT-3.5|GPT-4|runs/fixture/rankings.gpt-4.jsonl|runs/fixture/expansions.jsonl";
pub const ABSENT_CELL: &str = "One-Shot GPT-3.5|GPT-4";

/// sample, expand, judge and report against the replay cassettes, in `dir`.
pub fn offline_pipeline(dir: &Path) -> Result<(), String> {
    let steps: [&[&str]; 4] = [
        &["sample", "--config", "run.json", "--corpus", "corpus.jsonl", "--output", "runs/fixture/sampled.jsonl"],
        &["expand", "--config", "run.json", "--corpus", "runs/fixture/sampled.jsonl"],
        &[
            "judge",
            "--config",
            "run.json",
            "--corpus",
            "runs/fixture/sampled.jsonl",
            "--backend",
            "replay:cassettes/judge.jsonl",
        ],
        &[
            "report",
            "--cell",
            REPORT_CELL,
            "--absent",
            ABSENT_CELL,
            "--out-dir",
            "runs/fixture/report",
            "--samples",
            "1",
            "--corpus",
            "runs/fixture/sampled.jsonl",
        ],
    ];
    for args in steps {
        let out = run_cli(dir, args);
        if !out.status.success() {
            return Err(format!("`csaug {}` exited with {:?}: {}", args.join(" "), out.status.code(), stderr(&out)));
        }
    }
    Ok(())
}

/// SHA-256 of every file below `root`, keyed by `/`-separated relative path.
pub fn manifest(root: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel: Vec<String> = p
                    .strip_prefix(root)
                    .unwrap()
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect();
                out.insert(rel.join("/"), csaug::sha256_hex(fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn render_manifest(m: &BTreeMap<String, String>) -> String {
    m.iter().map(|(p, h)| format!("{h}  {p}\n")).collect()
}

pub fn golden_manifest() -> String {
    fs::read_to_string(fixtures().join("golden_run.sha256")).unwrap()
}

#[derive(Debug, Deserialize)]
pub struct ReplyCase {
    pub id: String,
    pub kind: String,
    pub reply: String,
    pub expect: Value,
}

pub fn reply_cases() -> Vec<ReplyCase> {
    fs::read_to_string(fixtures().join("malformed_replies.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn error_kind(e: &PromptError) -> &'static str {
    match e {
        PromptError::EmptyContext => "EmptyContext",
        PromptError::EmptyCandidate => "EmptyCandidate",
        PromptError::UnparseableReply(_) => "UnparseableReply",
        PromptError::InvalidTemplates(_) => "InvalidTemplates",
        PromptError::Relation(_) => "Relation",
    }
}

fn usizes(v: &Value) -> Vec<usize> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect()
}

fn check_expansion(case: &ReplyCase) -> Result<(), String> {
    let parsed = parse_expansion_reply(&case.reply, 12);
    let expect = &case.expect;
    if let Some(kind) = expect.get("error").and_then(Value::as_str) {
        return match parsed {
            Err(e) if error_kind(&e) == kind => Ok(()),
            other => Err(format!("expected {kind}, got {other:?}")),
        };
    }
    let reply = parsed.map_err(|e| format!("unexpected error {e}"))?;
    let present: Vec<usize> = reply.items.iter().map(|i| i.index).collect();
    if present != usizes(&expect["present"]) {
        return Err(format!("present {present:?}"));
    }
    if reply.gaps != usizes(&expect["gaps"]) {
        return Err(format!("gaps {:?}", reply.gaps));
    }
    if let Some(echo) = expect.get("echoed").and_then(Value::as_object) {
        for (idx, name) in echo {
            let item = reply.get(idx.parse().unwrap()).ok_or(format!("item {idx} missing"))?;
            let got = item.echoed.map(|r| r.name().to_string());
            if got.as_deref() != name.as_str() {
                return Err(format!("item {idx} echoed {got:?}"));
            }
        }
    }
    if let Some(texts) = expect.get("texts").and_then(Value::as_object) {
        for (idx, text) in texts {
            let item = reply.get(idx.parse().unwrap()).ok_or(format!("item {idx} missing"))?;
            if Some(item.text.as_str()) != text.as_str() {
                return Err(format!("item {idx} text {:?}", item.text));
            }
        }
    }
    Ok(())
}

fn check_ranking(case: &ReplyCase, catalog: &RelationCatalog) -> Result<(), String> {
    let parsed = parse_ranking_reply(&case.reply, catalog);
    if let Some(kind) = case.expect.get("error").and_then(Value::as_str) {
        return match parsed {
            Err(e) if error_kind(&e) == kind => Ok(()),
            other => Err(format!("expected {kind}, got {other:?}")),
        };
    }
    let reply = parsed.map_err(|e| format!("unexpected error {e}"))?;
    let got: Vec<&str> = reply.ranking.iter().map(|r| r.name()).collect();
    let want: Vec<&str> = case.expect["ranking"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    if got != want {
        return Err(format!("ranking {got:?}"));
    }
    let (full, applied) = complete_ranking(&reply.ranking, catalog);
    let mut sorted = full.clone();
    sorted.sort();
    sorted.dedup();
    if full.len() != catalog.len() || sorted.len() != catalog.len() {
        return Err("completion is not a permutation".into());
    }
    if applied != (reply.ranking.len() < catalog.len()) || full[..reply.ranking.len()] != reply.ranking[..] {
        return Err("completion changed the parsed prefix".into());
    }
    Ok(())
}

/// Runs one case without letting a panic escape.
pub fn check_reply_case(case: &ReplyCase, catalog: &RelationCatalog) -> Result<(), String> {
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| match case.kind.as_str() {
        "expansion" => check_expansion(case),
        "ranking" => check_ranking(case, catalog),
        k => Err(format!("unknown case kind {k}")),
    }));
    match outcome {
        Ok(r) => r.map_err(|e| format!("{}: {e}", case.id)),
        Err(_) => Err(format!("{}: parser panicked", case.id)),
    }
}
