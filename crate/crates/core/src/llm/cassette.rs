//! Record/replay of model calls.
//!
//! A cassette is a JSONL file, one entry per distinct [`cache_key`]:
//!
//! ```text
//! {"key": "...", "tag": "...", "request": {...}, "response": {...}, "recorded_at": "2024-01-01T00:00:00Z"}
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{cache_key, ChatBackend, ChatRequest, ChatResponse, LlmError};
use crate::jsonl::{self, Appender};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub tag: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
    pub recorded_at: String,
}

/// Integrity summary of a cassette file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CassetteCheck {
    pub entries: usize,
    pub duplicate_keys: usize,
    /// Entries whose stored key differs from the key recomputed from the request.
    pub key_mismatches: Vec<String>,
    pub malformed_lines: Vec<usize>,
}

impl CassetteCheck {
    pub fn is_clean(&self) -> bool {
        self.duplicate_keys == 0 && self.key_mismatches.is_empty() && self.malformed_lines.is_empty()
    }
}

pub fn check_cassette(path: &Path) -> Result<CassetteCheck, LlmError> {
    let lines = jsonl::read_lines::<CassetteEntry>(path).map_err(|e| LlmError::Cassette(format!("{}: {e}", path.display())))?;
    let mut check = CassetteCheck::default();
    let mut seen = std::collections::HashSet::new();
    for line in lines {
        match line {
            Ok(entry) => {
                check.entries += 1;
                if !seen.insert(entry.key.clone()) {
                    check.duplicate_keys += 1;
                }
                if cache_key(&entry.request) != entry.key {
                    check.key_mismatches.push(entry.key);
                }
            }
            Err((line, _)) => check.malformed_lines.push(line),
        }
    }
    Ok(check)
}

fn load(path: &Path) -> Result<HashMap<String, CassetteEntry>, LlmError> {
    let entries: Vec<CassetteEntry> = jsonl::read_records(path).map_err(|e| LlmError::Cassette(e.to_string()))?;
    let mut map = HashMap::with_capacity(entries.len());
    for e in entries {
        map.entry(e.key.clone()).or_insert(e);
    }
    Ok(map)
}

enum Mode {
    Strict,
    Record {
        inner: Box<dyn ChatBackend>,
        writer: Mutex<Appender>,
    },
}

/// Serves responses from a cassette. In strict mode a miss is
/// [`LlmError::CassetteMiss`]; in record mode a miss is forwarded to the inner
/// backend and the answer appended to the cassette.
pub struct ReplayBackend {
    path: PathBuf,
    entries: RwLock<HashMap<String, CassetteEntry>>,
    mode: Mode,
}

impl ReplayBackend {
    pub fn strict(path: &Path) -> Result<Self, LlmError> {
        if !path.exists() {
            return Err(LlmError::Cassette(format!("cassette {} does not exist", path.display())));
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries: RwLock::new(load(path)?),
            mode: Mode::Strict,
        })
    }

    /// Record mode; the cassette file is created if missing.
    pub fn recording(path: &Path, inner: Box<dyn ChatBackend>) -> Result<Self, LlmError> {
        let entries = load(path)?;
        let writer = Appender::open(path).map_err(|e| LlmError::Cassette(format!("{}: {e}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            entries: RwLock::new(entries),
            mode: Mode::Record {
                inner,
                writer: Mutex::new(writer),
            },
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cassette").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let key = cache_key(req);
        if let Some(entry) = self.entries.read().expect("cassette").get(&key) {
            return Ok(ChatResponse {
                cached: true,
                ..entry.response.clone()
            });
        }
        match &self.mode {
            Mode::Strict => Err(LlmError::CassetteMiss {
                key,
                tag: req.request_tag.clone(),
            }),
            Mode::Record { inner, writer } => {
                let response = inner.complete(req)?;
                let entry = CassetteEntry {
                    key: key.clone(),
                    tag: req.request_tag.clone(),
                    request: req.clone(),
                    response: ChatResponse {
                        cached: false,
                        ..response.clone()
                    },
                    recorded_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                };
                let mut w = writer.lock().expect("cassette writer");
                let mut entries = self.entries.write().expect("cassette");
                if let std::collections::hash_map::Entry::Vacant(slot) = entries.entry(key) {
                    w.append(std::slice::from_ref(&entry))
                        .map_err(|e| LlmError::Cassette(e.to_string()))?;
                    slot.insert(entry);
                }
                Ok(response)
            }
        }
    }
}
