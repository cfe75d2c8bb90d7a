//! Commonsense-conditioned turn augmentation for open-domain dialogue.
//!
//! The pipeline samples dialogues, asks a generator model for one alternative
//! response per ATOMIC relation in a single listwise prompt, then asks a judge
//! model to rank the relation definitions against each generated response.
//! Rankings are scored with Top-k accuracy, MRR and confusion matrices.
//!
//! Stages communicate through JSONL files so that one expansion set can be
//! judged by several judges without regeneration.

pub mod cli;
pub mod corpus;
pub mod evaluate;
pub mod expand;
pub mod jsonl;
pub mod llm;
pub mod metrics;
pub mod prompts;
pub mod relations;
pub mod report;
pub mod seeded;

pub use corpus::{Dialogue, SamplePlan, Source, Speaker, Turn};
pub use evaluate::RankingRecord;
pub use expand::{ExpansionJob, ExpansionRecord, Mode};
pub use metrics::MetricsReport;
pub use relations::{RelationCatalog, RelationDef, RelationId, SpeakerBinding};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes.as_ref()))
}
