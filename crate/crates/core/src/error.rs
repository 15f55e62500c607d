//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // --- tensor container ---
    #[error("malformed header length: {0}")]
    MalformedHeader(String),
    #[error("non-decodable metadata: {0}")]
    BadMetadata(String),
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("tensor {name}: shape/dtype mismatch (expected {expected}, got {got})")]
    TensorMismatch {
        name: String,
        expected: String,
        got: String,
    },
    #[error("container is missing tensors: {0:?}")]
    MissingTensors(Vec<String>),
    #[error("container has unexpected extra tensors: {0:?}")]
    ExtraTensors(Vec<String>),

    // --- model / forward pass ---
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range (vocab_size {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("invalid site: {0}")]
    InvalidSite(String),
    #[error("conflicting interventions at layer {layer}, token {token}")]
    InterventionConflict { layer: usize, token: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    // --- tokenizer ---
    #[error("bpe tokenizer requires vocab and merges files")]
    BpeFilesMissing,
    #[error("unknown token id {0} during detokenization")]
    UnknownToken(u32),

    // --- editor / selector ---
    #[error("subject {subject:?} tokenizes to an empty span in prompt {prompt:?}")]
    EmptySubjectSpan { subject: String, prompt: String },
    #[error("prompt template must contain exactly one {{}} slot: {0:?}")]
    BadTemplate(String),
    #[error("zero key vector at layer {0}: degenerate pattern, refusing to edit")]
    ZeroKey(usize),
    #[error("no valid layer: activation strength is zero everywhere")]
    NoValidLayer,

    // --- toxicity / cma ---
    #[error("snapshot shape mismatch: {0}")]
    SnapshotMismatch(String),
    #[error("step {0} is not a recorded checkpoint")]
    UnknownStep(usize),
    #[error("missing step records: {0}")]
    MissingSteps(String),
    #[error("receipts lack a rollback stage for case {0}")]
    MissingRollback(u64),
    #[error("invalid cma parameter: {0}")]
    BadCmaParam(String),

    // --- harness / records ---
    #[error("record schema error (case_id {case_id}): {msg}")]
    RecordSchema { case_id: String, msg: String },
    #[error("duplicate case_id {0}")]
    DuplicateCaseId(u64),
    #[error("toy model failed to memorize within {steps} steps ({remaining} prompts still wrong)")]
    NonConvergence { steps: usize, remaining: usize },
    #[error("run config invalid: {0}")]
    BadRunConfig(String),
    #[error("checksum mismatch for {what}: manifest {expected}, file {got}")]
    ChecksumMismatch {
        what: String,
        expected: String,
        got: String,
    },
    #[error("run log corrupt: {0}")]
    CorruptRunLog(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
