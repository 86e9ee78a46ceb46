use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op} shape mismatch: lhs {lhs:?} rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("cross-entropy mask selects no positions")]
    EmptyMask,

    #[error("target id {id} out of range for vocabulary of size {vocab}")]
    TargetOutOfRange { id: u32, vocab: usize },

    #[error("label {label} out of range: vocabulary has {n_labels} node labels")]
    LabelOutOfRange { label: u16, n_labels: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("invalid topology: {reason}")]
    BadTopology { reason: String },

    #[error("topology d={d}, l={l} needs at least {needed} distinct labels, pool has {n_labels}")]
    LabelPoolTooSmall {
        d: usize,
        l: usize,
        needed: usize,
        n_labels: usize,
    },

    #[error(
        "dataset saturated: instance {index} still duplicates an earlier draw \
         after {retries} redraws"
    )]
    DedupSaturated { index: usize, retries: usize },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),

    #[error("graph structure broken at node {node}: arms must be disjoint simple chains")]
    BrokenPath { node: u16 },

    #[error("bad config: {0}")]
    Config(String),

    #[error("batch mixes sequence lengths {0} and {1}")]
    MixedLengths(usize, usize),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("model context is {max} positions, sequence needs {needed}")]
    ContextOverflow { max: usize, needed: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: u32, loss: f64 },

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("dataset fingerprint mismatch: expected {trained_on}, found {found} (pass --allow-fingerprint-mismatch to proceed anyway)")]
    FingerprintMismatch { trained_on: String, found: String },

    #[error("greedy decode needs at least one step")]
    ZeroSteps,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
