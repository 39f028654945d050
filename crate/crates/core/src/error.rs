use thiserror::Error;

/// Errors surfaced by simulator operations.
///
/// Protocol-level anomalies that the real system would detect at runtime
/// (bad event ids, out-of-bounds remote writes) are modeled as fault events
/// that feed the reliability module; they are carried here as errors when an
/// operation cannot produce a completion at all.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("out-of-bounds access on node {node}: offset {offset} + len {len} exceeds {limit}")]
    OutOfBounds {
        node: u32,
        offset: usize,
        len: usize,
        limit: usize,
    },

    #[error("protocol fault on channel {src}->{dst}: {detail}")]
    ProtocolFault { src: u32, dst: u32, detail: String },

    #[error("placement error: no free slots for experts {unplaced:?}")]
    Placement { unplaced: Vec<usize> },

    #[error("incomplete combine: token {token} is missing output from expert {expert}")]
    IncompleteCombine { token: usize, expert: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
