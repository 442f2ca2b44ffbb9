use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("Gittins index not tabulated for (s={s}, f={f}); table covers s+f <= {max_count}")]
    Lookup { s: u32, f: u32, max_count: u32 },

    #[error("{what} exceeds the exact-enumeration budget ({used} > {budget}); {hint}")]
    Resource {
        what: &'static str,
        used: u64,
        budget: u64,
        hint: &'static str,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate allocation-probability law: point mass at {point}")]
    Degenerate { point: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
