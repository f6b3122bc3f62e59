use thiserror::Error;

/// Errors surfaced by the simulator library.
#[derive(Debug, Error)]
pub enum FedError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("ingestion error at offset {offset}: {message}")]
    Ingestion { offset: u64, message: String },

    #[error("local-optimum oracle failed to converge: last gradient norm {grad_norm:.3e} after {iters} iterations")]
    OracleFailure { grad_norm: f64, iters: usize },

    #[error("client {client_id} failed in round {round}: {source}")]
    ClientFailure {
        client_id: usize,
        round: usize,
        #[source]
        source: Box<FedError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FedError>;
