use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("no head with a strict argmax margin after {0} resamples")]
    ArgmaxUnreachable(usize),
    #[error("sample {sample} ends with token {token} but no graph exists for it")]
    GraphMismatch { sample: usize, token: usize },
    #[error("node {0} is not in the graph")]
    UnknownNode(usize),
    #[error("embeddings are not orthonormal (max |E Eᵀ - I| = {0:e})")]
    NotOrthonormal(f64),
    #[error("log-loss argument {value:e} out of domain in sample {sample}")]
    DomainError { sample: usize, value: f64 },
    #[error("loss became non-finite at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("no convergence after {iters} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iters: usize, grad_norm: f64 },
    #[error("correlation with a zero matrix is undefined")]
    ZeroMatrix,
    #[error("schema violation at `{path}`: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
