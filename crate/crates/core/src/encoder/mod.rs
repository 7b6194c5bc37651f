//! Sources of contextual word states: hashed stand-in vectors, a binary
//! cache, or the remote embedding service.

mod cache;
mod hashed;
mod remote;

use thiserror::Error;

use crate::preprocess::PreprocessError;

pub use cache::{cache_read, cache_write, CacheReader, FloatWidth, CACHE_MAGIC, CACHE_PROVIDER, CACHE_VERSION};
pub use hashed::{hashed_encode, HASHED_PROVIDER};
pub use remote::{
    validate_response, EmbedRequest, EmbedResponse, EmbedTransport, HealthResponse, HttpTransport,
    RemoteEncoder, SubwordStates, REMOTE_PROVIDER,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("cache io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cache format error in {path}: {message}")]
    Format { path: String, message: String },
    #[error("no cached record for id {0:?}")]
    Lookup(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("service returned status {status}: {body}")]
    Service { status: u16, body: String },
    #[error("encoder contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Alignment(#[from] PreprocessError),
}
