//! Natural-language preference pairs through a chat-completion endpoint.
//!
//! Instructions are decomposed into constraint lists, corrupted with the same
//! dropout rule as the synthetic pipeline, recombined, and answered by the
//! endpoint. Pairs are written in the shared dataset schema with text
//! payloads and no token weights.

mod cache;
mod client;
mod config;
mod nl;
#[cfg(feature = "stub")]
pub mod stub;
mod templates;

pub use cache::ReplyCache;
pub use client::{ChatClient, ClientStats, Message};
pub use config::EndpointConfig;
pub use nl::{
    build_nl_pairs, decompose_nl, dropout_recombine_nl, negate_nl, recombine_nl, substitute_nl, NlDropout,
    NlPairOptions, NlSummary,
};
pub use templates::{fill, numbered, parse_numbered_list, PromptTemplateSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingKey(String),
    #[error("template placeholder {{{0}}} was not filled")]
    UnfilledPlaceholder(String),
    #[error("reply is not a numbered list: {raw:?}")]
    Parse { raw: String },
    #[error("empty instruction")]
    EmptyInstruction,
    #[error("filtered: {0}")]
    Filtered(&'static str),
    #[error("endpoint returned status {0}")]
    Status(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
