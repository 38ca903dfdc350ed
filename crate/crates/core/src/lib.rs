//! Retrieval-based speculative decoding for knowledge-generation workloads.
//!
//! Drafts come from frequency-annotated trie pools built over previously
//! generated knowledge, are linearized into a tree-masked pseudo-sequence,
//! evaluated by the target model in one call and verified under a greedy or
//! relaxed acceptance policy.
//!
//! Module map:
//! - [`lm`]: target-model interface and the n-gram reference model
//! - [`trie`]: retrieval pools, session overlays, subtree retrieval and pruning
//! - [`pool`]: clustering, attribute partition, routing and pool construction
//! - [`draft`]: prefix backoff and DFS linearization
//! - [`verify`]: acceptance policies and branch selection
//! - [`decode`]: autoregressive and speculative decode loops with metrics
//! - [`bench`]: corpus handling, synthetic data and the experiment runner

mod codec;

pub mod bench;
pub mod decode;
pub mod draft;
pub mod error;
pub mod lm;
pub mod pool;
pub mod trie;
pub mod verify;

pub use decode::{
    compute_metrics, decode_autoregressive, decode_speculative, DecodeLimits, DecodeReport, DecodeSession,
    RunCounters,
};
pub use draft::{linearize, retrieve_draft, DraftParams, LinearDraft};
pub use error::{Error, Result};
pub use lm::{fit_ngram, Distribution, LanguageModel, NGramModel, TokenId};
pub use trie::{
    drop_overlay, prune_top_frequency, retrieve_subtree, DraftTree, SessionOverlay, TrieNode, TriePool,
};
pub use verify::{accept_token, verify_branches, PolicyMode, VerificationOutcome, VerificationPolicy};
