//! Attention-based user agent string (UAS) parsing and vulnerability scoring.
//!
//! The crate is organized around a fixed workflow:
//!
//! 1. [`preprocess`] normalizes raw UASs with a fixed set of character edits
//!    and tokenizes them into at most 50 words.
//! 2. [`embeddings`] trains subword-augmented CBOW word vectors on a UAS
//!    corpus and turns each UAS into a fixed 50x40 matrix.
//! 3. [`model`] runs that matrix through a positionally-encoded two-head
//!    transformer encoder and a task head: 7-class name classification for
//!    OS / software names, or 51-slot index tagging for version locations.
//! 4. [`pipeline`] handles dataset ingestion, class balancing, stratified
//!    splits, the SGD training loops, and evaluation metrics.
//! 5. [`vulnscore`] maps parsed (OS, version, software, version) tuples to
//!    CPE names, fetches CVEs from NVD (or offline fixtures), averages CVSS
//!    scores per UAS, and aggregates them per CIDR range.
//!
//! [`numerics`] is the small autodiff/tensor substrate the models run on,
//! and [`synth`] generates the seeded synthetic corpora used by tests and
//! demos.

pub mod embeddings;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod vulnscore;

mod binfmt;

pub use preprocess::{PreprocessConfig, RawUas, TokenizedUas};
