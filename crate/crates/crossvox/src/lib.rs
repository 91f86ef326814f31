//! Desk-scale multilingual transformer TTS testbed for cross-lingual speaker
//! similarity experiments.
//!
//! The crate synthesizes a deterministic multilingual mel-spectrogram corpus
//! with known speaker/language factors, trains a miniature transformer TTS
//! model on it (optionally with multi-task speaker/language classifier heads
//! and joint training against an x-vector speaker classifier), and measures
//! intra- vs cross-lingual speaker similarity with cosine-distance scorers.
//!
//! Everything is seeded and single-threaded so that a given (config, seed)
//! pair reproduces byte-identical corpora, loss traces, checkpoints and
//! reports.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kvconfig;
pub mod nn;
pub mod provenance;
pub mod seeds;
pub mod spkembed;
pub mod tape;
pub mod trainer;
pub mod tts;

pub use error::{Error, Result};

/// Version stamp written into checkpoints and provenance manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
