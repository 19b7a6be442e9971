//! A synthetic "sound world": a grammar of ordered sound events, a renderer
//! that turns event timelines into non-negative spectrogram-like arrays,
//! fixed oracle encoders for frame-level semantics and prompts, an oracle
//! event decoder used as the evaluation judge, dataset persistence, and the
//! hard editing benchmark builder.

pub mod benchmark;
pub mod dataset;
pub mod error;
pub mod oracle;
pub mod prompt;
pub mod render;
pub mod timeline;

pub use benchmark::{build_hard_benchmark, similarity, BenchmarkPair, BenchmarkSet};
pub use dataset::{generate_dataset, Dataset, DatasetMeta};
pub use error::WorldError;
pub use oracle::{decode_events, encode_semantics, matched_energies, SemanticFeatures};
pub use prompt::{encode_prompt, perturb_prompt, sample_prompt, Grammar, PromptCondition, PromptSpec};
pub use render::{render_clip, RenderedClip};
pub use timeline::{realize_timeline, Event, EventTimeline};

/// Number of event classes.
pub const NUM_CLASSES: usize = 8;
/// Acoustic frames per clip.
pub const FRAMES: usize = 64;
/// Acoustic channels per frame.
pub const CHANNELS: usize = 16;
/// Semantic frames per clip; each pools `POOL` acoustic frames.
pub const SEM_FRAMES: usize = 16;
pub const POOL: usize = FRAMES / SEM_FRAMES;
/// Semantic feature dimension per frame.
pub const SEM_DIM: usize = 32;
/// Longest prompt.
pub const MAX_TOKENS: usize = 4;
/// Per-token row width of the token-level prompt encoding.
pub const TOKEN_DIM: usize = NUM_CLASSES + 1;
/// Flattened prompt-condition width: global part plus token rows.
pub const COND_DIM: usize = NUM_CLASSES + MAX_TOKENS * TOKEN_DIM;
