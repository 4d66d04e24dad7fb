//! Training-free zero-shot recognition of multi-view 3D shapes from
//! precomputed view and prompt embeddings.
//!
//! The pipeline scores every rendered view against one text prompt per
//! class, keeps the views with the lowest prediction entropy, sums their
//! logits, and, when the resulting distribution is not confident enough,
//! re-matches the selected views against descriptive prompts written for the
//! top-k candidate classes only.

pub mod classifier;
pub mod cli;
pub mod embedding_io;
pub mod error;
pub mod eval;
pub mod prompt_bank;
pub mod scoring;
pub mod view_selection;

pub use classifier::{classify_shape, Aggregation, ClassifierConfig, PredictionRecord};
pub use embedding_io::{load_dataset, Dataset, DatasetManifest, EmbeddingMatrix, ShapeRecord};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport};
pub use prompt_bank::PromptBank;
pub use view_selection::{SelectionConfig, SelectionMode};
