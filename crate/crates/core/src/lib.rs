//! Intent-indexed memory for long, goal-oriented agent trajectories.
//!
//! Each trajectory step is annotated online with a contextual intent
//! (thematic scope, event type, key entity types), ambiguous references are
//! rewritten against structurally aligned history, and retrieval ranks stored
//! snippets by how many intent labels they share with a query-side filter.
//!
//! The crate also carries a seedable benchmark generator with symbolic ground
//! truth and the evaluation harness that scores the memory against it.

pub mod bench;
pub mod embedding;
pub mod eval;
pub mod gateway;
pub mod intent;
pub mod model;
pub mod records;
pub mod retrieval;
pub mod store;
pub mod text;

pub use embedding::{Embedder, EmbeddingIndex, EmbeddingRecord, HashEmbedder};
pub use gateway::{Gateway, GatewayConfig, ModelResult, ModelTask, Payload, TaskKind};
pub use intent::{IngestSession, IngestionConfig};
pub use retrieval::{QueryRequest, QueryResponse, RankedSnippet, RetrievalConfig};
pub use model::{
    ContextualIntent, EvaluationQuestion, FilterConfig, LabelKind, LabelVocabulary, MemorySnippet,
    QuestionType, ScopeState, SymbolicOperation, Timestamp, TrajectoryStep,
};
pub use store::{Store, StoreView};
