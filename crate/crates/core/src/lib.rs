//! Image ranking for potentially idiomatic nominal compounds.
//!
//! The pipeline: an LLM decides whether a compound is idiomatic in context
//! and, if so, paraphrases its meaning ([`llmgate`]); multilingual CLIP
//! embeddings of the resolved query, candidate images and captions are loaded
//! from an interchange file ([`embedstore`]) and ranked by cosine similarity,
//! optionally averaged across LLMs ([`ranker`]). A projection head can be
//! fine-tuned contrastively on anchor/positive/negative sets ([`triplets`],
//! [`head`]). [`metrics`] scores rankings against gold orders.

pub mod corpus;
pub mod embedstore;
pub mod head;
pub mod llmgate;
pub mod metrics;
pub mod ranker;
pub mod seed;
pub mod triplets;

pub use corpus::{CandidateImage, CompoundType, Language, Sample, SplitSpec};
pub use embedstore::{EmbeddingRecord, EmbeddingStore, Role, SampleBundle};
pub use head::{ContrastiveExample, HeadParams, TrainConfig, TrainReport};
pub use llmgate::{LlmTransport, MeaningRecord, TypeVote};
pub use ranker::{RankResult, ScoreMode};
pub use triplets::{TripletEntry, TripletSet};
