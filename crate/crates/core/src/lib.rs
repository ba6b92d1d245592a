//! Dialogue-to-photo retrieval.
//!
//! Given a conversation that ends where one speaker shares a photo, the engine
//! asks an LLM for a visual descriptor of the photo-to-be, embeds it, and
//! ranks a fixed photo repository by a fused score:
//!
//! ```text
//! score(photo) = cos(desc, object list) + lambda * cos(desc, image)
//! ```
//!
//! The first term compares text with text (the photo's detected objects), the
//! second compares text with the image embedding. Linear adapters over frozen
//! embeddings can be trained with a dual InfoNCE objective, and the
//! [`eval`] module reproduces recall@k evaluation together with lambda sweeps,
//! query-set ablations and object-noise sensitivity tables.
//!
//! Data-parallel loops (score matrices, sweep cells, batch encoding) run on
//! rayon when the `parallel` feature is enabled (the default) and fall back to
//! plain iterators otherwise. See [`exec::Execution`].

pub mod adapter;
pub mod corpus;
pub mod descriptor;
pub mod embedding;
pub mod eval;
pub mod exec;
pub mod retry;
pub mod scoring;
pub mod synthetic;
pub mod trainer;

mod error;

pub use adapter::{adapter_forward, AdapterParams, Tower};
pub use corpus::{
    load_corpus, perturb_objects, render_object_list, save_corpus, Corpus, Dialogue, ObjectNoise,
    PhotoCandidate, Speaker, Split, Turn,
};
pub use descriptor::{
    build_prompt, generate_descriptor, parse_query_answers, render_descriptor, Descriptor,
    DescriptorMap, DescriptorVariant, Query, QuerySet,
};
pub use embedding::{read_store, write_store, EmbeddingStore, EmbeddingVector, Encoder};
pub use error::Error;
pub use eval::{evaluate, recall_at_k, EvalReport, Metrics};
pub use exec::Execution;
pub use scoring::{cosine_similarity, ensemble, fuse, rank, score_all, FusionConfig, Ranking, ScoreMatrix};
pub use trainer::{batch_loss, gradients, infonce_loss, train, TrainConfig};

pub type Result<T, E = Error> = std::result::Result<T, E>;
