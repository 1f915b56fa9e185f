//! Prompt-guided visual token compression kernels.
//!
//! The pipeline works on precomputed embeddings:
//!
//! 1. [`alignment`] scores every patch token of a `T x W x H x D` video grid
//!    against a text feature and softmax-normalizes the scores over the whole
//!    clip.
//! 2. [`pooling`] slides a 3D window over the grid and reduces each window
//!    with those scores as its weights, shrinking e.g. 32x24x24 tokens to
//!    16x8x8.
//! 3. [`context`] lengthens a text encoder's positional-embedding table so
//!    long prompts can be scored.
//! 4. [`redundancy`] measures how much of a video is relevant to a question.
//!
//! Tensors are exchanged as `.npy` files ([`npy`]). Kernels parallelize over
//! independent outputs with rayon when the `parallel` feature is on and are
//! bit-identical at any thread count; see [`parallel`].

pub mod alignment;
pub mod context;
pub mod error;
pub mod npy;
pub mod parallel;
pub mod pooling;
pub mod redundancy;
pub mod tensor;

pub use alignment::{
    alignment_logits, project_visual, scores_multi_prompt, softmax_scores, AlignmentConfig,
    ProjectionMatrix, ScoreTensor, TextFeature,
};
pub use context::{
    interpolate_pe, map_index, max_target_length, random_tail_extend, uniform_interpolate_pe,
    Continuity, PositionalEmbeddingTable, RateSchedule,
};
pub use error::{Error, Result};
pub use npy::{read_tensor, write_tensor};
pub use pooling::{
    average_pool, compression_ratio, output_shape, pool_backward, pool_forward, pool_multi,
    pool_separate_st, PoolGradients, PoolMode, PoolingSpec,
};
pub use redundancy::{certificate, frame_similarities, relevance_profile, RelevanceProfile};
pub use tensor::{Dtype, Shape3, Tensor};
