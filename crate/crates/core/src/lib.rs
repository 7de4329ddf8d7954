//! Learned sparse lexical retrieval at desk scale: a deterministic
//! trainable encoder producing vocabulary-dimensional weight vectors,
//! top-k masking with an optional decay schedule and KL self-learning,
//! an impact-quantized inverted index, and MRR@10 / nDCG@10 evaluation.

pub mod demo;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod loss;
pub mod sparsify;
pub mod train;
pub mod vector;

pub use encoder::{encode, EncoderParams, TokenSequence};
pub use error::{Error, Result};
pub use eval::{mrr_at_10, ndcg_at_10, Qrels, RunEntry};
pub use index::{ImpactIndex, Posting};
pub use loss::{LossBreakdown, SimilarityRow};
pub use sparsify::{top_k_mask, DecaySchedule};
pub use train::{train, TrainConfig, TrainingTriple};
pub use vector::{inner_product, quantize, QuantizedVector, SparseVector, Vocabulary};
