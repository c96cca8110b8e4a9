//! Semantic-anchor context compression.
//!
//! A compressor picks anchor tokens out of a context, marks them with a
//! learned embedding, runs a LoRA-adapted bidirectional encoder over the
//! context, and hands the per-layer keys and values at the anchor slots to a
//! frozen causal decoder in place of the full context.

pub mod autograd;
pub mod baselines;
pub mod compressor;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use baselines::{Carrier, CompressionTokenBank, PositionMode};
pub use compressor::{
    compress, compress_chunk, compress_context, AnchorSet, Compressed, CompressedRepr,
    CompressionConfig, CompressorParams, ContinuationStart, EncoderMask, LoraSpec, Method,
    SoftTokens, Strategy,
};
pub use data::{QARecord, Tokenizer, TrainSample};
pub use error::{Error, Result};
pub use eval::{AttentionDump, Conditioning, MetricReport};
pub use io::Checkpoint;
pub use model::{AttentionMask, KvCache, LoraAdapter, ModelConfig, ModelParams, Proj};
pub use tensor::{DType, Scalar, Tensor};
pub use train::{Objective, OptimState, TraceRow, TrainConfig};
