//! Dense f64 tensors, a tape-based autodiff graph, transformer layers,
//! AdamW and a checkpoint container.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use graph::{AttnSpec, Graph, PvCell, Var};
pub use layers::{Embedding, Encoder, EncoderConfig, EncoderOutput, LayerNorm, Linear, SeqBatch};
pub use optim::{ema_update, lr_schedule, AdamW, AdamWConfig};
pub use params::{Grads, Init, ParamId, ParamStore};
pub use tensor::Tensor;
