//! Structure-property multimodal pre-training: model, objectives, training
//! loop, generation, scoring and downstream fine-tuning.

pub mod config;
pub mod data;
pub mod error;
pub mod finetune;
pub mod inference;
pub mod model;
pub mod pretrain;
pub mod state;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ConfigError, RunConfig};
pub use error::{ErrorCategory, SpmmError};
pub use model::{ModelDims, Spmm};
pub use state::{load_model, Assets, LoadedModel};

pub const TAG_EPOCH: u64 = 1;
pub const TAG_STEP: u64 = 2;
pub const TAG_FINETUNE: u64 = 3;
pub const TAG_REACTION: u64 = 4;
pub const TAG_GENERATE: u64 = 5;

/// Independent deterministic stream for `(seed, tag, index)`.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) ^ index);
    rng
}
