//! Neural sequence models: a decoder-only language model and an
//! encoder-decoder translator, with exact hand-written gradients.

pub mod batch;
pub mod beam;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod transformer;

pub use batch::Batch;
pub use beam::{beam_decode, Hypothesis};
pub use checkpoint::{load_checkpoint, load_meta, save_checkpoint, TrainMeta};
pub use config::{ModelConfig, ModelKind};
pub use gradcheck::{central_diff_grad, max_relative_error};
pub use optim::{clip_grad_norm, LrSchedule, OptKind, OptimizerState};
pub use params::{Layout, ParamVector, TensorSpec};
pub use transformer::{backward, encode_source, forward_loss, next_token_logprobs, ForwardOutput};
