//! Minimal differentiable compute kernel: dense 2-D tensors, a reverse-mode
//! tape, the handful of layers the model needs, AdamW on a cosine schedule,
//! EMA blending and the `ckpt/v1` checkpoint format.

mod checkpoint;
mod graph;
mod layers;
mod optim;
mod tensor;

pub use checkpoint::{sha256_hex, Checkpoint, CheckpointError, CheckpointHeader, ManifestEntry, CKPT_FORMAT};
pub use graph::{sigmoid, softmax, softmax_rows, Graph, Grads, NnError, Param, ParamId, ParamStore, Var};
pub use layers::{Gru, LayerNorm, Linear, Mlp, MultiHeadAttention, TemporalConv};
pub use optim::{cosine_lr, ema_update, AdamW};
pub use tensor::Tensor;
