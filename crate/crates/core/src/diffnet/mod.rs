//! Small differentiable-network toolkit: tensors, a reverse-mode tape,
//! layers, Adam, finite-difference checks and checkpoints.

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, Manifest, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{sigmoid, Grads, Graph, Var};
pub use layers::{
    cross_attention_forward, init_params, mlp_forward, velocity_net_forward, AttentionSpec, CondCache, CondProj,
    CrossAttention, Linear, MLPSpec, Mlp, NetSpec, VelocityNet, VelocityNetSpec,
};
pub use optim::{chunked_gradients, optimizer_step, AdamConfig, AdamState};
pub use params::{Init, ParamId, ParamInit, ParamStore};
pub use tensor::{matmul, Tensor};
