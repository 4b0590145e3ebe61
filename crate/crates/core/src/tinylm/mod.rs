//! Small configurable decoder-only transformer with analytic gradients.

mod batch;
mod config;
mod model;
mod params;

pub use batch::TokenBatch;
pub use config::ModelConfig;
pub use model::{backward, forward_loss, generate, generate_batch, init_model};
pub use params::{expected_shapes, ParamName, ParamStore, Role, RoleGroup, Tensor};
