//! Desk-scale RLHF: tensor autodiff, tiny transformers, preference data,
//! pairwise reward modeling and PPO with GAE and KL control.

pub mod annotation;
pub mod config;
pub mod error;
pub mod io;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod ppo;
pub mod preference;
pub mod reward;
pub mod sampling;
pub mod sft;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Adam, AdamConfig, Tape, Tensor, Var};
