//! The relation head: parameters, forward/backward, checkpoints.

mod checkpoint;
mod head;
mod params;

use thiserror::Error;

use crate::data::ConfigError;
use crate::numerics::NumericsError;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use head::{
    argmax, classify, final_rep, gcn_layer, loss_and_grad, pool_features, predict, record_forward,
    run_gcn, tape_final_rep, tape_gcn_layer, tape_logits, tape_pool, tape_run_gcn, Classification,
    FinalRepresentation, ForwardPass, HeadInput, LossAndGrad, ParamVars, PooledFeatures,
};
pub use params::{param_layout, GcnLayer, ModelParams};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
