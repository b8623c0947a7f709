//! Steering networks: the ResNet8 RGB regressor and the three-branch
//! fusion network, plus the weight container.

mod config;
mod gradcheck;
mod model;
mod weights;

use nav_tensor::TensorError;
use thiserror::Error;

pub use config::{Arch, NetConfig};
pub use model::{
    forward, init_weights, layout, nmfnet_forward, pointnet_encode, residual_block_forward, rgbnet_forward, Batch,
    Branch, Forward, ForwardOptions, Init,
};
pub use gradcheck::model_suite;
pub use weights::{load_weights, save_weights, ModelWeights, WEIGHTS_VERSION};

#[derive(Debug, Error)]
pub enum NetsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("weights are tagged {found}, expected {expected}")]
    WrongArch { expected: Arch, found: Arch },
    #[error("missing weight {0:?}")]
    MissingWeight(String),
    #[error("weight {name:?} has shape {found:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing {0} input")]
    MissingModality(&'static str),
    #[error("{arch} has no {branch} branch")]
    NoBranch { arch: Arch, branch: Branch },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("weight container i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?} (expected \"NAVW\")")]
    BadMagic([u8; 4]),
    #[error("unsupported weight container version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown architecture tag {0}")]
    UnknownTag(u8),
    #[error("truncated container: {0}")]
    Truncated(String),
    #[error("corrupt container: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, NetsError>;
