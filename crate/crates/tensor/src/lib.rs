//! Dense f32 tensors with a reverse-mode tape.
//!
//! The op set is deliberately small: convolution, batchnorm, ReLU, dense,
//! dropout, 2-D max pooling, global average pooling, set max pooling,
//! concatenation, residual addition and MSE. Storage is f32; reductions
//! accumulate in f64.

mod error;
mod gemm;
mod gradcheck;
mod layer;
mod ops;
pub mod par;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, layer_suite, GradCheckCase, GradCheckOptions, GradCheckReport, ParamCheck};
pub use layer::{pooled_extent, BatchNormStats, LayerSpec, Mode, BN_EPS, BN_MOMENTUM};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
