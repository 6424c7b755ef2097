//! Object- and relation-centric visual tokenization for action decoding.

pub mod boxes;
pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod relation;
pub mod scalar;
pub mod slot_attention;
pub mod tape;
pub mod task_filter;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Binder, ParamGrads, ParamId, ParamStore, Trainable};
pub use scalar::Scalar;
pub use tape::{concat_cols, concat_rows, Gradients, Var};

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tape::Tape<f64>;
