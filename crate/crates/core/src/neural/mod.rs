//! Small deterministic neural toolkit: dense layers, stacked LSTMs with BPTT,
//! softmax / squared-error losses, SGD and finite-difference checking.
//!
//! Everything is `f64` and single-threaded. Gradients are held in a value of
//! the same type as the model they belong to (see [`Parameters`]).

pub mod gradcheck;
pub mod loss;
pub mod lstm;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error};
pub use loss::{one_hot, softmax, softmax_backward, softmax_cross_entropy, squared_error};
pub use lstm::{LstmLayer, StackedCache, StackedLstm};
pub use mlp::{Activation, Dense, Mlp, MlpCache};
pub use optim::{clip_global_norm, sgd_step};
pub use params::Parameters;
pub use tensor::Tensor;
