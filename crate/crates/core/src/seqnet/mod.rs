//! Sequence-network numerics: LSTM cells, stacked forwards, affine heads,
//! parameter storage and reverse-mode gradients.

pub mod graph;
pub mod lstm;
pub mod params;

pub use graph::{compute_gradients, Graph, Var};
pub use lstm::{affine, affine_batch, lstm_step, lstm_step_batch, stacked_forward, stacked_forward_batch, AffineParams, LstmParams, StackOutput};
pub use params::{init_params, load_checkpoint, save_checkpoint, ParamKind, ParamShape, ParamStore};

/// Floating-point element type used by the networks (`f32` for training,
/// `f64` for gradient checks).
pub trait Real: ndarray::NdFloat + num_traits::FromPrimitive {}

impl<T: ndarray::NdFloat + num_traits::FromPrimitive> Real for T {}
