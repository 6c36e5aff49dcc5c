//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! The crate provides:
//!
//! - [`Tape`]: records ops from the [`OpKind`] catalog and runs the reverse pass,
//! - [`RngStream`]: labelled counter-based random streams for replayable sampling,
//! - [`OptimizerState`]: Adam with global-norm clipping and weight decay,
//! - [`grad_check`]: central finite differences for verifying all of the above.
//!
//! ```
//! use autograd::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), 6.0);
//! ```

pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampling;
pub mod tape;
pub mod tensor;

pub use error::{AutogradError, Result};
pub use gradcheck::{central_difference, grad_check, grad_check_taped, relative_error};
pub use optim::{clip_global_norm, global_norm, AdamConfig, OptimizerState, StepReport, WeightDecay};
pub use params::{ParamId, ParamStore};
pub use rng::RngStream;
pub use sampling::{reparam_with_noise, sample_gaussian_reparam, sample_gumbel_softmax, standard_normal};
pub use tape::{sigmoid, OpKind, Tape, Var, LEAKY_SLOPE};
pub use tensor::Tensor;
