//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! Operations on tensors that are watched by a [`Tape`] are recorded; the
//! reverse sweep ([`Tape::backward`] / [`Tape::grad`]) then propagates
//! gradients from a scalar back to the leaves. On a tape created with
//! [`Tape::higher_order`], the sweep can itself be recorded, so gradients come
//! back as tracked tensors that can be differentiated again.
//!
//! ```
//! use pavae_autograd::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.watch(&Tensor::scalar(3.0));
//! let y = x.square().unwrap();
//! let grads = tape.backward(&y, false).unwrap();
//! assert_eq!(grads.get(&x).unwrap().item().unwrap(), 6.0);
//! ```

pub mod check;
mod error;
mod op;
mod ops;
mod real;
pub mod shape;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::reduce::Reduction;
pub use real::Real;
pub use tape::{GradientMap, Tape};
pub use tensor::Tensor;
