//! Dense `f64` tensors, a reverse-mode gradient tape and gradient-descent
//! optimizers.
//!
//! The typical training step binds a [`ParamStore`] onto a fresh [`Graph`],
//! builds a scalar loss, runs [`Graph::backward`], accumulates the result into
//! the store and lets an [`Optimizer`] apply it:
//!
//! ```
//! use choreo_tensor::{Graph, Optimizer, ParamStore, Sgd, Tensor};
//!
//! let mut store = ParamStore::new();
//! let x = store.add("x", Tensor::scalar(1.0), true).unwrap();
//! let mut opt = Sgd::new(0.1);
//! for _ in 0..2 {
//!     let mut g = Graph::new();
//!     let p = store.bind(&mut g, true).unwrap();
//!     let y = g.mul(p.var(x), p.var(x)).unwrap();
//!     let grads = g.backward(y).unwrap();
//!     store.accumulate(&p, &grads);
//!     opt.step(&mut store).unwrap();
//! }
//! assert!((store.get(x).item() - 0.64).abs() < 1e-12);
//! ```

pub mod checkpoint;
mod error;
mod graph;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, Optimizer, Sgd};
pub use params::{Bound, Conv1d, Dense, Init, ParamId, ParamStore};
pub use tensor::Tensor;
