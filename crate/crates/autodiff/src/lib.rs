//! Dense 2-D tensors, a reverse-mode tape, and forward-mode input tangents
//! that can be recorded on the tape for nested differentiation.
//!
//! Code that should run under several evaluation strategies is written
//! against the [`Backend`] trait:
//!
//! ```
//! use autodiff::{Backend, Eager, Tape, Tensor, ParameterSet};
//!
//! fn energy<B: Backend>(b: &B, w: &Tensor) -> B::T {
//!     let w = b.param("w", w);
//!     let sq = b.square(&w);
//!     b.sum_all(&sq)
//! }
//!
//! let w = Tensor::row(&[3.0, 4.0]);
//! assert_eq!(Eager.scalar_value(&energy(&Eager, &w)), 25.0);
//!
//! let tape = Tape::new();
//! let out = energy(&tape, &w);
//! let mut params = ParameterSet::new();
//! params.insert("w", w);
//! let g = tape.grad(out, &params).unwrap();
//! assert_eq!(g.get("w").unwrap().data, vec![6.0, 8.0]);
//! ```

pub mod backend;
pub mod dual;
pub mod error;
pub mod params;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod unary;

pub use backend::{Backend, Eager};
pub use dual::{input_gradient, Dual, DualT};
pub use error::{AdError, Result};
pub use params::{GradientMap, ParameterSet};
pub use spectral::{power_iteration, SingularTriplet, DEFAULT_POWER_ITERS};
pub use tape::{Adjoints, Tape, Var};
pub use tensor::Tensor;
pub use unary::Unary;
