#![no_std]
#![doc = "Sparse nonlinear ODE recovery: term libraries, an RK4 solver with a discrete adjoint, a GRU neural-flow network, training, benchmarks and a surrogate-driven configuration selector."]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod bench;
pub mod error;
pub mod ident;
pub mod library;
pub mod net;
pub mod ode;
pub mod select;
pub mod train;

pub use error::{Error, Result};
pub use library::{SparseOdeModel, Term, TermLibrary};
pub use ode::{TimeSeriesDataset, Trajectory};
