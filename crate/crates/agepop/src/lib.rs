//! Age-structured population dynamics: transport solvers, steady states,
//! feedback control of cyclic networks and mosquito population models.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the neighbour stencils of the grid and read more clearly.
#![allow(clippy::needless_range_loop)]

pub mod backstepping;
pub mod equilibrium;
pub mod error;
pub mod grid;
pub mod mosquito;
pub mod pipeline;
pub mod renewal;
pub mod scenario;
pub mod transport;
pub mod verification;

pub use error::{Error, Result};
