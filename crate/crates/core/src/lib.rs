//! Numerical laboratory for additive-noise SDE flows with bounded measurable
//! drift: two-parameter flow simulation, weighted Sobolev regularity
//! diagnostics, Gaussian-kernel iterated-integral machinery, the stochastic
//! transport equation by characteristics, and zero-noise limits of
//! discontinuous ODEs.

// study operations take the parameter lists they take, and negated
// comparisons are the NaN-rejecting form on purpose
#![allow(clippy::too_many_arguments)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod fields;
pub mod flow;
pub mod harness;
pub mod kernel;
pub mod lattice;
pub mod numerics;
pub mod paths;
pub mod regularity;
pub mod rng;
pub mod transport;
pub mod zeronoise;
