//! Backward stochastic differential equations with jumps and quadratic-growth
//! generators, solved on a discrete lattice, with the exponential-utility
//! portfolio problem built on top.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cascade;
pub mod error;
pub mod generator;
pub mod lattice;
pub mod levy;
pub mod market;
pub mod minimize;
pub mod scalar;
pub mod solver;
pub mod utility;

pub use cascade::{run_cascade, solve_quadratic, CascadeConfig, CascadeTrace};
pub use error::{Error, Result};
pub use generator::{Generator, Truncation};
pub use lattice::{Lattice, LatticeMode};
pub use levy::{Atom, JumpGrid, UFunction};
pub use market::{Coefficient, ConstraintSet, MarketSpec};
pub use scalar::Scalar;
pub use solver::{BsdeSolution, Driver, SolverOptions};
pub use utility::{value_function, verify_optimality, OptimalityReport, StrategyTable};

/// Double-precision aliases.
pub type MarketSpecF64 = MarketSpec<f64>;
pub type LatticeF64 = Lattice<f64>;
pub type JumpGridF64 = JumpGrid<f64>;
pub type BsdeSolutionF64 = BsdeSolution<f64>;
pub type GeneratorF64<'a> = Generator<'a, f64>;
