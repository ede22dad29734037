//! Sparse neural networks whose connectivity is a set of paths through the
//! layers, traced by quasi-random (Sobol') or pseudo-random sequences.

pub mod conv;
pub mod container;
pub mod data;
pub mod net;
pub mod prune;
pub mod qmc;
pub mod real;
pub mod topology;

pub use real::Real;
