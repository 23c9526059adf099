//! Two-weight constants, energies and corona decompositions for pairs of
//! finite atomic measures.

pub mod corona;
pub mod energy;
pub mod error;
pub mod family;
pub mod geometry;
pub mod haar;
pub mod harness;
pub mod measures;
pub mod muckenhoupt;
pub mod operator;
pub mod poisson;
pub mod tree;

pub use error::{Error, Result};
