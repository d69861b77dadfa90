//! Finite-difference solvers for mean field games and mean field control.

pub mod bench;
pub mod config;
pub mod error;
pub mod grid;
pub mod hamiltonian;
pub mod huggett;
pub mod io;
pub mod linalg;
pub mod mfg;
pub mod registry;
pub mod run;
pub mod variational;

pub use error::{Error, Result};
