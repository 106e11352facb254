//! Numerical laboratory for electromagnetically induced transparency in
//! buffer-gas vapor cells: closed-form lineshapes, a Monte-Carlo model of
//! coherence diffusing in and out of a Gaussian beam, a Biot–Savart gradient
//! coil solver, a stored-light simulator and a least-squares fit engine.

pub mod cli;
pub mod coil;
pub mod diffusion;
pub mod error;
pub mod fit;
pub mod io;
pub mod lineshapes;
pub mod physics;
pub mod repro;
pub mod storage;

pub use error::{Error, Result};
