//! Spectral multishape convolutions with singular kernels and a nonlocal
//! Cahn-Hilliard solver built on them.
//!
//! The crate is organised bottom-up:
//!
//! * [`spectral`]: Chebyshev grids, differentiation and interpolation.
//! * [`closed_forms`]: exact potentials of squares, boxes and discs.
//! * [`kernels`] and [`potentials`]: interaction kernels and local free energies.
//! * [`multishape`]: assembly of dense convolution matrices.
//! * [`domain_maps`]: pullback of operators to mapped domains.
//! * [`cache`]: binary operator files.
//! * [`solver`]: adaptive BDF integration and equilibrium diagnostics.
//!
//! Loops over rows and parameter sets honour [`par::Execution`]; build with
//! `--no-default-features` to drop the rayon dependency entirely.

pub mod cache;
pub mod closed_forms;
pub mod domain_maps;
pub mod error;
pub mod initial;
pub mod kernels;
pub mod multishape;
pub mod par;
pub mod potentials;
pub mod quad;
pub mod solver;
pub mod spectral;

pub use error::{Error, Result};
pub use par::Execution;
