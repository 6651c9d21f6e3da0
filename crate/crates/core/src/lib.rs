//! Piecewise-affine approximation of SBV fields.
//!
//! The crate builds discontinuous piecewise-affine interpolants on shifted
//! periodic Freudenthal grids, evaluates bulk and surface energies and the
//! discrepancy metrics between a field and its approximant, and drives the
//! multiscale construction that aligns approximant jumps with the field's
//! jump set.

pub mod error;
pub mod field;
pub mod geom;
pub mod interp;
pub mod mesh;
pub mod projector;
pub mod energy;
pub mod boundary;
pub mod pipeline;

pub use error::{Error, Result};
